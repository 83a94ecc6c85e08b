"""Joint maximum-likelihood training of the generator and the energy prior.

Each step draws short-run Langevin samples from the prior and from the
posterior of the latent code, then applies two Monte-Carlo ascent gradients:
the prior parameters move along the difference of mean energy-correction
gradients between prior and posterior samples, and the generator parameters
move along the gradient of the (negative) Gaussian reconstruction term
evaluated at the posterior samples. Both use Adam with bias correction.

In ``prior_mode="gaussian"`` the energy correction is pinned at zero and
never updated: latent samples come straight from the Gaussian reference,
which is the alternating-backprop baseline.
"""

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .data import batches
from .langevin import LangevinConfig, SamplerDivergence, sample_posterior, sample_prior
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 10
    lr_alpha: float = 2.5e-5
    lr_theta: float = 2.5e-5
    sigma_eps: float = 1.0
    sigma_z: float = 1.0
    latent_dim: int = 32
    ebm_hidden: int = 60
    steps_prior: int = 5
    steps_posterior: int = 5
    step_size_prior: float = 0.4
    step_size_posterior: float = 0.1
    prior_mode: str = "ebm"  # or "gaussian"
    seed: int = 0
    latents_per_sample: int = 1
    grad_clip: float | None = None  # global-norm cap; off by default
    checkpoint_every: int = 0
    precision: str = "float64"

    def __post_init__(self):
        positive = {
            "batch_size": self.batch_size,
            "lr_alpha": self.lr_alpha,
            "lr_theta": self.lr_theta,
            "sigma_eps": self.sigma_eps,
            "sigma_z": self.sigma_z,
            "latent_dim": self.latent_dim,
            "ebm_hidden": self.ebm_hidden,
            "step_size_prior": self.step_size_prior,
            "step_size_posterior": self.step_size_posterior,
            "latents_per_sample": self.latents_per_sample,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.epochs < 0 or self.steps_prior < 0 or self.steps_posterior < 0:
            raise ValueError("epochs and Langevin step counts must be >= 0")
        if self.prior_mode not in ("ebm", "gaussian"):
            raise ValueError(f"unknown prior_mode {self.prior_mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    def prior_langevin(self, seed: int | None = None, stream: str = "prior-langevin") -> LangevinConfig:
        return LangevinConfig(
            steps=self.steps_prior,
            step_size=self.step_size_prior,
            seed=self.seed if seed is None else seed,
            stream=stream,
        )

    def posterior_langevin(self, seed: int | None = None, stream: str = "posterior-langevin") -> LangevinConfig:
        return LangevinConfig(
            steps=self.steps_posterior,
            step_size=self.step_size_posterior,
            seed=self.seed if seed is None else seed,
            stream=stream,
        )


@dataclass
class AdamState:
    """First/second moment buffers and the shared step counter."""

    m: dict
    v: dict
    t: int = 0


class Adam:
    """Adam with bias correction.

    With ``maximize=True`` the supplied gradients are treated as ascent
    directions (parameters move along them); otherwise standard descent.
    """

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float, maximize: bool = False):
        self.params = OrderedDict(params)
        self.lr = lr
        self.maximize = maximize
        self.state = AdamState(
            m={k: np.zeros_like(p.data) for k, p in self.params.items()},
            v={k: np.zeros_like(p.data) for k, p in self.params.items()},
        )

    def step(self, grads: dict) -> None:
        self.state.t += 1
        t = self.state.t
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = np.asarray(grads[name])
            if g.shape != p.data.shape:
                raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if not self.maximize:
                g = -g
            m = self.state.m[name]
            v = self.state.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data += self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def bundle_norm(bundle: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in bundle.values())))


def clip_bundle(bundle: dict, max_norm: float) -> tuple[dict, bool]:
    norm = bundle_norm(bundle)
    if norm <= max_norm or norm == 0.0:
        return bundle, False
    factor = max_norm / norm
    return OrderedDict((k, g * factor) for k, g in bundle.items()), True


# ---------------------------------------------------------------------------
# Monte-Carlo gradients


def ebm_gradient(prior, z_plus, z_minus) -> "OrderedDict[str, np.ndarray]":
    """Ascent gradient for the prior parameters.

    Mean energy-correction parameter gradient over prior samples minus the
    same mean over posterior samples.
    """
    z_plus = np.asarray(z_plus, dtype=T.default_dtype())
    z_minus = np.asarray(z_minus, dtype=T.default_dtype())
    if z_plus.size == 0 or z_minus.size == 0:
        raise ValueError("both sample sets must be nonempty")
    if z_plus.shape != z_minus.shape:
        raise DimensionError(
            f"sample sets must match in shape, got {z_plus.shape} vs {z_minus.shape}"
        )
    g_minus = prior.grad_u_params_mean(z_minus)
    g_plus = prior.grad_u_params_mean(z_plus)
    return OrderedDict((k, g_minus[k] - g_plus[k]) for k in g_minus)


def generator_gradient(
    gen, images, targets, z_plus, sigma_eps: float, return_mse: bool = False
):
    """Ascent gradient for the generator parameters at the posterior latents.

    Equals minus the parameter gradient of
    mean_i ||target_i - prediction_i||^2 / (2 sigma_eps^2).
    """
    images_t = Tensor(np.asarray(images, dtype=T.default_dtype()))
    targets_t = Tensor(np.asarray(targets, dtype=T.default_dtype()))
    z_t = Tensor(np.asarray(z_plus, dtype=T.default_dtype()))
    n = targets_t.shape[0]
    if z_t.shape[0] != n or images_t.shape[0] != n:
        raise DimensionError("images, targets and latents must agree in batch size")

    params = gen.parameters()
    saved = {k: p.grad for k, p in params.items()}
    for p in params.values():
        p.grad = None
    pred = gen.forward_batch(images_t, z_t) if hasattr(gen, "forward_batch") else gen(images_t, z_t)
    resid = T.sub(targets_t, pred)
    loss = T.scale(T.square_norm(resid), 0.5 / (sigma_eps**2 * n))
    T.backward(loss)
    bundle = OrderedDict(
        (k, np.zeros_like(p.data) if p.grad is None else -p.grad)
        for k, p in params.items()
    )
    for k, p in params.items():
        p.grad = saved[k]
    if return_mse:
        mse = float((resid.data**2).mean())
        return bundle, mse
    return bundle


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    mse: float
    mean_energy_prior: float
    mean_energy_posterior: float
    grad_norm_theta: float
    grad_norm_alpha: float | None
    wall_time_ms: float

    def to_dict(self) -> dict:
        out = {
            "epoch": self.epoch,
            "mse": self.mse,
            "mean_energy_prior": self.mean_energy_prior,
            "mean_energy_posterior": self.mean_energy_posterior,
        }
        if self.grad_norm_alpha is not None:
            out["grad_norm_alpha"] = self.grad_norm_alpha
        out["grad_norm_theta"] = self.grad_norm_theta
        out["wall_time_ms"] = self.wall_time_ms
        return out


def _stack_batch(batch):
    images = np.stack([np.transpose(s.image, (2, 0, 1)) for s in batch])
    targets = np.stack([np.transpose(s.mask, (2, 0, 1)) for s in batch])
    dt = T.default_dtype()
    return images.astype(dt), targets.astype(dt)


def _check_finite_record(record: EpochRecord) -> None:
    values = [record.mse, record.mean_energy_prior, record.mean_energy_posterior, record.grad_norm_theta]
    if record.grad_norm_alpha is not None:
        values.append(record.grad_norm_alpha)
    if not np.isfinite(values).all():
        raise SamplerDivergence(
            f"non-finite training statistics at epoch {record.epoch}", step=record.epoch
        )


def train(gen, prior, data, cfg: TrainConfig, callbacks=()) -> list:
    """Run the full learning loop; parameters are updated in place.

    Returns one record per epoch. Divergence in either sampler aborts with
    epoch/batch context attached.
    """
    if not data:
        raise ValueError("training data must be nonempty")
    ebm_updates = cfg.prior_mode == "ebm" and not prior.gaussian_mode
    adam_theta = Adam(gen.parameters(), cfg.lr_theta, maximize=True)
    adam_alpha = Adam(prior.parameters(), cfg.lr_alpha, maximize=True) if ebm_updates else None

    records = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = {"mse": 0.0, "e_prior": 0.0, "e_post": 0.0, "gnorm_t": 0.0, "gnorm_a": 0.0}
        n_batches = 0
        for bidx, batch in enumerate(batches(data, cfg.batch_size, cfg.seed, epoch)):
            try:
                stats = _train_step(
                    gen, prior, batch, cfg, adam_theta, adam_alpha, epoch, bidx
                )
            except SamplerDivergence as exc:
                raise SamplerDivergence(
                    f"epoch {epoch}, batch {bidx}: {exc}", step=exc.step, chain=exc.chain
                ) from exc
            for key, value in stats.items():
                sums[key] += value
            n_batches += 1
        record = EpochRecord(
            epoch=epoch,
            mse=sums["mse"] / n_batches,
            mean_energy_prior=sums["e_prior"] / n_batches,
            mean_energy_posterior=sums["e_post"] / n_batches,
            grad_norm_theta=sums["gnorm_t"] / n_batches,
            grad_norm_alpha=sums["gnorm_a"] / n_batches if ebm_updates else None,
            wall_time_ms=(time.perf_counter() - t0) * 1e3,
        )
        _check_finite_record(record)
        records.append(record)
        for callback in callbacks:
            callback(record, gen, prior)
    return records


def _train_step(gen, prior, batch, cfg, adam_theta, adam_alpha, epoch, bidx):
    images, targets = _stack_batch(batch)
    k = cfg.latents_per_sample
    if k > 1:
        images = np.repeat(images, k, axis=0)
        targets = np.repeat(targets, k, axis=0)
    count = images.shape[0]

    if cfg.prior_mode == "gaussian":
        g = rng.stream(cfg.seed, f"prior-direct/{epoch}/{bidx}")
        z_minus = cfg.sigma_z * g.standard_normal((count, cfg.latent_dim))
        z_minus = z_minus.astype(T.default_dtype())
    else:
        z_minus = sample_prior(
            prior, cfg.prior_langevin(stream=f"prior/{epoch}/{bidx}"), count
        )
    z_plus = sample_posterior(
        prior,
        gen,
        images,
        targets,
        cfg.sigma_eps,
        cfg.posterior_langevin(stream=f"posterior/{epoch}/{bidx}"),
    )

    gnorm_a = 0.0
    if adam_alpha is not None:
        bundle_a = ebm_gradient(prior, z_plus, z_minus)
        if cfg.grad_clip is not None:
            bundle_a, clipped = clip_bundle(bundle_a, cfg.grad_clip)
            if clipped:
                log.warning("epoch %d batch %d: clipped prior gradient", epoch, bidx)
        gnorm_a = bundle_norm(bundle_a)
        adam_alpha.step(bundle_a)

    bundle_t, mse = generator_gradient(gen, images, targets, z_plus, cfg.sigma_eps, return_mse=True)
    if cfg.grad_clip is not None:
        bundle_t, clipped = clip_bundle(bundle_t, cfg.grad_clip)
        if clipped:
            log.warning("epoch %d batch %d: clipped generator gradient", epoch, bidx)
    gnorm_t = bundle_norm(bundle_t)
    adam_theta.step(bundle_t)

    with T.no_grad():
        e_prior = float(prior.energy(Tensor(z_minus)).data.mean())
        e_post = float(prior.energy(Tensor(z_plus)).data.mean())
    return {"mse": mse, "e_prior": e_prior, "e_post": e_post, "gnorm_t": gnorm_t, "gnorm_a": gnorm_a}


# ---------------------------------------------------------------------------
# convergence diagnostics


@dataclass
class ResidualDiagnostics:
    """Monte-Carlo estimates of the stationarity conditions at the current
    parameters, with standard errors of the estimate norms."""

    alpha_norm: float | None
    alpha_se: float | None
    theta_norm: float
    theta_se: float
    mc_samples: int

    def to_dict(self) -> dict:
        return {
            "alpha_residual_norm": self.alpha_norm,
            "alpha_residual_se": self.alpha_se,
            "theta_residual_norm": self.theta_norm,
            "theta_residual_se": self.theta_se,
            "mc_samples": self.mc_samples,
        }


class _MeanVar:
    """Streaming per-coordinate mean and variance over replicates."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def add(self, vec: np.ndarray) -> None:
        self.n += 1
        if self.mean is None:
            self.mean = vec.copy()
            self.m2 = np.zeros_like(vec)
            return
        delta = vec - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (vec - self.mean)

    def norm_and_se(self) -> tuple[float, float]:
        var = self.m2 / max(self.n - 1, 1)
        return float(np.linalg.norm(self.mean)), float(np.sqrt(var.sum() / self.n))


def _flatten(bundle: dict) -> np.ndarray:
    return np.concatenate([np.asarray(g).ravel() for g in bundle.values()])


def estimating_equation_residuals(
    gen, prior, data, cfg: TrainConfig, mc_samples: int = 100, seed: int | None = None
) -> ResidualDiagnostics:
    """Estimate how far the current parameters are from the fixed point of
    the learning updates, using the same short-run samplers as training.

    Each replicate resamples the latent codes for the whole dataset and
    evaluates both ascent gradients; the residual is the replicate mean and
    the standard error follows from the replicate variance.
    """
    if not data:
        raise ValueError("diagnostics need a nonempty dataset")
    seed = cfg.seed if seed is None else seed
    images, targets = _stack_batch(data)
    n = images.shape[0]
    ebm_active = cfg.prior_mode == "ebm" and not prior.gaussian_mode

    acc_alpha = _MeanVar() if ebm_active else None
    acc_theta = _MeanVar()
    for s in range(mc_samples):
        z_plus = sample_posterior(
            prior,
            gen,
            images,
            targets,
            cfg.sigma_eps,
            cfg.posterior_langevin(seed=seed, stream=f"diagnose-posterior/{s}"),
        )
        if ebm_active:
            z_minus = sample_prior(
                prior, cfg.prior_langevin(seed=seed, stream=f"diagnose-prior/{s}"), n
            )
            acc_alpha.add(_flatten(ebm_gradient(prior, z_plus, z_minus)))
        acc_theta.add(_flatten(generator_gradient(gen, images, targets, z_plus, cfg.sigma_eps)))

    theta_norm, theta_se = acc_theta.norm_and_se()
    if ebm_active:
        alpha_norm, alpha_se = acc_alpha.norm_and_se()
    else:
        alpha_norm = alpha_se = None
    return ResidualDiagnostics(alpha_norm, alpha_se, theta_norm, theta_se, mc_samples)
