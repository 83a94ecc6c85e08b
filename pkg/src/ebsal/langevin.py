"""Short-run unadjusted Langevin samplers for the latent code.

Both samplers initialize every chain from the Gaussian reference
N(0, sigma_z^2 I) and run a small fixed number of steps

    z <- z - step_size * grad + sqrt(2 * step_size) * noise,   noise ~ N(0, I)

with no Metropolis correction. The prior sampler follows the gradient of the
prior energy; the posterior sampler follows the gradient of the joint
negative log-density energy(z) + ||target - prediction(z)||^2 / (2 sigma_eps^2),
obtained by reverse-mode differentiation.

Each chain owns a counter-based noise stream keyed by (seed, stream label,
chain index), so a batch of chains can be reproduced chain-by-chain and
executed in any interleaving without changing results.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .tensor import NonFiniteError, Tensor

# chains whose norm exceeds DIVERGENCE_FACTOR * sigma_z * sqrt(d) abort the run
DIVERGENCE_FACTOR = 1e3

# cap on elements of pre-drawn noise held in memory at once
_BLOCK_ELEMENTS = 4_000_000


class SamplerDivergence(RuntimeError):
    """A Langevin chain produced a non-finite or runaway state."""

    def __init__(self, message: str, step: int, chain: int | None = None):
        detail = f"step {step}" if chain is None else f"step {step}, chain {chain}"
        super().__init__(f"{message} ({detail})")
        self.step = step
        self.chain = chain


@dataclass
class LangevinConfig:
    """Sampler settings; separate instances serve the prior and the posterior."""

    steps: int = 5
    step_size: float = 0.1
    seed: int = 0
    stream: str = "langevin"
    deterministic_noise: np.ndarray | None = None  # [steps, d], tests only
    initial_value: np.ndarray | None = None  # overrides the N(0, sigma_z^2) init

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ValueError("step_size must be positive when steps > 0")


def langevin_step(z: np.ndarray, grad: np.ndarray, step_size: float, noise: np.ndarray) -> np.ndarray:
    """One unadjusted Langevin update: z - step_size*grad + sqrt(2*step_size)*noise."""
    if not np.isfinite(grad).all():
        raise SamplerDivergence("non-finite drift gradient", step=0)
    return z - step_size * grad + np.sqrt(2.0 * step_size) * noise


def _chain_draws(cfg: LangevinConfig, count: int, dim: int, start_index: int):
    """Initial values and per-step noise for chains [start, start+count)."""
    dt = T.default_dtype()
    z0 = np.empty((count, dim), dtype=dt)
    noise = np.empty((count, cfg.steps, dim), dtype=dt)
    for i in range(count):
        g = rng.stream(cfg.seed, cfg.stream, start_index + i)
        vals = g.standard_normal((cfg.steps + 1) * dim)
        z0[i] = vals[:dim]
        noise[i] = vals[dim:].reshape(cfg.steps, dim)
    if cfg.deterministic_noise is not None:
        fixed = np.asarray(cfg.deterministic_noise, dtype=dt)
        if fixed.shape != (cfg.steps, dim):
            raise ValueError(f"deterministic_noise must have shape ({cfg.steps}, {dim})")
        noise = np.broadcast_to(fixed, (count, cfg.steps, dim)).copy()
    return z0, noise


def _apply_initial(cfg: LangevinConfig, z0: np.ndarray, sigma_z: float, offset: int) -> np.ndarray:
    if cfg.initial_value is None:
        return sigma_z * z0
    init = np.asarray(cfg.initial_value, dtype=z0.dtype)
    if init.ndim == 1:
        return np.broadcast_to(init, z0.shape).copy()
    return init[offset : offset + z0.shape[0]].copy()


def _run_chains(z: np.ndarray, noise: np.ndarray, grad_fn, step_size: float, guard: float) -> np.ndarray:
    steps = noise.shape[1]
    root_two_delta = np.sqrt(2.0 * step_size)
    for t in range(steps):
        try:
            g = grad_fn(z)
        except NonFiniteError:
            raise SamplerDivergence("non-finite drift gradient", step=t) from None
        if not np.isfinite(g).all():
            bad = int(np.argwhere(~np.isfinite(g).all(axis=1))[0, 0])
            raise SamplerDivergence("non-finite drift gradient", step=t, chain=bad)
        z = z - step_size * g + root_two_delta * noise[:, t]
        norms = np.linalg.norm(z, axis=1)
        if (norms > guard).any():
            bad = int(np.argmax(norms > guard))
            raise SamplerDivergence("latent chain diverged beyond guard radius", step=t, chain=bad)
    return z


def sample_prior(prior, cfg: LangevinConfig, count: int, start_index: int = 0) -> np.ndarray:
    """Draw ``count`` latent vectors from the prior by short-run Langevin.

    Returns an array [count, d]; chain i consumes the stream keyed by
    (cfg.seed, cfg.stream, start_index + i).
    """
    d = prior.latent_dim
    out = np.empty((count, d), dtype=T.default_dtype())
    if count == 0:
        return out
    guard = DIVERGENCE_FACTOR * prior.sigma_z * np.sqrt(d)
    block = max(1, _BLOCK_ELEMENTS // ((cfg.steps + 1) * d))
    for lo in range(0, count, block):
        hi = min(lo + block, count)
        z0, noise = _chain_draws(cfg, hi - lo, d, start_index + lo)
        z = _apply_initial(cfg, z0, prior.sigma_z, lo)
        out[lo:hi] = _run_chains(z, noise, prior.grad_energy_z, cfg.step_size, guard)
    return out


def sample_posterior(
    prior,
    gen,
    images,
    targets,
    sigma_eps: float,
    cfg: LangevinConfig,
    start_index: int = 0,
) -> np.ndarray:
    """Draw one posterior latent per batch element by short-run Langevin.

    ``gen`` either exposes ``predictor(images) -> (z tensor) -> prediction
    tensor`` plus ``parameters()``, or is a plain callable ``gen(images, z)``.
    The drift is the gradient of energy(z) + ||targets - pred||^2/(2 sigma_eps^2)
    with respect to z, with all model parameters held fixed.
    """
    if sigma_eps <= 0:
        raise ValueError("sigma_eps must be positive")
    d = prior.latent_dim
    if hasattr(gen, "predictor"):
        predict = gen.predictor(images)
    else:
        predict = lambda zt: gen(images, zt)
    param_tensors = list(prior.parameters().values())
    if hasattr(gen, "parameters"):
        param_tensors += list(gen.parameters().values())

    target_t = Tensor(np.asarray(targets, dtype=T.default_dtype()))
    count = target_t.shape[0]
    inv_two_var = 0.5 / sigma_eps**2

    def drift(z: np.ndarray) -> np.ndarray:
        zt = Tensor(z, requires_grad=True)
        with T.frozen(param_tensors):
            joint = T.add(
                T.tensor_sum(prior.energy(zt)),
                T.scale(T.square_norm(T.sub(target_t, predict(zt))), inv_two_var),
            )
            T.backward(joint)
        return zt.grad

    guard = DIVERGENCE_FACTOR * prior.sigma_z * np.sqrt(d)
    z0, noise = _chain_draws(cfg, count, d, start_index)
    z = _apply_initial(cfg, z0, prior.sigma_z, 0)
    return _run_chains(z, noise, drift, cfg.step_size, guard)
