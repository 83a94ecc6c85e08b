"""Stochastic prediction and pixel-wise uncertainty from a trained model.

Predictions are drawn by resampling the latent code from the (learned)
prior, running the generator once per draw, and clamping each map to
[0, 1]. The uncertainty map is the per-pixel population variance of the
clamped draws; the mean map is their per-pixel average.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .langevin import LangevinConfig, sample_prior
from .rng import stream
from .tensor import Tensor


@dataclass
class PredictionBundle:
    samples: list[np.ndarray]  # N maps [H, W, 1] in [0, 1]
    mean_map: np.ndarray  # [H, W, 1]
    uncertainty: np.ndarray  # [H, W, 1], population variance of samples

    def __post_init__(self):
        if not self.samples:
            raise ValueError("at least one sample is required")


def _image_batch(image: np.ndarray, copies: int) -> np.ndarray:
    arr = np.asarray(image, dtype=T.default_dtype())
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("expected one image shaped [H, W, 3]")
    chw = np.transpose(arr, (2, 0, 1))
    return np.broadcast_to(chw, (copies,) + chw.shape).copy()


def _forward_maps(gen, images: np.ndarray, z: np.ndarray) -> np.ndarray:
    with T.no_grad():
        out = gen.forward_batch(Tensor(images), Tensor(z))
    return np.clip(out.data[:, 0, :, :, None], 0.0, 1.0)


def predict_stochastic(
    gen,
    prior,
    image,
    n_samples: int = 10,
    cfg: LangevinConfig | None = None,
    prior_mode: str = "ebm",
    seed: int = 0,
) -> PredictionBundle:
    """Draw ``n_samples`` saliency maps by resampling the latent code.

    In ``prior_mode="gaussian"`` latents come straight from the Gaussian
    reference; otherwise they are short-run Langevin samples from the energy
    prior using ``cfg`` (training-time sampler settings by default).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if prior_mode == "gaussian" or prior.gaussian_mode:
        g = stream(seed, "predict-direct")
        z = (prior.sigma_z * g.standard_normal((n_samples, prior.latent_dim))).astype(
            T.default_dtype()
        )
    else:
        if cfg is None:
            cfg = LangevinConfig(seed=seed, stream="predict-prior")
        z = sample_prior(prior, cfg, n_samples)
    maps = _forward_maps(gen, _image_batch(image, n_samples), z)
    samples = [maps[i] for i in range(n_samples)]
    mean_map = maps.mean(axis=0)
    uncertainty = maps.var(axis=0)  # population (divide-by-N) variance
    return PredictionBundle(samples=samples, mean_map=mean_map, uncertainty=uncertainty)


def predict_point(gen, image) -> np.ndarray:
    """Deterministic convenience prediction at a zero latent code, clamped."""
    d = gen.cfg.latent_dim
    z = np.zeros((1, d), dtype=T.default_dtype())
    return _forward_maps(gen, _image_batch(image, 1), z)[0]
