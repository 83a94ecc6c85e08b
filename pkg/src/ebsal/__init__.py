"""Generative saliency prediction with an energy-based latent prior.

A small, self-contained stack: a numpy-backed reverse-mode autodiff engine,
an MLP energy prior over a low-dimensional latent code, an encoder/decoder
saliency generator with latent injection, short-run Langevin samplers for
the prior and posterior, MCMC-based maximum-likelihood training, stochastic
prediction with pixel-wise uncertainty maps, and the standard saliency
evaluation metrics.

Heavy submodules are imported lazily so the CLI can pin BLAS thread counts
before numpy loads.
"""

_EXPORTS = {
    "Tensor": "ebsal.tensor",
    "Tape": "ebsal.tensor",
    "backward": "ebsal.tensor",
    "EBMPrior": "ebsal.prior",
    "Generator": "ebsal.generator",
    "GeneratorConfig": "ebsal.generator",
    "LangevinConfig": "ebsal.langevin",
    "sample_prior": "ebsal.langevin",
    "sample_posterior": "ebsal.langevin",
    "TrainConfig": "ebsal.trainer",
    "Adam": "ebsal.trainer",
    "train": "ebsal.trainer",
    "predict_stochastic": "ebsal.inference",
    "predict_point": "ebsal.inference",
    "PredictionBundle": "ebsal.inference",
    "MetricsReport": "ebsal.metrics",
    "SynthConfig": "ebsal.data",
    "synth_generate": "ebsal.data",
}

__version__ = "0.1.0"
__all__ = sorted(_EXPORTS)


def __getattr__(name):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'ebsal' has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(module), name)
