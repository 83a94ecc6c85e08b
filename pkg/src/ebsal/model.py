"""Building, saving, and restoring full model bundles.

A bundle is the generator plus the latent prior. On disk it is one binary
parameter checkpoint (see ``checkpoint``) with the generator and prior
configurations serialized alongside in a ``<path>.json`` sidecar, so a
checkpoint can be reopened without the original run configuration.
"""

import dataclasses
import json
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import rng
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .generator import Generator, GeneratorConfig
from .prior import EBMPrior
from .trainer import TrainConfig


def build_model(gen_cfg: GeneratorConfig, train_cfg: TrainConfig) -> tuple[Generator, EBMPrior]:
    """Freshly initialized generator and prior with seed-derived init streams."""
    if gen_cfg.latent_dim != train_cfg.latent_dim:
        raise ValueError("generator and training configs disagree on latent_dim")
    gen = Generator(gen_cfg, rng=rng.stream(train_cfg.seed, "init-generator"))
    prior = EBMPrior(
        latent_dim=train_cfg.latent_dim,
        hidden=train_cfg.ebm_hidden,
        sigma_z=train_cfg.sigma_z,
        gaussian_mode=train_cfg.prior_mode == "gaussian",
        rng=rng.stream(train_cfg.seed, "init-prior"),
    )
    return gen, prior


def _all_params(gen: Generator, prior: EBMPrior) -> "OrderedDict[str, T.Tensor]":
    # prior.parameters() includes the frozen zeros of the Gaussian mode, so a
    # reloaded checkpoint restores either mode unchanged
    params = OrderedDict(gen.parameters())
    params.update(prior.parameters())
    return params


def save_model(path, gen: Generator, prior: EBMPrior, train_cfg: TrainConfig) -> None:
    path = Path(path)
    save_checkpoint(path, _all_params(gen, prior))
    sidecar = {
        "format": 1,
        "generator": gen.cfg.to_dict(),
        "train": dataclasses.asdict(train_cfg),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def load_model(path) -> tuple[Generator, EBMPrior, TrainConfig]:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise CheckpointError(f"checkpoint {path} (or its .json sidecar) is missing")
    sidecar = json.loads(sidecar_path.read_text())
    gen_cfg = GeneratorConfig.from_dict(sidecar["generator"])
    train_dict = dict(sidecar["train"])
    train_cfg = TrainConfig(**train_dict)
    with T.using_dtype(train_cfg.precision):
        gen, prior = build_model(gen_cfg, train_cfg)
        records = load_checkpoint(path)
        params = _all_params(gen, prior)
        missing = set(params) - set(records)
        extra = set(records) - set(params)
        if missing or extra:
            raise CheckpointError(
                f"{path}: parameter names disagree with configuration "
                f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
            )
        for name, tensor in params.items():
            value = records[name]
            if value.shape != tensor.data.shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {value.shape}, expected {tensor.data.shape}"
                )
            tensor.data = value.astype(tensor.data.dtype)
    return gen, prior, train_cfg
