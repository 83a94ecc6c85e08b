"""Command-line interface: train, predict, eval, complexity, sample-prior, diagnose.

Every command is driven by one JSON run configuration (all fields
overridable from the command line) and a single seed; a fully resolved copy
of the configuration is written into the output directory so any run can be
reproduced from its artifacts alone. Reports are written as delimited text
with matplotlib figures rendered alongside (``--no-figures`` disables them).

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.
"""

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration

_SECTIONS = ("generator", "train", "synth")
_TOP_KEYS = {"seed", "threads", *_SECTIONS}


def _section_fields(name):
    import dataclasses

    from .data import SynthConfig
    from .generator import GeneratorConfig
    from .trainer import TrainConfig

    cls = {"generator": GeneratorConfig, "train": TrainConfig, "synth": SynthConfig}[name]
    return cls, {f.name for f in dataclasses.fields(cls)}


def _resolve_config(config_path, overrides):
    """File -> dict -> overrides -> validated dataclasses.

    Returns (seed, threads, GeneratorConfig, TrainConfig, SynthConfig).
    """
    raw = {"seed": 0, "threads": None, "generator": {}, "train": {}, "synth": {}}
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        unknown = set(loaded) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in loaded.items():
            if key in _SECTIONS:
                raw[key] = dict(value)
            else:
                raw[key] = value

    for path, value in overrides:
        parts = path.split(".")
        if len(parts) == 1 and parts[0] in ("seed", "threads"):
            raw[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            raw[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"cannot override {path!r}: unknown field")

    try:
        seed = int(raw["seed"])
        threads = None if raw["threads"] is None else int(raw["threads"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad seed/threads value: {exc}") from exc

    sections = {}
    for name in _SECTIONS:
        cls, fields = _section_fields(name)
        unknown = set(raw[name]) - fields
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        sections[name] = raw[name]

    from .data import SynthConfig
    from .generator import GeneratorConfig
    from .trainer import TrainConfig

    try:
        train = TrainConfig(**{**sections["train"], "seed": seed})
        gen_section = dict(sections["generator"])
        gen_section["latent_dim"] = train.latent_dim
        if "input_size" in gen_section:
            gen_section["input_size"] = tuple(gen_section["input_size"])
        generator = GeneratorConfig(**gen_section)
        synth_section = dict(sections["synth"])
        if "size" in synth_section:
            synth_section["size"] = tuple(synth_section["size"])
        if "shapes" in synth_section:
            synth_section["shapes"] = tuple(synth_section["shapes"])
        synth = SynthConfig(**{**synth_section, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return seed, threads, generator, train, synth


def _write_resolved(out_dir, seed, threads, generator, train, synth):
    import dataclasses

    resolved = {
        "seed": seed,
        "threads": threads,
        "generator": generator.to_dict(),
        "train": dataclasses.asdict(train),
        "synth": synth.to_dict(),
    }
    (Path(out_dir) / "config.json").write_text(json.dumps(resolved, indent=1))


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path.strip(), value


# ---------------------------------------------------------------------------
# commands


def _load_dataset(data_dir, target_size):
    from .data import DataError, load_pairs

    root = Path(data_dir)
    image_dir = root / "images"
    mask_dir = root / "masks"
    if not image_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{data_dir} must contain images/ and masks/ subdirectories")
    return load_pairs(image_dir, mask_dir, target_size)


def cmd_train(args):
    from . import tensor as T
    from .data import synth_generate
    from .model import build_model, save_model
    from .trainer import train

    seed, threads, gen_cfg, train_cfg, synth_cfg = _resolve_config(args.config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved(out, seed, threads, gen_cfg, train_cfg, synth_cfg)

    T.set_default_dtype(train_cfg.precision)
    if args.synth:
        if synth_cfg.size != gen_cfg.input_size:
            raise ConfigError(
                f"synth size {synth_cfg.size} must match generator input {gen_cfg.input_size}"
            )
        data = synth_generate(synth_cfg)
    else:
        if not args.data:
            raise ConfigError("provide --data DIR or --synth")
        data = _load_dataset(args.data, gen_cfg.input_size)
    if not data:
        from .data import DataError

        raise DataError("training dataset is empty")

    gen, prior = build_model(gen_cfg, train_cfg)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    def on_epoch(record, g, p):
        with log_path.open("a") as fh:
            fh.write(json.dumps(record.to_dict()) + "\n")
        if train_cfg.checkpoint_every and (record.epoch + 1) % train_cfg.checkpoint_every == 0:
            save_model(out / f"model_epoch{record.epoch + 1:04d}.ckpt", g, p, train_cfg)

    records = train(gen, prior, data, train_cfg, callbacks=[on_epoch])
    save_model(out / "model.ckpt", gen, prior, train_cfg)

    if records and not args.no_figures:
        from .figures import training_curves

        training_curves([r.to_dict() for r in records], out / "train_curves.png")
    final_mse = records[-1].mse if records else float("nan")
    print(f"trained {train_cfg.epochs} epochs on {len(data)} samples; final mse {final_mse:.5f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _iter_input_images(spec):
    from .data import DataError

    path = Path(spec)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DataError(f"no PNG files in {spec}")
        return files
    if not path.exists():
        raise DataError(f"input {spec} does not exist")
    return [path]


def cmd_predict(args):
    import numpy as np

    from . import tensor as T
    from .data import load_image, resize_bilinear, save_gray_png
    from .inference import predict_stochastic
    from .model import load_model

    gen, prior, train_cfg = load_model(args.checkpoint)
    T.set_default_dtype(train_cfg.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_size = gen.cfg.input_size

    for path in _iter_input_images(args.input):
        image = load_image(path)
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        original = image.shape[:2]
        resized = resize_bilinear(image, model_size) if original != model_size else image
        bundle = predict_stochastic(
            gen,
            prior,
            resized,
            n_samples=args.samples,
            cfg=train_cfg.prior_langevin(seed=args.seed, stream=f"predict/{path.stem}"),
            prior_mode=train_cfg.prior_mode,
            seed=args.seed,
        )

        def restore(arr):
            if original == model_size:
                return arr
            return np.clip(resize_bilinear(arr, original), 0.0, None)

        save_gray_png(out / f"{path.stem}_mean.png", np.clip(restore(bundle.mean_map), 0, 1))
        bits = 16 if args.uncertainty_16bit else 8
        save_gray_png(out / f"{path.stem}_uncertainty.png", restore(bundle.uncertainty), bits=bits)
        if args.store_samples:
            for i, sample in enumerate(bundle.samples):
                save_gray_png(out / f"{path.stem}_sample{i:02d}.png", restore(sample))
        print(f"{path.stem}: wrote mean + uncertainty ({args.samples} samples)")
    return EXIT_OK


def cmd_eval(args):
    from .data import DataError, load_image, resize_bilinear
    from .metrics import aggregate_reports, compute_report

    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    pred_files = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gt_files = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    if not gt_files:
        raise DataError(f"no ground-truth PNGs in {gt_dir}")
    for stem in sorted(set(gt_files) ^ set(pred_files)):
        raise DataError(f"unmatched filename stem: {stem!r}")

    rows = []
    reports = []
    for stem in sorted(gt_files):
        pred = load_image(pred_files[stem])
        gt = load_image(gt_files[stem])
        if pred.shape[2] != 1:
            pred = pred.mean(axis=2, keepdims=True)
        if gt.shape[2] != 1:
            gt = gt.mean(axis=2, keepdims=True)
        if pred.shape[:2] != gt.shape[:2]:
            pred = resize_bilinear(pred, gt.shape[:2]).clip(0.0, 1.0)
        report = compute_report(pred, gt)
        reports.append(report)
        rows.append({"stem": stem, **report.to_dict()})
    aggregate = aggregate_reports(reports).to_dict()

    header = ["stem", "s_measure", "mean_f", "mean_e", "mae"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join([row["stem"]] + [f"{row[k]:.6f}" for k in header[1:]]))
    lines.append(",".join(["aggregate"] + [f"{aggregate[k]:.6f}" for k in header[1:]]))
    text = "\n".join(lines) + "\n"

    print(f"{'stem':<16}{'S':>8}{'F':>8}{'E':>8}{'MAE':>8}")
    for row in rows:
        print(
            f"{row['stem']:<16}{row['s_measure']:>8.3f}{row['mean_f']:>8.3f}"
            f"{row['mean_e']:>8.3f}{row['mae']:>8.3f}"
        )
    print(
        f"{'aggregate':<16}{aggregate['s_measure']:>8.3f}{aggregate['mean_f']:>8.3f}"
        f"{aggregate['mean_e']:>8.3f}{aggregate['mae']:>8.3f}"
    )

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(text)
        if not args.no_figures:
            from .figures import eval_summary

            eval_summary(rows, aggregate, out / "eval_summary.png")
    return EXIT_OK


def cmd_complexity(args):
    import numpy as np

    from .metrics import complexity_score

    lines = ["stem,score"]
    for path in _iter_input_images(args.input):
        from .data import load_image

        image = load_image(path)
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        score = complexity_score(image)
        lines.append(f"{path.stem},{score:.6f}")
        print(f"{path.stem}\t{score:.6f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "complexity.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_sample_prior(args):
    import numpy as np

    from . import tensor as T
    from .langevin import sample_prior
    from .model import load_model
    from .tensor import Tensor

    gen, prior, train_cfg = load_model(args.checkpoint)
    T.set_default_dtype(train_cfg.precision)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    z = sample_prior(
        prior, train_cfg.prior_langevin(seed=args.seed, stream="sample-prior"), args.count
    )
    d = prior.latent_dim
    header = ",".join([f"z{i}" for i in range(d)] + ["energy"])
    lines = [header]
    if args.count:
        with T.no_grad():
            energies = prior.energy(Tensor(z)).data
        for row, e in zip(z, energies):
            lines.append(",".join(f"{v:.8g}" for v in row) + f",{e:.8g}")
        counts, edges = np.histogram(energies, bins=args.bins)
    else:
        counts, edges = np.array([], dtype=int), np.array([])
    (out / "latents.csv").write_text("\n".join(lines) + "\n")
    hist_lines = ["bin_left,bin_right,count"]
    for left, right, count in zip(edges[:-1], edges[1:], counts):
        hist_lines.append(f"{left:.8g},{right:.8g},{count}")
    (out / "energy_hist.csv").write_text("\n".join(hist_lines) + "\n")
    if args.count and not args.no_figures:
        from .figures import energy_histogram

        energy_histogram(edges, counts, out / "energy_hist.png")
    print(f"wrote {args.count} prior samples to {out}")
    return EXIT_OK


def cmd_diagnose(args):
    from . import tensor as T
    from .model import load_model
    from .trainer import estimating_equation_residuals

    gen, prior, train_cfg = load_model(args.checkpoint)
    T.set_default_dtype(train_cfg.precision)
    data = _load_dataset(args.data, gen.cfg.input_size)
    if not data:
        from .data import DataError

        raise DataError("diagnostic dataset is empty")
    diag = estimating_equation_residuals(
        gen, prior, data, train_cfg, mc_samples=args.mc_samples, seed=args.seed
    )
    payload = diag.to_dict()
    print(json.dumps(payload, indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "residuals.json").write_text(json.dumps(payload, indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_args(sub):
    sub.add_argument("--config", help="JSON run configuration file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config field, e.g. --set train.epochs=20",
    )
    sub.add_argument("--seed", type=int, help="run seed (overrides config)")
    sub.add_argument("--threads", type=int, help="BLAS thread count; 1 = deterministic path")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ebsal",
        description="generative saliency prediction with an energy-based latent prior",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("train", help="train a model on file pairs or synthetic data")
    _add_config_args(p)
    p.add_argument("--data", help="dataset root containing images/ and masks/")
    p.add_argument("--synth", action="store_true", help="train on generated synthetic data")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, help="shortcut for --set train.epochs=N")
    p.add_argument("--prior-mode", choices=["ebm", "gaussian"], help="latent prior type")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("predict", help="stochastic prediction with uncertainty maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory of PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--store-samples", action="store_true", help="write each sampled map")
    p.add_argument("--uncertainty-16bit", action="store_true", help="16-bit uncertainty PNGs")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="directory for report.csv and figure")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("complexity", help="image complexity scores")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--out", help="directory for complexity.csv")
    p.set_defaults(func=cmd_complexity)

    p = commands.add_parser("sample-prior", help="dump prior latent samples and energies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_sample_prior)

    p = commands.add_parser("diagnose", help="stationarity residuals of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root containing images/ and masks/")
    p.add_argument("--mc-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for residuals.json")
    p.set_defaults(func=cmd_diagnose)
    return parser


def _peek_threads(argv):
    for i, token in enumerate(argv):
        if token == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--threads="):
            return token.split("=", 1)[1]
    return None


def _pin_threads(n):
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(argv)
    if threads is not None:
        # must happen before numpy initializes its BLAS thread pool
        _pin_threads(threads)

    parser = build_parser()
    args = parser.parse_args(argv)

    from .checkpoint import CheckpointError
    from .data import DataError
    from .langevin import SamplerDivergence
    from .metrics import MetricsError

    try:
        if hasattr(args, "overrides"):
            if getattr(args, "seed", None) is not None:
                args.overrides = list(args.overrides) + [f"seed={args.seed}"]
            if getattr(args, "threads", None) is not None:
                args.overrides = list(args.overrides) + [f"threads={args.threads}"]
            if getattr(args, "epochs", None) is not None:
                args.overrides = list(args.overrides) + [f"train.epochs={args.epochs}"]
            if getattr(args, "prior_mode", None) is not None:
                args.overrides = list(args.overrides) + [f"train.prior_mode={args.prior_mode}"]
            args.overrides = [_parse_override(o) for o in args.overrides]
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, MetricsError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SamplerDivergence as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
