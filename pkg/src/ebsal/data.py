"""Synthetic image/mask pairs, file I/O, resizing, and batching.

The synthetic generator draws 1-3 colored shapes (ellipses, convex polygons,
rectangles) over flat, noisy, or striped backgrounds and records the union of
the shapes as the mask. Mask coverage is rejection-sampled into [0.05, 0.6].
A nonzero ``boundary_softness`` Gaussian-blurs the mask edge, modeling
annotation ambiguity; the image itself stays crisp.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from skimage.draw import ellipse as draw_ellipse
from skimage.draw import polygon as draw_polygon

from . import rng
from . import tensor as T

COVERAGE_BOUNDS = (0.05, 0.6)
_REJECTION_LIMIT = 100

BACKGROUNDS = ("flat", "gaussian-noise", "stripes")
SHAPES = ("ellipse", "polygon", "rectangle")


class DataError(RuntimeError):
    pass


class GenerationError(DataError):
    """Coverage constraints could not be met within the rejection budget."""


@dataclass
class SynthConfig:
    count: int = 200
    size: tuple[int, int] = (64, 64)
    shapes: tuple[str, ...] = SHAPES
    max_shapes: int = 3
    background: str = "gaussian-noise"
    boundary_softness: float = 0.0
    contrast: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"background must be one of {BACKGROUNDS}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if not 1 <= self.max_shapes <= 3:
            raise ValueError("max_shapes must be in 1..3")
        if self.boundary_softness < 0:
            raise ValueError("boundary_softness must be >= 0")
        if not 0 < self.contrast <= 1:
            raise ValueError("contrast must be in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "size": list(self.size),
            "shapes": list(self.shapes),
            "max_shapes": self.max_shapes,
            "background": self.background,
            "boundary_softness": self.boundary_softness,
            "contrast": self.contrast,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["size"] = tuple(d["size"])
        d["shapes"] = tuple(d["shapes"])
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # [H, W, 3] in [0, 1]
    mask: np.ndarray  # [H, W, 1] in [0, 1]
    meta: dict = field(default_factory=dict)


def _background(kind: str, size, g: np.random.Generator) -> np.ndarray:
    h, w = size
    base = g.uniform(0.15, 0.85, size=3)
    if kind == "flat":
        return np.broadcast_to(base, (h, w, 3)).copy()
    if kind == "gaussian-noise":
        img = base + g.normal(0.0, 0.08, size=(h, w, 3))
        return np.clip(img, 0.0, 1.0)
    # stripes: two colors alternating along a random axis
    second = np.clip(base + g.uniform(-0.3, 0.3, size=3), 0.0, 1.0)
    period = int(g.integers(4, 13))
    axis = g.integers(0, 2)
    coords = np.arange(h)[:, None] if axis == 0 else np.arange(w)[None, :]
    bands = ((coords // period) % 2).astype(float)
    img = np.empty((h, w, 3))
    for c in range(3):
        img[:, :, c] = base[c] * (1 - bands) + second[c] * bands
    return img


def _draw_shape(kind: str, size, g: np.random.Generator) -> np.ndarray:
    h, w = size
    mask = np.zeros((h, w), dtype=bool)
    cy = g.uniform(0.25, 0.75) * h
    cx = g.uniform(0.25, 0.75) * w
    if kind == "ellipse":
        ry = g.uniform(0.08, 0.35) * h
        rx = g.uniform(0.08, 0.35) * w
        rot = g.uniform(0, np.pi)
        rr, cc = draw_ellipse(cy, cx, ry, rx, shape=(h, w), rotation=rot)
        mask[rr, cc] = True
    elif kind == "rectangle":
        hh = g.uniform(0.1, 0.5) * h / 2
        hw = g.uniform(0.1, 0.5) * w / 2
        r0, r1 = int(max(0, cy - hh)), int(min(h, cy + hh))
        c0, c1 = int(max(0, cx - hw)), int(min(w, cx + hw))
        mask[r0:r1, c0:c1] = True
    else:  # convex-ish polygon: jittered radial vertices
        k = int(g.integers(5, 9))
        angles = np.sort(g.uniform(0, 2 * np.pi, size=k))
        radius = g.uniform(0.1, 0.35) * min(h, w)
        radii = radius * g.uniform(0.6, 1.0, size=k)
        rr, cc = draw_polygon(
            cy + radii * np.sin(angles), cx + radii * np.cos(angles), shape=(h, w)
        )
        mask[rr, cc] = True
    return mask


def _render_sample(cfg: SynthConfig, g: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    lo, hi = COVERAGE_BOUNDS
    h, w = cfg.size
    for _ in range(_REJECTION_LIMIT):
        image = _background(cfg.background, cfg.size, g)
        base_color = image.reshape(-1, 3).mean(axis=0)
        n_shapes = int(g.integers(1, cfg.max_shapes + 1))
        mask = np.zeros((h, w), dtype=bool)
        kinds = []
        for _ in range(n_shapes):
            kind = cfg.shapes[g.integers(0, len(cfg.shapes))]
            kinds.append(kind)
            shape_mask = _draw_shape(kind, cfg.size, g)
            direction = g.normal(size=3)
            direction /= max(np.linalg.norm(direction), 1e-9)
            color = np.clip(base_color + cfg.contrast * direction, 0.0, 1.0)
            image[shape_mask] = color
            mask |= shape_mask
        coverage = float(mask.mean())
        if lo <= coverage <= hi:
            soft = mask.astype(float)
            if cfg.boundary_softness > 0:
                soft = np.clip(gaussian_filter(soft, cfg.boundary_softness), 0.0, 1.0)
            meta = {"shapes": kinds, "background": cfg.background, "coverage": coverage}
            return image, soft[:, :, None], meta
    raise GenerationError(
        f"could not satisfy coverage {COVERAGE_BOUNDS} in {_REJECTION_LIMIT} attempts"
    )


def synth_generate(cfg: SynthConfig) -> list[Sample]:
    """Deterministic synthetic dataset; sample i uses stream (seed, 'synth', i)."""
    samples = []
    for i in range(cfg.count):
        g = rng.stream(cfg.seed, "synth", i)
        image, mask, meta = _render_sample(cfg, g)
        meta["index"] = i
        dt = T.default_dtype()
        samples.append(Sample(image.astype(dt), mask.astype(dt), meta))
    return samples


# ---------------------------------------------------------------------------
# PNG I/O


def save_gray_png(path, values: np.ndarray, bits: int = 8) -> None:
    """Write a [H, W] or [H, W, 1] array in [0, 1] as grayscale PNG.

    Quantization is round-half-up at the full bit range.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    top = (1 << bits) - 1
    quant = np.floor(np.clip(arr, 0.0, 1.0) * top + 0.5)
    if bits == 8:
        Image.fromarray(quant.astype(np.uint8), mode="L").save(path)
    elif bits == 16:
        Image.fromarray(quant.astype(np.uint16), mode="I;16").save(path)
    else:
        raise ValueError("bits must be 8 or 16")


def save_rgb_png(path, values: np.ndarray) -> None:
    quant = np.floor(np.clip(values, 0.0, 1.0) * 255 + 0.5).astype(np.uint8)
    Image.fromarray(quant, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    """PNG -> float array in [0, 1]; RGB [H, W, 3] or grayscale [H, W, 1]."""
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
                return arr[:, :, None]
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64) / 255.0
                return arr[:, :, None]
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
            return arr
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def resize_bilinear(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping."""
    src = np.asarray(values, dtype=np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    h_in, w_in = src.shape[:2]
    h_out, w_out = size
    if (h_in, w_in) == (h_out, w_out):
        out = src.copy()
        return out[:, :, 0] if squeeze else out

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        lo0 = np.clip(lo, 0, n_in - 1)
        lo1 = np.clip(lo + 1, 0, n_in - 1)
        return lo0, lo1, frac

    r0, r1, fr = axis_weights(h_in, h_out)
    c0, c1, fc = axis_weights(w_in, w_out)
    top = src[r0][:, c0] * (1 - fc)[None, :, None] + src[r0][:, c1] * fc[None, :, None]
    bot = src[r1][:, c0] * (1 - fc)[None, :, None] + src[r1][:, c1] * fc[None, :, None]
    out = top * (1 - fr)[:, None, None] + bot * fr[:, None, None]
    return out[:, :, 0] if squeeze else out


def save_dataset(root, samples: list[Sample]) -> None:
    """<root>/images/*.png, <root>/masks/*.png, plus a manifest with metadata."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, sample in enumerate(samples):
        stem = f"{i:05d}"
        save_rgb_png(root / "images" / f"{stem}.png", sample.image)
        save_gray_png(root / "masks" / f"{stem}.png", sample.mask)
        manifest.append({"stem": stem, **sample.meta})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_pairs(image_dir, mask_dir, target_size: tuple[int, int] | None = None) -> list[Sample]:
    """Load matching image/mask pairs by filename stem, optionally resized.

    Images are resized bilinearly; masks likewise, then clamped to [0, 1].
    """
    image_dir, mask_dir = Path(image_dir), Path(mask_dir)
    images = sorted(image_dir.glob("*.png"))
    masks = {p.stem: p for p in mask_dir.glob("*.png")}
    extra = set(masks) - {p.stem for p in images}
    samples = []
    for img_path in images:
        mask_path = masks.get(img_path.stem)
        if mask_path is None:
            raise DataError(f"no mask for image stem {img_path.stem!r}")
        image = load_image(img_path)
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        mask = load_image(mask_path)
        if mask.shape[2] != 1:
            mask = mask.mean(axis=2, keepdims=True)
        if target_size is not None:
            image = resize_bilinear(image, target_size)
            mask = np.clip(resize_bilinear(mask, target_size), 0.0, 1.0)
        dt = T.default_dtype()
        samples.append(
            Sample(image.astype(dt), mask.astype(dt), {"stem": img_path.stem})
        )
    if extra:
        raise DataError(f"masks without images: {sorted(extra)}")
    return samples


def batches(data, batch_size: int, seed: int, epoch: int):
    """Seeded per-epoch permutation into batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.stream(seed, "batches", epoch).permutation(len(data))
    for start in range(0, len(data), batch_size):
        yield [data[i] for i in order[start : start + batch_size]]
