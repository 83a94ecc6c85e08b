"""Saliency evaluation measures and the image complexity score.

The four standard measures follow the conventional definitions used across
the salient-object-detection literature: mean absolute error, mean F-measure
over the 255 binarization thresholds with beta^2 = 0.3, the structural
measure (object + region similarity, equally weighted), and the mean
enhanced-alignment measure over the same 255 thresholds.

Ground-truth arrays may be soft near the boundary; every measure binarizes
them at 0.5 first. Predictions are expected in [0, 1]; binarization uses
``pred >= threshold``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion
from skimage.color import rgb2lab
from skimage.segmentation import slic

_EPS = 1e-12
F_BETA_SQUARED = 0.3
THRESHOLDS = np.arange(1, 256) / 255.0


class MetricsError(ValueError):
    pass


class DegenerateInputError(MetricsError):
    """The ground truth contains only one class."""


@dataclass
class MetricsReport:
    s_measure: float
    mean_f: float
    mean_e: float
    mae: float

    def to_dict(self) -> dict:
        return {
            "s_measure": self.s_measure,
            "mean_f": self.mean_f,
            "mean_e": self.mean_e,
            "mae": self.mae,
        }


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == 3 and pred.shape[2] == 1:
        pred = pred[:, :, 0]
    if gt.ndim == 3 and gt.shape[2] == 1:
        gt = gt[:, :, 0]
    if pred.shape != gt.shape:
        raise MetricsError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt >= 0.5


def mae(pred, gt) -> float:
    """Mean absolute difference between prediction and binarized ground truth."""
    pred, gtb = _check_pair(pred, gt)
    return float(np.abs(pred - gtb).mean())


def mean_f_measure(pred, gt) -> float:
    """F-measure averaged over the 255 binarization thresholds; 0/0 counts as 0."""
    pred, gtb = _check_pair(pred, gt)
    if gtb.all() or not gtb.any():
        raise DegenerateInputError("ground truth must contain both classes")
    flat = pred.ravel()
    gt_flat = gtb.ravel()
    positives = gt_flat.sum()
    binarized = flat[None, :] >= THRESHOLDS[:, None]
    tp = binarized @ gt_flat.astype(np.float64)
    predicted = binarized.sum(axis=1)
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    recall = tp / positives
    denom = F_BETA_SQUARED * precision + recall
    f = np.where(denom > 0, (1 + F_BETA_SQUARED) * precision * recall / np.maximum(denom, _EPS), 0.0)
    return float(f.mean())


# -- structural measure ----------------------------------------------------


def _object_similarity(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + _EPS))

def _region_ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 1.0
    x = pred.mean()
    y = gt.mean()
    sigma_x = ((pred - x) ** 2).sum() / (n - 1 + _EPS)
    sigma_y = ((gt - y) ** 2).sum() / (n - 1 + _EPS)
    sigma_xy = ((pred - x) * (gt - y)).sum() / (n - 1 + _EPS)
    alpha = 4.0 * x * y * sigma_xy
    beta = (x * x + y * y) * (sigma_x + sigma_y)
    if alpha != 0.0:
        return float(alpha / (beta + _EPS))
    return 1.0 if beta == 0.0 else 0.0


def s_measure(pred, gt) -> float:
    """Structural similarity of a saliency map against a binary mask:
    the even blend of object-level and region-level similarity."""
    pred, gtb = _check_pair(pred, gt)
    pred = np.clip(pred, 0.0, 1.0)
    y = gtb.mean()
    if y == 0.0:
        return float(1.0 - pred.mean())
    if y == 1.0:
        return float(pred.mean())

    # object similarity of foreground and complemented background
    o_fg = _object_similarity(pred[gtb])
    o_bg = _object_similarity(1.0 - pred[~gtb])
    s_object = y * o_fg + (1.0 - y) * o_bg

    # region similarity over the four quadrants at the mask centroid
    rows, cols = np.nonzero(gtb)
    rc = int(np.round(rows.mean()))
    cc = int(np.round(cols.mean()))
    h, w = gtb.shape
    total = h * w
    gtf = gtb.astype(np.float64)
    s_region = 0.0
    for rs, cs in ((slice(None, rc), slice(None, cc)), (slice(None, rc), slice(cc, None)),
                   (slice(rc, None), slice(None, cc)), (slice(rc, None), slice(cc, None))):
        weight = gtf[rs, cs].size / total
        if weight:
            s_region += weight * _region_ssim(pred[rs, cs], gtf[rs, cs])

    return float(max(0.5 * s_object + 0.5 * s_region, 0.0))


# -- enhanced alignment ------------------------------------------------------


def _alignment_score(fm: np.ndarray, gtb: np.ndarray) -> float:
    n = gtb.size
    if not gtb.any():
        enhanced = 1.0 - fm
    elif gtb.all():
        enhanced = fm
    else:
        d_fm = fm - fm.mean()
        d_gt = gtb.astype(np.float64) - gtb.mean()
        align = 2.0 * d_gt * d_fm / (d_gt * d_gt + d_fm * d_fm + _EPS)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.sum() / (n - 1 + _EPS))


def mean_e_measure(pred, gt) -> float:
    """Enhanced-alignment score averaged over the 255 binarization thresholds."""
    pred, gtb = _check_pair(pred, gt)
    scores = [_alignment_score((pred >= t).astype(np.float64), gtb) for t in THRESHOLDS]
    return float(np.mean(scores))


def compute_report(pred, gt) -> MetricsReport:
    return MetricsReport(
        s_measure=s_measure(pred, gt),
        mean_f=mean_f_measure(pred, gt),
        mean_e=mean_e_measure(pred, gt),
        mae=mae(pred, gt),
    )


def aggregate_reports(reports) -> MetricsReport:
    if not reports:
        raise MetricsError("nothing to aggregate")
    return MetricsReport(
        s_measure=float(np.mean([r.s_measure for r in reports])),
        mean_f=float(np.mean([r.mean_f for r in reports])),
        mean_e=float(np.mean([r.mean_e for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
    )


# -- image complexity ---------------------------------------------------------


def complexity_score(image, n_segments: int = 200) -> float:
    """Entropy-based summary of superpixel color contrast, in [0, 1].

    The image is over-segmented into Lab-space superpixels (k-means with
    spatial compactness 10, 10 iterations, orphan regions merged); each
    superpixel's contrast is its mean Lab distance to all others, min-max
    normalized over the image; the score is the mean binary entropy of the
    normalized contrasts. Constant images score 0; mid-contrast clutter
    scores high.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise MetricsError("complexity_score expects an RGB image [H, W, 3]")
    if min(image.shape[:2]) < 32:
        raise MetricsError("image too small to segment (min side 32)")
    labels = slic(
        image,
        n_segments=n_segments,
        compactness=10.0,
        max_num_iter=10,
        enforce_connectivity=True,
        start_label=0,
    )
    lab = rgb2lab(image)
    k = int(labels.max()) + 1
    if k < 2:
        return 0.0
    flat_labels = labels.ravel()
    counts = np.bincount(flat_labels, minlength=k).astype(np.float64)
    means = np.stack(
        [np.bincount(flat_labels, weights=lab[:, :, c].ravel(), minlength=k) for c in range(3)],
        axis=1,
    ) / counts[:, None]
    deltas = means[:, None, :] - means[None, :, :]
    dists = np.sqrt((deltas**2).sum(axis=2))
    contrast = dists.sum(axis=1) / (k - 1)
    spread = contrast.max() - contrast.min()
    if spread <= _EPS:
        contrast = np.zeros_like(contrast)
    else:
        contrast = (contrast - contrast.min()) / spread
    return float(_binary_entropy(contrast).mean())


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    q = p[inner]
    out[inner] = -q * np.log2(q) - (1 - q) * np.log2(1 - q)
    return out


# -- uncertainty vs. boundary --------------------------------------------------


def uncertainty_boundary_stat(uncertainty, gt, band_px: int) -> tuple[float, float]:
    """Mean uncertainty inside the mask-boundary band vs. everywhere else.

    The band is all pixels within ``band_px`` morphological steps of the
    binarized mask edge.
    """
    if band_px < 1:
        raise MetricsError("band_px must be >= 1")
    unc, gtb = _check_pair(uncertainty, gt)
    band = binary_dilation(gtb, iterations=band_px) & ~binary_erosion(
        gtb, iterations=band_px, border_value=1
    )
    if not band.any():
        raise MetricsError("boundary band is empty")
    if band.all():
        raise MetricsError("boundary band covers the whole image")
    return float(unc[band].mean()), float(unc[~band].mean())
