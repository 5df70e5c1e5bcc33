"""Clinical quantities and evaluation metrics.

Volumes are in ml, lengths in mm, EF/GLS/CV in percent. Landmark sets are
``(3, 2)`` arrays ordered ``(p1, p2, apex)`` in mm.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

LABELS = (0, 1, 2, 3)


class EmptyRegionError(ValueError):
    """A label is absent from one of the masks, so a distance is undefined."""


class LowConfidenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# volumes and function


def mask_volume(mask: np.ndarray, label: int, spacing) -> float:
    if label not in LABELS:
        raise ValueError(f"unknown label {label}")
    if min(spacing) <= 0:
        raise ValueError("spacing must be positive")
    return float(np.count_nonzero(mask == label) * np.prod(spacing) / 1000.0)


def ef(edv: float, esv: float) -> float:
    if edv <= 0:
        raise ValueError(f"EDV must be positive, got {edv}")
    return (edv - esv) / edv * 100.0


@dataclass
class VolumeSeries:
    lv: np.ndarray
    rv: np.ndarray
    myo: np.ndarray
    spacing: tuple[float, ...]

    @classmethod
    def from_masks(cls, masks: np.ndarray, spacing) -> "VolumeSeries":
        """``masks`` carries phases on its last axis."""
        vols = {
            name: np.array([mask_volume(masks[..., t], lab, spacing) for t in range(masks.shape[-1])])
            for name, lab in (("rv", 1), ("myo", 2), ("lv", 3))
        }
        return cls(spacing=tuple(spacing), **vols)


def ef_from_series(series: VolumeSeries, chamber: str = "lv") -> tuple[float, int, int]:
    """EF from the max (EDV) and min (ESV) volume over the cycle.

    Returns ``(ef_percent, ed_index, es_index)``; ties resolve to the first
    occurrence.
    """
    vols = np.asarray(getattr(series, chamber), dtype=float)
    if vols.size < 2:
        raise ValueError("need at least two phases")
    ed, es = int(np.argmax(vols)), int(np.argmin(vols))
    return ef(vols[ed], vols[es]), ed, es


def mapse(lms_ed: np.ndarray, lms_es: np.ndarray) -> float:
    lms_ed, lms_es = np.asarray(lms_ed, float), np.asarray(lms_es, float)
    d = np.linalg.norm(lms_ed[:2] - lms_es[:2], axis=-1)
    return float(d.mean())


def lv_length(lms: np.ndarray) -> float:
    lms = np.asarray(lms, float)
    return float(np.linalg.norm((lms[0] + lms[1]) / 2 - lms[2]))


def gls(len_ed: float, len_es: float) -> float:
    if len_ed <= 0:
        raise ValueError(f"ED length must be positive, got {len_ed}")
    return (len_ed - len_es) / len_ed * 100.0


def heatmap_to_landmarks(maps: np.ndarray, spacing) -> np.ndarray:
    """Decode ``(3, H, W)`` heatmaps to mm coordinates by per-channel argmax.

    Ties go to the lowest linear index (``np.argmax`` order). A flat channel
    raises :class:`LowConfidenceWarning` but still yields its tie-broken
    point.
    """
    maps = np.asarray(maps)
    if not np.all(np.isfinite(maps)):
        raise ValueError("heatmaps must be finite")
    out = np.zeros((maps.shape[0], 2))
    for i, m in enumerate(maps):
        if m.max() == m.min():
            warnings.warn(f"heatmap channel {i} is flat; landmark is arbitrary", LowConfidenceWarning)
        idx = np.unravel_index(int(np.argmax(m)), m.shape)
        out[i] = (np.asarray(idx) + 0.5) * np.asarray(spacing)
    return out


def landmark_error(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Euclidean distance per landmark."""
    return np.linalg.norm(np.asarray(pred, float) - np.asarray(target, float), axis=-1)


# ---------------------------------------------------------------------------
# segmentation overlap


def dice(a: np.ndarray, b: np.ndarray, label: int) -> float:
    """Dice overlap for one label; two empty masks score 1."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a, b = a == label, b == label
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def boundary(region: np.ndarray) -> np.ndarray:
    """Surface voxels: in the region with at least one 6-connected (face) neighbour outside."""
    region = region.astype(bool)
    struct = ndimage.generate_binary_structure(region.ndim, 1)
    interior = ndimage.binary_erosion(region, structure=struct, border_value=0)
    return region & ~interior


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Symmetric boundary-to-boundary nearest distances in mm."""
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        raise EmptyRegionError("surface distance undefined for an empty region")
    dt_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dt_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return np.concatenate([dt_b[ba], dt_a[bb]])


def hd95(a: np.ndarray, b: np.ndarray, label: int, spacing) -> float:
    """95th percentile (linear interpolation) of symmetric surface distances."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if len(spacing) != a.ndim:
        raise ValueError("spacing must have one entry per axis")
    ra, rb = a == label, b == label
    if not ra.any() or not rb.any():
        raise EmptyRegionError(f"label {label} is empty in one of the masks")
    return float(np.percentile(surface_distances(ra, rb, spacing), 95))


# ---------------------------------------------------------------------------
# agreement and classification


def mean_absolute_error(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, float) - np.asarray(target, float))))


def coefficient_of_variation(pairs) -> float:
    """Within-subject CV (%) of repeated measurements ``[(x1, x2), ...]``."""
    pairs = np.asarray(pairs, dtype=float).reshape(-1, 2)
    m = pairs.mean(axis=1)
    if np.any(m <= 0):
        raise ValueError("every pair mean must be positive")
    d = pairs[:, 0] - pairs[:, 1]
    return float(np.sqrt(np.mean(d**2 / (2.0 * m**2))) * 100.0)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, pred, target) -> "ConfusionCounts":
        pred, target = np.asarray(pred).astype(bool), np.asarray(target).astype(bool)
        return cls(
            tp=int(np.sum(pred & target)),
            fp=int(np.sum(pred & ~target)),
            tn=int(np.sum(~pred & ~target)),
            fn=int(np.sum(~pred & target)),
        )


def _ratio(num, den):
    return num / den if den else float("nan")


def classification_metrics(counts: ConfusionCounts, strict: bool = True) -> dict[str, float]:
    """Sensitivity, specificity, F1 and MCC.

    MCC is undefined without both target classes: ``strict`` raises, otherwise
    it is reported as NaN while sensitivity/specificity are filled in where
    defined.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    single_class = tp + fn == 0 or tn + fp == 0
    if single_class and strict:
        raise ValueError("MCC needs at least one positive and one negative target")
    denom = np.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    if single_class:
        mcc = float("nan")
    else:
        mcc = float((tp * tn - fp * fn) / denom) if denom else 0.0
    return {
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "mcc": mcc,
    }


def roc_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic with average ranks for ties."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
