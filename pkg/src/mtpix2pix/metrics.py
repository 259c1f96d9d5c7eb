"""Segmentation overlap scores, RMSE, windowed SSIM, box-plot statistics, t-tests.

FPR here is normalized by the ground-truth area (TP + FN), not by the negatives,
so it can exceed 1.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .errors import ConfigError, ShapeError

SSIM_WINDOW = 8
DYNAMIC_RANGE = 255.0
STRUCTURES = (1, 2, 3)


@dataclass(frozen=True)
class ConfusionAreas:
    tp: int
    fp: int
    fn: int

    @property
    def gt_area(self) -> int:
        return self.tp + self.fn

    @property
    def pm_area(self) -> int:
        return self.tp + self.fp


def confusion_areas(pm, gt, structure: int) -> ConfusionAreas:
    pm, gt = np.asarray(pm), np.asarray(gt)
    if pm.shape != gt.shape:
        raise ShapeError(f"prediction {pm.shape} vs ground truth {gt.shape}")
    p, g = pm == structure, gt == structure
    return ConfusionAreas(int(np.count_nonzero(p & g)), int(np.count_nonzero(p & ~g)),
                          int(np.count_nonzero(~p & g)))


def dice(a: ConfusionAreas) -> float:
    denom = 2 * a.tp + a.fp + a.fn
    return 1.0 if denom == 0 else 2 * a.tp / denom


def jaccard(a: ConfusionAreas) -> float:
    denom = a.tp + a.fp + a.fn
    return 1.0 if denom == 0 else a.tp / denom


def fnr(a: ConfusionAreas) -> float:
    return 0.0 if a.gt_area == 0 else a.fn / a.gt_area


def fpr(a: ConfusionAreas) -> float:
    """FP / (TP + FN); NaN when the ground truth is empty."""
    return math.nan if a.gt_area == 0 else a.fp / a.gt_area


def segmentation_scores(pm, gt, structures=STRUCTURES) -> dict[int, dict[str, float]]:
    out = {}
    for c in structures:
        a = confusion_areas(pm, gt, c)
        out[c] = {"dice": dice(a), "jaccard": jaccard(a), "fnr": fnr(a), "fpr": fpr(a)}
    return out


def _gray(x, name) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[-1] in (1, 3):
        x = x.mean(axis=-1)
    if x.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D grayscale image, got shape {x.shape}")
    return x


def rmse(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"{x.shape} vs {y.shape}")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def ssim_map(x, y, window: int = SSIM_WINDOW, L: float = DYNAMIC_RANGE) -> np.ndarray:
    """SSIM of every ``window`` x ``window`` patch at stride 1 (unweighted statistics)."""
    x, y = _gray(x, "x"), _gray(y, "y")
    if x.shape != y.shape:
        raise ShapeError(f"{x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ConfigError(f"images must be at least {window}x{window}")
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    wx = sliding_window_view(x, (window, window))
    wy = sliding_window_view(y, (window, window))
    mx, my = wx.mean(axis=(-2, -1)), wy.mean(axis=(-2, -1))
    # centered moments avoid the cancellation of E[x^2] - E[x]^2
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cov = (dx * dy).mean(axis=(-2, -1))
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def mssim(x, y, window: int = SSIM_WINDOW, L: float = DYNAMIC_RANGE) -> float:
    return float(ssim_map(x, y, window, L).mean())


@dataclass
class SummaryStats:
    mean: float
    std: float
    median: float
    q25: float
    q75: float
    whisker_low: float
    whisker_high: float
    outliers: list[float] = field(default_factory=list)
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SummaryStats":
        return cls(**d)


def summary_stats(values) -> SummaryStats:
    """Mean/std plus box-plot quantities; whiskers stop at the last point inside 1.5 IQR."""
    v = np.sort(np.asarray([x for x in values if not _isnan(x)], dtype=np.float64))
    if v.size == 0:
        raise ConfigError("summary_stats needs at least one value")
    q25, med, q75 = np.percentile(v, [25, 50, 75])
    iqr = q75 - q25
    lo, hi = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    inside = v[(v >= lo) & (v <= hi)]
    return SummaryStats(
        mean=float(v.mean()),
        std=float(v.std(ddof=1)) if v.size > 1 else 0.0,
        median=float(med), q25=float(q25), q75=float(q75),
        whisker_low=float(inside.min()), whisker_high=float(inside.max()),
        outliers=[float(x) for x in v[(v < lo) | (v > hi)]],
        n=int(v.size),
    )


def _isnan(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired Student's t-test on ``a - b``.

    Zero-variance differences give ``p = 1`` when the mean difference is 0 and
    ``p = 0`` otherwise (t is then +-inf or nan).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"paired samples must be equal-length vectors: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ConfigError("paired t-test needs n >= 2")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return math.nan, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2 * stats.t.sf(abs(t), df=n - 1)
    return float(t), float(p)


def ttest_ind(a, b) -> tuple[float, float]:
    """Two-sided two-sample Student's t-test with pooled variance."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ConfigError("two-sample t-test needs at least 2 values per group")
    pooled = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    diff = a.mean() - b.mean()
    if pooled == 0:
        return (math.nan, 1.0) if diff == 0 else (math.copysign(math.inf, diff), 0.0)
    t = diff / math.sqrt(pooled * (1 / na + 1 / nb))
    return float(t), float(2 * stats.t.sf(abs(t), df=na + nb - 2))
