"""Segmentation metrics (DSC, HD95, hard clDice) and their aggregation and CSV emission."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .autodiff import value
from .field import ClassMask, DomainError, SimplexField, argmax_labels
from .topology import SkeletonConfig, soft_skeleton

UNDEFINED = "UNDEFINED"
COLLAPSED = "COLLAPSED"
METRICS = ("dsc", "hd95", "cldice")


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, ClassMask) else np.asarray(m, dtype=bool)


def _pair(a, b):
    A, B = _bits(a), _bits(b)
    if A.shape != B.shape:
        raise DomainError(f"mask shapes differ: {A.shape} vs {B.shape}")
    return A, B


def _spacing(a) -> float:
    return a.grid.spacing if isinstance(a, ClassMask) else 1.0


def dsc(a, b) -> float:
    """2|A n B| / (|A| + |B|); 1 when both masks are empty."""
    A, B = _pair(a, b)
    na, nb = int(A.sum()), int(B.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(A, B).sum()) / (na + nb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (the grid exterior counts as outside)."""
    m = np.pad(mask, 1, constant_values=False)
    inner = m[1:-1, :-2] & m[1:-1, 2:] & m[:-2, 1:-1] & m[2:, 1:-1]
    return mask & ~inner


def surface_distances(a, b, spacing: float = 1.0) -> np.ndarray:
    """Pooled boundary-to-boundary distances: d(x, dB) for x in dA, then d(y, dA) for y in dB."""
    A, B = _pair(a, b)
    bA, bB = boundary(A), boundary(B)
    dist_to_B = ndimage.distance_transform_edt(~bB, sampling=spacing)
    dist_to_A = ndimage.distance_transform_edt(~bA, sampling=spacing)
    return np.concatenate([dist_to_B[bA], dist_to_A[bB]])


def hd95(a, b) -> float:
    """95th percentile (linear interpolation) of pooled surface distances; NaN if either mask is empty."""
    A, B = _pair(a, b)
    if not A.any() or not B.any():
        return float("nan")
    return float(np.percentile(surface_distances(A, B, _spacing(a)), 95.0))


def hausdorff(a, b) -> float:
    A, B = _pair(a, b)
    if not A.any() or not B.any():
        return float("nan")
    return float(surface_distances(A, B, _spacing(a)).max())


def cldice_metric(a, b, cfg: SkeletonConfig = SkeletonConfig()) -> float:
    """Hard clDice similarity 2XY / (X + Y + eps); 0 when either skeleton is empty."""
    A, B = _pair(a, b)
    A, B = A.astype(np.float64), B.astype(np.float64)
    sa, sb = value(soft_skeleton(A, cfg)), value(soft_skeleton(B, cfg))
    if not sa.any() or not sb.any():
        return 0.0
    eps = cfg.epsilon
    X = float((sa * B).sum() / (sa.sum() + eps))
    Y = float((sb * A).sum() / (sb.sum() + eps))
    return 2.0 * X * Y / (X + Y + eps)


def sample_metrics(pred, target, cfg: SkeletonConfig = SkeletonConfig()) -> np.ndarray:
    """(3, K) array of DSC, HD95, clDice per class for argmax-binarized fields."""
    pv = pred.values if isinstance(pred, SimplexField) else np.asarray(pred)
    tv = target.values if isinstance(target, SimplexField) else np.asarray(target)
    if pv.shape != tv.shape:
        raise DomainError(f"prediction {pv.shape} and target {tv.shape} differ")
    lp, lt = argmax_labels(pv, 0), argmax_labels(tv, 0)
    out = np.empty((3, pv.shape[0]))
    for k in range(pv.shape[0]):
        a, b = lp == k, lt == k
        out[:, k] = dsc(a, b), hd95(a, b), cldice_metric(a, b, cfg)
    return out


@dataclass
class MetricReport:
    """Rows of per-class metrics (one row per sample or per fold); HD95 NaN means undefined."""

    labels: list
    dsc: np.ndarray      # (N, K)
    hd95: np.ndarray     # (N, K)
    cldice: np.ndarray   # (N, K)
    class_names: list = field(default_factory=list)

    def __post_init__(self):
        self.dsc = np.atleast_2d(np.asarray(self.dsc, dtype=np.float64))
        self.hd95 = np.atleast_2d(np.asarray(self.hd95, dtype=np.float64))
        self.cldice = np.atleast_2d(np.asarray(self.cldice, dtype=np.float64))
        if not (self.dsc.shape == self.hd95.shape == self.cldice.shape):
            raise DomainError("metric arrays must share one (N, K) shape")
        if len(self.labels) != self.dsc.shape[0]:
            raise DomainError("one label per row required")
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.num_classes)]

    @property
    def num_classes(self) -> int:
        return self.dsc.shape[1]

    @classmethod
    def from_samples(cls, rows, labels=None, class_names=None) -> "MetricReport":
        """Build from an iterable of (3, K) arrays as returned by ``sample_metrics``."""
        rows = np.asarray(list(rows), dtype=np.float64)
        if rows.ndim != 3 or rows.shape[0] == 0:
            raise DomainError("need at least one (3, K) sample row")
        labels = list(labels) if labels is not None else [str(i) for i in range(rows.shape[0])]
        return cls(labels, rows[:, 0], rows[:, 1], rows[:, 2], list(class_names or []))

    def metric(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def macro(self, name: str) -> np.ndarray:
        """Per-row mean over classes; undefined HD95 classes are skipped."""
        m = self.metric(name)
        with np.errstate(invalid="ignore"):
            defined = ~np.isnan(m)
            n = defined.sum(axis=1)
            return np.where(n > 0, np.where(defined, m, 0.0).sum(axis=1) / np.maximum(n, 1), np.nan)

    def summary(self) -> dict:
        """{metric: {"mean", "std", "undefined"} per class, plus "macro_*" entries} over rows."""
        out = {}
        for name in METRICS:
            m = self.metric(name)
            out[name] = _stats(m)
            out["macro_" + name] = _stats(self.macro(name)[:, None])
        return out

    def headline(self) -> dict:
        """Macro-average DSC and HD95 over classes: the numbers compared across runs."""
        s = self.summary()
        return {"dsc_mean": float(s["macro_dsc"]["mean"][0]), "dsc_std": float(s["macro_dsc"]["std"][0]),
                "hd95_mean": float(s["macro_hd95"]["mean"][0]), "hd95_std": float(s["macro_hd95"]["std"][0]),
                "hd95_undefined": int(s["macro_hd95"]["undefined"][0])}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            self.write_csv(fh)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh)
        w.writerow(["sample", "class", "dsc", "hd95", "cldice"])
        macro = {n: self.macro(n) for n in METRICS}
        for i, lab in enumerate(self.labels):
            for k, cname in enumerate(self.class_names):
                w.writerow([lab, cname] + [fmt(self.metric(n)[i, k]) for n in METRICS])
            w.writerow([lab, "macro"] + [fmt(macro[n][i]) for n in METRICS])
        s = self.summary()
        for stat in ("mean", "std", "undefined"):
            for k, cname in enumerate(self.class_names):
                w.writerow([stat, cname] + [fmt(s[n][stat][k], stat) for n in METRICS])
            w.writerow([stat, "macro"] + [fmt(s["macro_" + n][stat][0], stat) for n in METRICS])


def _stats(m: np.ndarray) -> dict:
    """Column mean and population std ignoring NaN; NaN where a column is all undefined."""
    defined = ~np.isnan(m)
    n = defined.sum(axis=0)
    filled = np.where(defined, m, 0.0)
    mean = np.where(n > 0, filled.sum(axis=0) / np.maximum(n, 1), np.nan)
    dev = np.where(defined, m - mean, 0.0)
    std = np.where(n > 0, np.sqrt((dev * dev).sum(axis=0) / np.maximum(n, 1)), np.nan)
    return {"mean": mean, "std": std, "undefined": (~defined).sum(axis=0)}


def fmt(x, stat: str = "") -> str:
    if stat == "undefined":
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return UNDEFINED
    if not np.isfinite(x):
        return COLLAPSED
    return repr(x)


def aggregate(reports, labels=None) -> MetricReport:
    """One row per input report holding its per-class means (e.g. fold means).

    Summary statistics of the result are then mean and population standard
    deviation across reports; a class whose HD95 is undefined in every row
    of a report stays undefined.
    """
    reports = list(reports)
    if not reports:
        raise DomainError("aggregate needs at least one report")
    K = reports[0].num_classes
    if any(r.num_classes != K for r in reports):
        raise DomainError("reports disagree on the number of classes")
    rows = np.stack([np.stack([_stats(r.metric(n))["mean"] for n in METRICS]) for r in reports])
    labels = list(labels) if labels is not None else [f"fold{i}" for i in range(len(reports))]
    return MetricReport.from_samples(rows, labels, reports[0].class_names)
