"""Saliency evaluation: PR curves, adaptive-threshold F-measure, MAE and
trimap-restricted boundary F-measure.

Edge conventions: binarisation is strict (``S > theta``); precision is 1 for an
empty prediction and recall is 1 for an empty ground truth.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError

OMEGA2 = 0.3
ADAPTIVE_FACTOR = 1.5
NUM_THRESHOLDS = 256
DEFAULT_WIDTHS = (2, 4, 8, 12, 16, 20)


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def binarize(smap, theta: float) -> np.ndarray:
    return np.asarray(smap, dtype=np.float64) > theta


def confusion(pred, gt, region=None) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN), optionally counted only where ``region`` is true."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    _check_same(pred, gt, "confusion")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        _check_same(pred, region, "confusion region")
        pred, gt = pred[region], gt[region]
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size - tp - fp - fn)
    return tp, fp, fn, tn


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return p, r


def adaptive_threshold(smap, factor: float = ADAPTIVE_FACTOR) -> float:
    """``factor`` times the map mean, deliberately not clamped to 1."""
    return factor * float(np.mean(smap))


def f_measure(p: float, r: float, omega2: float = OMEGA2) -> float:
    den = omega2 * p + r
    if den == 0:
        return 0.0
    return (1.0 + omega2) * p * r / den


def mae(smap, gt) -> float:
    s = np.asarray(smap, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    _check_same(s, g, "mae")
    return float(np.mean(np.abs(s - g)))


def fmeasure_adaptive(smap, gt) -> float:
    smap = np.asarray(smap, dtype=np.float64)
    tp, fp, fn, _ = confusion(binarize(smap, adaptive_threshold(smap)), gt)
    return f_measure(*precision_recall(tp, fp, fn))


@dataclass
class PRCurve:
    precision: np.ndarray  # [256], indexed by integer threshold 0..255
    recall: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("threshold,precision,recall\n")
        for t in range(len(self.precision)):
            buf.write(f"{t},{self.precision[t]!r},{self.recall[t]!r}\n")
        return buf.getvalue()


def pr_curve(smap, gt) -> PRCurve:
    """Precision/recall at ``theta = T/255`` for ``T = 0..255``."""
    s = np.asarray(smap, dtype=np.float64)
    g = np.asarray(gt, dtype=bool)
    _check_same(s, g, "pr_curve")
    thetas = np.arange(NUM_THRESHOLDS) / 255.0
    pos = np.sort(s[g])
    neg = np.sort(s[~g])
    # count of values strictly greater than theta
    tp = pos.size - np.searchsorted(pos, thetas, side="right")
    fp = neg.size - np.searchsorted(neg, thetas, side="right")
    fn = pos.size - tp
    prec = np.array([precision_recall(int(a), int(b), int(c))[0] for a, b, c in zip(tp, fp, fn)])
    rec = np.array([precision_recall(int(a), int(b), int(c))[1] for a, b, c in zip(tp, fp, fn)])
    return PRCurve(prec, rec)


def trimap(gt, width: int) -> np.ndarray:
    """Band of pixels within Chebyshev distance ``width`` of the object boundary."""
    if width < 1:
        raise ContractError(f"trimap width must be >= 1, got {width}")
    g = np.asarray(gt, dtype=bool)
    se = np.ones((2 * width + 1, 2 * width + 1), dtype=bool)
    dil = ndimage.binary_dilation(g, structure=se, border_value=0)
    ero = ndimage.binary_erosion(g, structure=se, border_value=0)
    return dil ^ ero


def boundary_f(smap, gt, widths: Sequence[int]) -> list[tuple[int, float]]:
    """F-measure counted only inside each trimap band, at the full-map adaptive threshold."""
    if not len(widths):
        raise ContractError("boundary_f needs at least one width")
    s = np.asarray(smap, dtype=np.float64)
    g = np.asarray(gt, dtype=bool)
    pred = binarize(s, adaptive_threshold(s))
    out = []
    for w in widths:
        tp, fp, fn, _ = confusion(pred, g, region=trimap(g, w))
        out.append((int(w), f_measure(*precision_recall(tp, fp, fn))))
    return out


@dataclass
class ImageEval:
    name: str
    fmeasure: float
    mae: float
    pr: PRCurve
    boundary: list[tuple[int, float]]


@dataclass
class EvalReport:
    widths: tuple[int, ...]
    images: list[ImageEval] = field(default_factory=list)

    @property
    def mean_fmeasure(self) -> float:
        return float(np.mean([e.fmeasure for e in self.images]))

    @property
    def mean_mae(self) -> float:
        return float(np.mean([e.mae for e in self.images]))

    @property
    def mean_boundary(self) -> list[tuple[int, float]]:
        return [
            (w, float(np.mean([e.boundary[k][1] for e in self.images])))
            for k, w in enumerate(self.widths)
        ]

    @property
    def mean_pr(self) -> PRCurve:
        return PRCurve(
            np.mean([e.pr.precision for e in self.images], axis=0),
            np.mean([e.pr.recall for e in self.images], axis=0),
        )

    def to_csv(self) -> str:
        cols = ["image", "fmeasure", "mae"] + [f"boundary_f_w{w}" for w in self.widths]
        lines = [",".join(cols)]
        for e in self.images:
            vals = [e.fmeasure, e.mae] + [f for _, f in e.boundary]
            lines.append(",".join([e.name] + [repr(float(v)) for v in vals]))
        agg = [self.mean_fmeasure, self.mean_mae] + [f for _, f in self.mean_boundary]
        lines.append(",".join(["MEAN"] + [repr(float(v)) for v in agg]))
        return "\n".join(lines) + "\n"


def evaluate_image(name: str, smap, gt, widths: Sequence[int] = DEFAULT_WIDTHS) -> ImageEval:
    s = np.asarray(smap, dtype=np.float64)
    g = np.asarray(gt, dtype=bool)
    _check_same(s, g, f"evaluate {name}")
    return ImageEval(name, fmeasure_adaptive(s, g), mae(s, g), pr_curve(s, g), boundary_f(s, g, widths))


def evaluate_dataset(pred_maps, gts, widths: Sequence[int] = DEFAULT_WIDTHS, names=None) -> EvalReport:
    if len(pred_maps) != len(gts):
        raise ContractError(f"{len(pred_maps)} predictions but {len(gts)} ground-truth masks")
    if not len(gts):
        raise ContractError("evaluate_dataset needs at least one image")
    names = names or [f"{i:04d}" for i in range(len(gts))]
    report = EvalReport(tuple(int(w) for w in widths))
    for name, s, g in zip(names, pred_maps, gts):
        report.images.append(evaluate_image(name, s, g, widths))
    return report
