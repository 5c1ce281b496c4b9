"""Per-label classification metrics, ROC analysis and tumour-stroma ratio."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import LABELS


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given input."""


class MetricWarning(UserWarning):
    pass


def binarize(scores, threshold=0.5):
    """Independent per-label decision with the ``score >= threshold`` rule."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be probabilities in [0, 1]")
    return (scores >= threshold).astype(np.int64)


# --------------------------------------------------------------- confusion


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def n(self):
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def to_dict(self, labels=LABELS):
        return {
            label: {"tp": int(self.tp[i]), "fp": int(self.fp[i]), "fn": int(self.fn[i]), "tn": int(self.tn[i])}
            for i, label in enumerate(labels)
        }


def _safe_div(num, den, what, flags):
    if den == 0:
        flags.append(what)
        return 0.0
    return num / den


def per_label_metrics(pred, truth, labels=LABELS):
    """Binary precision / recall / F1 / accuracy for each label column.

    Zero denominators yield 0.0 and add an entry to ``warnings`` in the
    returned dict (and emit a :class:`MetricWarning`).
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"pred {pred.shape} and truth {truth.shape} must be equal [N, K]")
    if pred.shape[0] < 1:
        raise ValueError("need at least one sample")
    tp = ((pred == 1) & (truth == 1)).sum(axis=0)
    fp = ((pred == 1) & (truth == 0)).sum(axis=0)
    fn = ((pred == 0) & (truth == 1)).sum(axis=0)
    tn = ((pred == 0) & (truth == 0)).sum(axis=0)
    n = pred.shape[0]
    flags = []
    metrics = {}
    for i, label in enumerate(labels):
        p = _safe_div(tp[i], tp[i] + fp[i], f"{label}:precision", flags)
        r = _safe_div(tp[i], tp[i] + fn[i], f"{label}:recall", flags)
        f1 = _safe_div(2 * p * r, p + r, f"{label}:f1", flags)
        metrics[label] = {
            "precision": float(p),
            "recall": float(r),
            "f1": float(f1),
            "accuracy": float((tp[i] + tn[i]) / n),
        }
    if flags:
        warnings.warn(f"zero denominators reported as 0: {', '.join(flags)}", MetricWarning, stacklevel=2)
    return metrics, ConfusionCounts(tp, fp, fn, tn), flags


def subset_accuracy(pred, truth):
    """Fraction of samples whose whole label vector is exactly right."""
    return float(np.mean(np.all(np.asarray(pred) == np.asarray(truth), axis=1)))


def combination_confusion(pred, truth):
    """Counts keyed by (true combination, predicted combination) bit strings."""
    out = {}
    for p, t in zip(np.asarray(pred), np.asarray(truth)):
        key = ("".join(map(str, t)), "".join(map(str, p)))
        out[key] = out.get(key, 0) + 1
    return {f"{t}->{p}": c for (t, p), c in sorted(out.items())}


# --------------------------------------------------------------------- ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_dict(self):
        return {"fpr": self.fpr.tolist(), "tpr": self.tpr.tolist(), "auc": self.auc}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["fpr"], dtype=np.float64), np.asarray(d["tpr"], dtype=np.float64), float(d["auc"]))


def trapezoid_auc(fpr, tpr):
    fpr, tpr = np.asarray(fpr, dtype=np.float64), np.asarray(tpr, dtype=np.float64)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_curve(scores, truth):
    """ROC over every distinct score; tied scores move diagonally in one step."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have the same length")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("undefined ROC: truth contains a single class")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(t)[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return RocCurve(fpr, tpr, trapezoid_auc(fpr, tpr))


def _curve_limits(curve, grid):
    """Lower and upper TPR of a piecewise-linear ROC at each grid FPR."""
    x, y = curve.fpr, curve.tpr
    lo = np.interp(grid, x, y)
    hi = lo.copy()
    left = np.searchsorted(x, grid, side="left")
    right = np.searchsorted(x, grid, side="right") - 1
    hit = (left < x.size) & (x[np.minimum(left, x.size - 1)] == grid)
    lo[hit] = y[left[hit]]
    hi[hit] = y[right[hit]]
    return lo, hi


def average_curves(curves, grid=None):
    """Vertical average of ROC curves.

    With ``grid=None`` the union of all FPR breakpoints is used and vertical
    jumps are kept (both limits at a shared FPR), so the average is exact and
    its trapezoidal AUC equals the mean of the inputs' AUCs.
    """
    if not curves:
        raise ValueError("no curves to average")
    if grid is None:
        grid = np.unique(np.concatenate([c.fpr for c in curves]))
        lows, highs = zip(*(_curve_limits(c, grid) for c in curves))
        lo, hi = np.mean(lows, axis=0), np.mean(highs, axis=0)
        fpr = np.repeat(grid, 2)
        tpr = np.empty_like(fpr)
        tpr[0::2], tpr[1::2] = lo, hi
        keep = np.r_[True, (np.diff(fpr) != 0) | (np.diff(tpr) != 0)]
        fpr, tpr = fpr[keep], tpr[keep]
    else:
        grid = np.asarray(grid, dtype=np.float64)
        tpr = np.mean([_curve_limits(c, grid)[1] for c in curves], axis=0)
        fpr = grid
        if fpr[0] == 0.0:
            # keep the (0, 0) anchor; the upper limit at 0 is a vertical jump
            fpr, tpr = np.r_[0.0, fpr], np.r_[0.0, tpr]
    return RocCurve(fpr, tpr, trapezoid_auc(fpr, tpr))


def micro_macro_roc(scores, truth, labels=LABELS):
    """Micro ROC (all (score, truth) pairs pooled) and macro ROC (label mean).

    Labels whose truth column is single-class are left out of the macro
    average with a warning.  Returns ``(micro, macro, per_label)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth must have equal shape")
    per_label = {}
    for i, label in enumerate(labels):
        try:
            per_label[label] = roc_curve(scores[:, i], truth[:, i])
        except UndefinedMetricError:
            warnings.warn(f"label {label!r} has single-class truth; excluded from macro ROC",
                          MetricWarning, stacklevel=2)
    micro = roc_curve(scores.ravel(), truth.ravel())
    if not per_label:
        raise UndefinedMetricError("no label has a defined ROC")
    macro = average_curves(list(per_label.values()))
    return micro, macro, per_label


# --------------------------------------------------------------------- TSR


def tumor_stroma_ratio(predictions, inverse=False, labels=LABELS):
    """Stroma share ``N_stroma / (N_stroma + N_tumor)`` over a slide's tiles.

    ``predictions`` is [N, 4] multi-hot; dual-labelled tiles count towards
    both classes.  ``inverse=True`` returns the tumour share instead.
    """
    pred = np.asarray(predictions)
    stroma = int(pred[:, labels.index("interstitial_area")].sum())
    tumor = int(pred[:, labels.index("tumor")].sum())
    if stroma + tumor == 0:
        raise UndefinedMetricError("tumour-stroma ratio undefined: no stroma and no tumour tiles")
    return (tumor if inverse else stroma) / (stroma + tumor)


# ------------------------------------------------------------------ report


@dataclass
class EvalReport:
    metrics: dict
    confusion: ConfusionCounts
    roc: dict
    micro: RocCurve
    macro: RocCurve
    subset_accuracy: float
    combinations: dict = field(default_factory=dict)
    tumor_stroma_ratio: float = None
    warnings: list = field(default_factory=list)
    std: dict = None

    def to_dict(self):
        out = {
            "labels": list(LABELS),
            "metrics": self.metrics,
            "confusion": self.confusion.to_dict() if self.confusion is not None else None,
            "roc": {k: v.to_dict() for k, v in self.roc.items()},
            "micro": self.micro.to_dict(),
            "macro": self.macro.to_dict(),
            "subset_accuracy": self.subset_accuracy,
            "combinations": self.combinations,
            "tumor_stroma_ratio": self.tumor_stroma_ratio,
            "warnings": list(self.warnings),
        }
        if self.std is not None:
            out["std"] = self.std
        return out

    @classmethod
    def from_dict(cls, d):
        conf = d.get("confusion")
        if conf is not None:
            conf = ConfusionCounts(*(np.array([conf[lab][k] for lab in LABELS]) for k in ("tp", "fp", "fn", "tn")))
        return cls(
            metrics=d["metrics"],
            confusion=conf,
            roc={k: RocCurve.from_dict(v) for k, v in d["roc"].items()},
            micro=RocCurve.from_dict(d["micro"]),
            macro=RocCurve.from_dict(d["macro"]),
            subset_accuracy=d["subset_accuracy"],
            combinations=d.get("combinations", {}),
            tumor_stroma_ratio=d.get("tumor_stroma_ratio"),
            warnings=d.get("warnings", []),
            std=d.get("std"),
        )


def evaluate(scores, truth, threshold=0.5, with_tsr=True):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    pred = binarize(scores, threshold)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MetricWarning)
        metrics, confusion, _ = per_label_metrics(pred, truth)
        micro, macro, per_label = micro_macro_roc(scores, truth)
    tsr = None
    if with_tsr:
        try:
            tsr = tumor_stroma_ratio(pred)
        except UndefinedMetricError:
            tsr = None
    return EvalReport(
        metrics=metrics,
        confusion=confusion,
        roc=per_label,
        micro=micro,
        macro=macro,
        subset_accuracy=subset_accuracy(pred, truth),
        combinations=combination_confusion(pred, truth),
        tumor_stroma_ratio=tsr,
        warnings=[str(w.message) for w in caught],
    )


def aggregate_rounds(reports, grid_points=1001):
    """Mean report over rounds; population std per scalar metric in ``std``."""
    if not reports:
        raise ValueError("aggregate_rounds needs at least one report")
    label_sets = {tuple(sorted(r.metrics)) for r in reports}
    if len(label_sets) != 1:
        raise ValueError(f"reports disagree on label sets: {label_sets}")
    labels = list(reports[0].metrics)
    metrics, std = {}, {}
    for label in labels:
        metrics[label], std[label] = {}, {}
        for key in reports[0].metrics[label]:
            values = np.array([r.metrics[label][key] for r in reports])
            metrics[label][key] = float(values.mean())
            std[label][key] = float(values.std())
    subset = np.array([r.subset_accuracy for r in reports])
    std["subset_accuracy"] = float(subset.std())
    grid = np.linspace(0.0, 1.0, grid_points)
    roc = {}
    for label in reports[0].roc:
        curves = [r.roc[label] for r in reports if label in r.roc]
        roc[label] = average_curves(curves, grid)
    tsrs = [r.tumor_stroma_ratio for r in reports if r.tumor_stroma_ratio is not None]
    return EvalReport(
        metrics=metrics,
        confusion=None,
        roc=roc,
        micro=average_curves([r.micro for r in reports], grid),
        macro=average_curves([r.macro for r in reports], grid),
        subset_accuracy=float(subset.mean()),
        tumor_stroma_ratio=float(np.mean(tsrs)) if tsrs else None,
        warnings=sorted({w for r in reports for w in r.warnings}),
        std=std,
    )
