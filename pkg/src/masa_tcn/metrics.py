"""Regression and classification metrics, plus per-fold report aggregation."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class UndefinedCorrelationError(ValueError):
    """PCC requested for an input with zero variance."""


def _pair(pred, label) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(label, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: pred {p.size} vs label {y.size}")
    if p.size == 0:
        raise ValueError("metrics need at least one element")
    return p, y


def concordance(mean_p, mean_y, var_p, var_y, cov):
    """CCC from population moments.

    Written with plain arithmetic so it also works on autodiff tensors; the
    training loss calls this exact function.
    """
    return 2.0 * cov / (var_p + var_y + (mean_p - mean_y) ** 2)


def rmse(pred, label) -> float:
    p, y = _pair(pred, label)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def pcc(pred, label) -> float:
    p, y = _pair(pred, label)
    dp, dy = p - p.mean(), y - y.mean()
    sp, sy = np.sqrt(np.sum(dp * dp)), np.sqrt(np.sum(dy * dy))
    if sp == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("PCC undefined: an input has zero variance")
    return float(np.clip(np.sum(dp * dy) / (sp * sy), -1.0, 1.0))


def ccc(pred, label) -> float:
    p, y = _pair(pred, label)
    if p.size < 2:
        raise ValueError("CCC needs at least two elements")
    mp, my = p.mean(), y.mean()
    dp, dy = p - mp, y - my
    vp, vy, cov = np.mean(dp * dp), np.mean(dy * dy), np.mean(dp * dy)
    denom = vp + vy + (mp - my) ** 2
    if denom == 0.0:
        # both constant and equal
        return 1.0
    return float(concordance(mp, my, vp, vy, cov))


def accuracy(pred_classes, label_classes) -> float:
    p = np.asarray(pred_classes).ravel()
    y = np.asarray(label_classes).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: pred {p.size} vs label {y.size}")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(p == y))


def f1_binary(pred_classes, label_classes, positive_class=1) -> float:
    """Positive-class F1; 0 when precision + recall is 0."""
    p = np.asarray(pred_classes).ravel()
    y = np.asarray(label_classes).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: pred {p.size} vs label {y.size}")
    tp = int(np.sum((p == positive_class) & (y == positive_class)))
    fp = int(np.sum((p == positive_class) & (y != positive_class)))
    fn = int(np.sum((p != positive_class) & (y == positive_class)))
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    if prec + rec == 0.0:
        return 0.0
    return 2.0 * prec * rec / (prec + rec)


def regression_scores(pred, label) -> dict:
    out = {"rmse": rmse(pred, label), "pcc": None, "ccc": ccc(pred, label)}
    try:
        out["pcc"] = pcc(pred, label)
    except UndefinedCorrelationError:
        pass
    return out


def classification_scores(pred_classes, label_classes, positive_class=1) -> dict:
    return {"acc": accuracy(pred_classes, label_classes),
            "f1": f1_binary(pred_classes, label_classes, positive_class)}


CER_METRICS = ("rmse", "pcc", "ccc")
DEC_METRICS = ("acc", "f1")


@dataclass
class MetricsReport:
    task: str
    rows: list = field(default_factory=list)

    @property
    def metric_names(self) -> tuple:
        return CER_METRICS if self.task == "CER" else DEC_METRICS

    def add_row(self, unit: str, **scores) -> None:
        self.rows.append({"unit": unit, **{k: scores.get(k) for k in self.metric_names}})

    def aggregate(self) -> dict:
        """Mean and population std per metric; missing values are excluded."""
        agg = {}
        for name in self.metric_names:
            vals = [r[name] for r in self.rows if r.get(name) is not None]
            missing = len(self.rows) - len(vals)
            if missing:
                warnings.warn(f"{name}: {missing} unit(s) undefined, excluded from aggregate")
            if vals:
                agg[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
            else:
                agg[name] = {"mean": None, "std": None, "n": 0}
        return agg

    def mean(self, name: str) -> Optional[float]:
        return self.aggregate()[name]["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit", *self.metric_names])
        for r in self.rows:
            w.writerow([r["unit"], *[_fmt(r[k]) for k in self.metric_names]])
        agg = self.aggregate()
        w.writerow(["mean", *[_fmt(agg[k]["mean"]) for k in self.metric_names]])
        w.writerow(["std", *[_fmt(agg[k]["std"]) for k in self.metric_names]])
        return buf.getvalue()

    def table(self) -> str:
        """Human-readable mean±std table, one method row."""
        agg = self.aggregate()
        names = [n.upper() for n in self.metric_names]
        head = f"{'Method':<12}" + "".join(f"{n:>20}" for n in names)
        cells = []
        for k in self.metric_names:
            a = agg[k]
            cells.append("n/a" if a["mean"] is None else f"{a['mean']:.3f}±{a['std']:.3f}")
        line = f"{'MASA-TCN':<12}" + "".join(f"{c:>20}" for c in cells)
        return f"{head}\n{line}\n"

    def to_dict(self) -> dict:
        return {"task": self.task, "rows": self.rows, "aggregate": self.aggregate()}


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))
