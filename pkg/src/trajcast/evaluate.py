"""ROC curves, AUC, and metric reports.

The ROC construction places one threshold per distinct score value, so tied
scores collapse into a single step and trapezoidal integration agrees with
the pairwise Mann-Whitney statistic exactly (ties count half).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .errors import ConfigError


@dataclass
class RocCurve:
    """Ordered operating points from threshold +inf down to the lowest score."""

    thresholds: np.ndarray  # per point; +inf for the (0, 0) anchor
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("threshold,fpr,tpr\n")
        for thr, f, t in zip(self.thresholds, self.fpr, self.tpr):
            out.write(f"{thr!r},{f!r},{t!r}\n".replace("'", ""))
        return out.getvalue()


def _check_inputs(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ConfigError("scores and labels must be 1-D arrays of equal length")
    if not np.isfinite(scores).all():
        raise ConfigError("scores must be finite")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise ConfigError("both classes must be present to compute a ROC curve")
    return scores, labels.astype(np.int64)


def roc(scores, labels) -> RocCurve:
    """ROC curve with thresholds at distinct score values and trapezoidal AUC."""
    scores, labels = _check_inputs(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    # last index of each distinct score = one collapsed threshold step
    distinct = np.flatnonzero(np.diff(s_sorted) != 0)
    step_ends = np.concatenate([distinct, [scores.size - 1]])
    tp = np.cumsum(y_sorted)[step_ends]
    fp = np.cumsum(1 - y_sorted)[step_ends]
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    tpr = np.concatenate([[0.0], tp / n_pos])
    fpr = np.concatenate([[0.0], fp / n_neg])
    thresholds = np.concatenate([[np.inf], s_sorted[step_ends]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def auc_pairwise(scores, labels) -> float:
    """Mann-Whitney statistic over all (positive, negative) pairs.

    Brute-force oracle for ``roc``: a win counts 1, a tie 0.5, a loss 0.
    """
    scores, labels = _check_inputs(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum(dtype=np.float64)
    ties = (pos[:, None] == neg[None, :]).sum(dtype=np.float64)
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


@dataclass
class MetricsReport:
    """Flat name/value metric record; round-trips losslessly through CSV."""

    rows: list[tuple[str, float]]

    def to_csv(self) -> str:
        lines = ["name,value"]
        lines += [f"{name},{value!r}" for name, value in self.rows]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        lines = text.strip().split("\n")
        if lines[0] != "name,value":
            raise ConfigError("metrics CSV must start with 'name,value'")
        rows = []
        for line in lines[1:]:
            name, value = line.split(",", 1)
            rows.append((name, float(value)))
        return cls(rows)

    def get(self, name: str) -> float:
        for key, value in self.rows:
            if key == name:
                return value
        raise KeyError(name)


def report(scorer, ds: data_mod.TensorDataset) -> tuple[MetricsReport, RocCurve]:
    """Test/validation AUC plus split sizes and positive rates for a trained
    model or ensemble (anything with ``predict_scores(ds, split)``)."""
    test_idx = ds.split_indices(data_mod.TEST)
    if test_idx.size == 0:
        raise ConfigError("test split is empty")
    rows: list[tuple[str, float]] = []
    test_scores = scorer.predict_scores(ds, data_mod.TEST)
    test_curve = roc(test_scores, ds.labels[test_idx])
    rows.append(("test_auc", test_curve.auc))
    val_idx = ds.split_indices(data_mod.VAL)
    val_scores = scorer.predict_scores(ds, data_mod.VAL)
    rows.append(("val_auc", roc(val_scores, ds.labels[val_idx]).auc))
    rows.append(("positive_rate", float(ds.labels.mean())))
    for which, name in zip((data_mod.TRAIN, data_mod.VAL, data_mod.TEST),
                           data_mod.SPLIT_NAMES):
        rows.append((f"n_{name}", float(ds.split_indices(which).size)))
    return MetricsReport(rows), test_curve
