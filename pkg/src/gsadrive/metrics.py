"""F1 metrics for multilabel decisions and explanations.

``f1_all`` pools true/false positives over every (sample, class) cell;
``mf1`` is the unweighted mean of per-class F1 scores.  A class with no
positives in either predictions or labels scores 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .data import Split
from .network import Model, predict_labels

EVAL_BATCH = 50


class IntegrityError(ValueError):
    """Model and data disagree on dimensions."""


def f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def _as_bits(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape or p.ndim != 2:
        raise ContractError(f"prediction shape {p.shape} does not match label shape {y.shape}")
    return p, y


def confusion(preds, labels) -> np.ndarray:
    """Per-class counts as a C x 4 array of (TP, FP, FN, TN)."""
    p, y = _as_bits(preds, labels)
    tp = ((p == 1) & (y == 1)).sum(axis=0)
    fp = ((p == 1) & (y == 0)).sum(axis=0)
    fn = ((p == 0) & (y == 1)).sum(axis=0)
    tn = ((p == 0) & (y == 0)).sum(axis=0)
    return np.stack([tp, fp, fn, tn], axis=1)


def f1_all(preds, labels) -> float:
    tp, fp, fn, _ = confusion(preds, labels).sum(axis=0)
    return f1(int(tp), int(fp), int(fn))


def mf1(preds, labels) -> tuple[float, np.ndarray]:
    per_class = np.array([f1(int(tp), int(fp), int(fn)) for tp, fp, fn, _ in confusion(preds, labels)])
    return float(per_class.mean()), per_class


@dataclass
class EvalReport:
    decision_mF1: float
    decision_F1all: float
    explanation_mF1: float
    explanation_F1all: float
    per_class_decision_F1: list[float]
    per_class_explanation_F1: list[float]
    n_samples: int

    @classmethod
    def from_predictions(cls, action_pred, action_true, expl_pred, expl_true) -> EvalReport:
        d_m, d_per = mf1(action_pred, action_true)
        e_m, e_per = mf1(expl_pred, expl_true)
        return cls(
            d_m,
            f1_all(action_pred, action_true),
            e_m,
            f1_all(expl_pred, expl_true),
            [float(v) for v in d_per],
            [float(v) for v in e_per],
            int(np.asarray(action_true).shape[0]),
        )

    def to_dict(self) -> dict:
        return {
            "decision_mF1": self.decision_mF1,
            "decision_F1all": self.decision_F1all,
            "explanation_mF1": self.explanation_mF1,
            "explanation_F1all": self.explanation_F1all,
            "per_class_decision_F1": self.per_class_decision_F1,
            "per_class_explanation_F1": self.per_class_explanation_F1,
            "n_samples": self.n_samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary(self) -> str:
        return (
            f"decision mF1={self.decision_mF1:.4f} F1all={self.decision_F1all:.4f}  "
            f"explanation mF1={self.explanation_mF1:.4f} F1all={self.explanation_F1all:.4f}  "
            f"(n={self.n_samples})"
        )


def predict_split(model: Model, split: Split, threshold: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Binarized (actions, explanations) predictions for every sample."""
    threshold = model.cfg.threshold if threshold is None else threshold
    acts, expls = [], []
    for start in range(0, len(split), EVAL_BATCH):
        index = range(start, min(start + EVAL_BATCH, len(split)))
        for pred in model.predict(split.inputs(model.cfg.arch, index)):
            a, e = predict_labels(pred, threshold)
            acts.append(a)
            expls.append(e)
    return np.array(acts), np.array(expls)


def evaluate(model: Model, split: Split, threshold: float | None = None) -> EvalReport:
    check_compatible(model, split)
    acts, expls = predict_split(model, split, threshold)
    return EvalReport.from_predictions(acts, split.actions, expls, split.explanations)


def check_compatible(model: Model, split: Split) -> None:
    cfg = model.cfg
    s, f = split.features.shape[1:]
    problems = []
    if f != cfg.feat:
        problems.append(f"feat: model {cfg.feat} vs data {f}")
    if cfg.arch in ("gsa", "gna") and s != cfg.seq_len:
        problems.append(f"seq_len: model {cfg.seq_len} vs data {s}")
    if problems:
        raise IntegrityError("checkpoint/dataset mismatch: " + "; ".join(problems))
