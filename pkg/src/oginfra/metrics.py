"""Binary classification metrics: BCE loss, accuracy, F1 and AUROC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from oginfra.errors import InputError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _check_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.size != labels.size:
        raise InputError(f"{scores.size} scores but {labels.size} labels")
    if scores.size == 0:
        raise InputError("metrics need at least one sample")
    if not np.all((labels == 0) | (labels == 1)):
        raise InputError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionMatrix:
    """Counts with ``score >= threshold`` predicted positive (ties go positive)."""
    scores, labels = _check_labels(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    return (cm.tp + cm.tn) / cm.total


def f1(cm: ConfusionMatrix) -> float | None:
    """F1 score; 0.0 when there are errors but no true positives, None when undefined."""
    if cm.tp == 0:
        return None if cm.fp == 0 and cm.fn == 0 else 0.0
    precision = cm.tp / (cm.tp + cm.fp)
    recall = cm.tp / (cm.tp + cm.fn)
    return 2 * precision * recall / (precision + recall)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate P(pos > neg) + P(tie) / 2 using mid-ranks."""
    scores, labels = _check_labels(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUROC is undefined unless both classes are present")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # mid-rank for each run of tied scores (1-based ranks)
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + e + 1) / 2.0
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bce(scores: Sequence[float], labels: Sequence[int]) -> float:
    scores, labels = _check_labels(scores, labels)
    p = np.clip(scores, PROB_EPS, 1 - PROB_EPS)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p)))


def relative_inference_time(per_image_ms: float, cuda_cores: int) -> float:
    """Per-image latency normalized by the GPU's CUDA core count."""
    if cuda_cores <= 0:
        raise InputError(f"cuda_cores must be positive, got {cuda_cores}")
    return per_image_ms / cuda_cores


@dataclass(frozen=True)
class EvalReport:
    loss: float
    accuracy: float
    auroc: float | None
    f1: float | None
    threshold: float
    confusion: ConfusionMatrix

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def render_table(self, name: str = "model") -> str:
        def fmt(v):
            return "n/a" if v is None else f"{v:.4f}"

        header = f"{'Model':<12}{'Loss':>10}{'Accuracy':>10}{'AUROC':>10}{'F1 Score':>10}"
        row = f"{name:<12}{fmt(self.loss):>10}{fmt(self.accuracy):>10}{fmt(self.auroc):>10}{fmt(self.f1):>10}"
        return header + "\n" + row + "\n"


def evaluate(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> EvalReport:
    """Full metric battery. AUROC is None when only one class is present."""
    cm = confusion(scores, labels, threshold)
    try:
        area = auroc(scores, labels)
    except InputError:
        area = None
    return EvalReport(bce(scores, labels), accuracy(cm), area, f1(cm), threshold, cm)
