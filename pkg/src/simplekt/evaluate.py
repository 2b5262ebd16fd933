"""Metrics and evaluation protocols.

Predictions are made per KC-level step and then averaged over the steps of
each original interaction, so every metric is computed at question level.
"""

from __future__ import annotations

import math
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import StudentSequence, batch

MULTISTEP_RATIOS = tuple(round(0.1 * k, 1) for k in range(2, 10))


class MetricError(ValueError):
    """A metric is undefined for the given input."""


def auc(preds, labels) -> float:
    """ROC-AUC via the rank-sum statistic with averaged ranks for ties."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise MetricError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both positive and negative labels")
    ranks = rankdata(preds, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.size == 0:
        raise MetricError("accuracy of an empty prediction set")
    return float(((preds >= threshold).astype(int) == labels).mean())


@dataclass
class PredictionSet:
    prob: np.ndarray
    label: np.ndarray
    question_id: np.ndarray
    student_id: np.ndarray
    position: np.ndarray
    order_key: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = len(self.prob)
        if len(self.order_key) == 0 and n:
            self.order_key = np.zeros(n)
        for name in ("label", "question_id", "student_id", "position", "order_key"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"PredictionSet.{name} has length {len(getattr(self, name))}, expected {n}")
        if n and (np.min(self.prob) < 0 or np.max(self.prob) > 1):
            raise ValueError("probabilities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.prob)

    def metrics(self) -> dict:
        return {"auc": auc(self.prob, self.label), "accuracy": accuracy(self.prob, self.label), "n_predictions": len(self)}


def _empty() -> PredictionSet:
    z = np.zeros(0)
    return PredictionSet(z, z.astype(int), z.astype(int), np.array([], dtype=object), z.astype(int), z)


def collect_steps(model, sequences: Sequence[StudentSequence], batch_size: int = 64, ratio: float | None = None):
    """Step-level predictions for every chunk.

    With ``ratio``, each chunk of length ``T`` observes its first
    ``max(1, floor(ratio*T))`` steps and every later step is predicted from
    that prefix alone. Returns ``(PredictionSet, n_skipped_chunks)``.
    """
    items = [(seq.student_id, c) for seq in sequences for c in seq.chunks]
    parts = []
    skipped = 0
    for lo in range(0, len(items), batch_size):
        sel = items[lo : lo + batch_size]
        b = batch([c for _, c in sel], student_ids=[s for s, _ in sel])
        observed = None
        if ratio is not None:
            lengths = b.valid_mask.sum(axis=1)
            observed = np.maximum(1, np.floor(ratio * lengths + 1e-9)).astype(np.int64)
            skipped += int((observed >= lengths).sum())
        prob, mask = model.predict_proba(b, observed=observed)
        rows, cols = np.nonzero(mask)
        parts.append(
            PredictionSet(
                prob[rows, cols],
                b.responses[rows, cols],
                b.question_ids[rows, cols],
                np.array([b.student_ids[r] for r in rows], dtype=object),
                b.interaction_ids[rows, cols],
                b.order_keys[rows, cols],
            )
        )
    if not parts:
        return _empty(), skipped
    return (
        PredictionSet(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                        ("prob", "label", "question_id", "student_id", "position", "order_key"))),
        skipped,
    )


def aggregate_by_question(steps: PredictionSet) -> PredictionSet:
    """Average step probabilities belonging to one interaction."""
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i, key in enumerate(zip(steps.student_id, steps.position)):
        groups[key].append(i)
    idx = [g[0] for g in groups.values()]
    prob = np.array([steps.prob[g].mean() for g in groups.values()])
    return PredictionSet(
        prob,
        steps.label[idx],
        steps.question_id[idx],
        steps.student_id[idx],
        steps.position[idx],
        steps.order_key[idx],
    )


def evaluate_one_step(model, sequences: Sequence[StudentSequence], batch_size: int = 64):
    """Question-level predictions with full preceding history, plus metrics."""
    steps, _ = collect_steps(model, sequences, batch_size)
    preds = aggregate_by_question(steps)
    return preds, preds.metrics()


def evaluate_multistep(model, sequences, ratios: Sequence[float] = MULTISTEP_RATIOS, batch_size: int = 64) -> list[dict]:
    """Non-accumulative multi-step prediction, one record per observed ratio."""
    records = []
    for ratio in ratios:
        steps, skipped = collect_steps(model, sequences, batch_size, ratio=ratio)
        preds = aggregate_by_question(steps)
        rec = {"protocol": "multistep", "ratio": float(ratio), "n_predictions": len(preds), "skipped_chunks": skipped}
        try:
            rec.update(auc=auc(preds.prob, preds.label), accuracy=accuracy(preds.prob, preds.label))
        except MetricError:
            rec.update(auc=None, accuracy=None)
        records.append(rec)
    return records


def trace(model, student_id: str, chunk, her_map: dict[int, float], vocab=None) -> list[dict]:
    """Per-step prediction records for one chunk (the data behind a trace plot)."""
    b = batch([chunk], student_ids=[student_id])
    prob, mask = model.predict_proba(b)
    qinv = {v: k for k, v in vocab.questions.items()} if vocab is not None else None
    kinv = {v: k for k, v in vocab.kcs.items()} if vocab is not None else None
    seen_kcs: set[int] = set()
    out = []
    for p, step in enumerate(chunk):
        first = step.kc_id not in seen_kcs
        seen_kcs.add(step.kc_id)
        if not mask[0, p]:
            continue
        h = her_map.get(step.question_id)
        out.append(
            {
                "student_id": student_id,
                "position": p,
                "interaction": step.interaction,
                "question_id": qinv.get(step.question_id, "UNK") if qinv else step.question_id,
                "kc_id": kinv.get(step.kc_id, "UNK") if kinv else step.kc_id,
                "response": step.response,
                "prob": float(prob[0, p]),
                "her": h,
                "first_kc_encounter": first,
            }
        )
    return out


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population std; exact (0.0) for identical values."""
    values = [float(v) for v in values]
    return statistics.fmean(values), statistics.pstdev(values)


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f}±{std:.4f}"


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.std() == 0 or b.std() == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])
