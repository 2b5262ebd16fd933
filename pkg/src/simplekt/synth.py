"""Synthetic students under a Rasch (1PL) response model.

Student ``s`` answers question ``q`` at step ``t`` correctly with
probability ``sigmoid(theta_s + drift * t - b_q)``, where
``theta_s ~ N(0, sigma_theta^2)`` and ``b_q ~ N(0, sigma_b^2)``. Each
question is tagged with a uniformly drawn number of distinct KCs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .data import RawRow, write_canonical
from .evaluate import accuracy, auc
from .numerics import make_rng


@dataclass
class SynthConfig:
    n_students: int = 500
    n_questions: int = 300
    n_kcs: int = 40
    kcs_per_question: tuple[int, int] = (1, 2)
    sigma_theta: float = 1.0
    sigma_b: float = 1.5
    seq_len: tuple[int, int] = (30, 100)
    drift: float = 0.005
    seed: int = 42

    def validate(self) -> "SynthConfig":
        if min(self.n_students, self.n_questions, self.n_kcs) < 1:
            raise ValueError("counts must be positive")
        lo, hi = self.kcs_per_question
        if not 1 <= lo <= hi <= self.n_kcs:
            raise ValueError("kcs_per_question must satisfy 1 <= lo <= hi <= n_kcs")
        if not 1 <= self.seq_len[0] <= self.seq_len[1]:
            raise ValueError("seq_len must satisfy 1 <= lo <= hi")
        if self.sigma_theta < 0 or self.sigma_b < 0 or self.drift < 0:
            raise ValueError("sigma_theta, sigma_b and drift must be non-negative")
        return self


@dataclass
class Truth:
    theta: dict[tuple[str, int], float]
    difficulty: dict[str, float]
    question_kcs: dict[str, list[str]]

    def probability(self, student: str, step: int, question: str) -> float:
        return float(expit(self.theta[(student, step)] - self.difficulty[question]))


@dataclass
class SynthData:
    rows: list[tuple[str, str, list[str], int, int]]
    truth: Truth


def simulate(config: SynthConfig) -> SynthData:
    cfg = config.validate()
    rng_items = make_rng(cfg.seed, "synth", "items")
    difficulty = rng_items.normal(0.0, cfg.sigma_b, size=cfg.n_questions) if cfg.sigma_b > 0 else np.zeros(cfg.n_questions)
    qnames = [f"q{j}" for j in range(cfg.n_questions)]
    question_kcs = {}
    for j, q in enumerate(qnames):
        k = int(rng_items.integers(cfg.kcs_per_question[0], cfg.kcs_per_question[1] + 1))
        chosen = sorted(int(c) for c in rng_items.choice(cfg.n_kcs, size=k, replace=False))
        question_kcs[q] = [f"c{c}" for c in chosen]
    rows = []
    theta = {}
    for i in range(cfg.n_students):
        rng = make_rng(cfg.seed, "synth", "student", i)
        sid = f"s{i}"
        base = rng.normal(0.0, cfg.sigma_theta) if cfg.sigma_theta > 0 else 0.0
        length = int(rng.integers(cfg.seq_len[0], cfg.seq_len[1] + 1))
        qs = rng.integers(0, cfg.n_questions, size=length)
        u = rng.random(length)
        for t in range(length):
            th = base + cfg.drift * t
            theta[(sid, t)] = float(th)
            q = int(qs[t])
            r = int(u[t] < expit(th - difficulty[q]))
            rows.append((sid, qnames[q], question_kcs[qnames[q]], r, t))
    return SynthData(rows, Truth(theta, {q: float(b) for q, b in zip(qnames, difficulty)}, question_kcs))


def generate(config: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write ``interactions.csv``, ``truth_theta.csv`` and ``truth_difficulty.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = simulate(config)
    paths = {
        "interactions": out / "interactions.csv",
        "theta": out / "truth_theta.csv",
        "difficulty": out / "truth_difficulty.csv",
    }
    write_canonical(paths["interactions"], data.rows)
    with open(paths["theta"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "step", "theta"])
        for (sid, t), th in data.truth.theta.items():
            w.writerow([sid, t, repr(th)])
    with open(paths["difficulty"], "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["question_id", "b", "kc_ids"])
        for q, b in data.truth.difficulty.items():
            w.writerow([q, repr(b), ";".join(data.truth.question_kcs[q])])
    return paths


def load_truth(theta_path: str | Path, difficulty_path: str | Path) -> Truth:
    theta = {}
    with open(theta_path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            theta[(row["student_id"], int(row["step"]))] = float(row["theta"])
    difficulty = {}
    kcs = {}
    with open(difficulty_path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            difficulty[row["question_id"]] = float(row["b"])
            kcs[row["question_id"]] = [k for k in row.get("kc_ids", "").split(";") if k]
    return Truth(theta, difficulty, kcs)


class TruthMismatch(ValueError):
    pass


def oracle_probabilities(truth: Truth, rows: Iterable[RawRow | tuple]) -> dict[tuple[str, float], tuple[float, int]]:
    """Generative probability and observed response keyed by ``(student, order_key)``.

    ``rows`` are raw canonical rows, either ``read_raw`` tuples (with a
    leading line number) or the ``(student, question, kcs, response, order)``
    tuples produced by :func:`simulate`.
    """
    out = {}
    for row in rows:
        if len(row) == 6:
            row = row[1:]
        student, question, _, response, order = row
        step = int(float(order))
        try:
            p = truth.probability(student, step, question)
        except KeyError as exc:
            raise TruthMismatch(f"no truth entry for student {student!r} step {step} question {question!r}") from exc
        out[(student, float(order))] = (p, int(response))
    return out


def oracle_metrics(truth: Truth, rows, positions: Sequence[tuple[str, float]] | None = None) -> dict:
    """AUC/accuracy of ``sigmoid(theta - b)`` on the same positions a model is scored on.

    ``positions`` lists ``(student_id, order_key)`` pairs (for instance from a
    question-level :class:`~simplekt.evaluate.PredictionSet`); all rows are
    scored when it is omitted.
    """
    table = oracle_probabilities(truth, rows)
    keys = list(table) if positions is None else [(str(s), float(o)) for s, o in positions]
    missing = [k for k in keys if k not in table]
    if missing:
        raise TruthMismatch(f"{len(missing)} scored positions have no interaction row, e.g. {missing[0]}")
    probs = np.array([table[k][0] for k in keys])
    labels = np.array([table[k][1] for k in keys])
    return {"auc": auc(probs, labels), "accuracy": accuracy(probs, labels), "n_predictions": len(keys)}
