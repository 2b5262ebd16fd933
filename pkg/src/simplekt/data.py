"""Interaction-log ingestion and preprocessing.

The canonical input is a UTF-8 CSV with header
``student_id,question_id,kc_ids,response,order_key`` where ``kc_ids`` is
``;``-joined. Either ``question_id`` or ``kc_ids`` may be empty throughout a
file (a log carrying only one of the two identifiers).

Pipeline: :func:`ingest` -> :func:`expand_kc` -> :func:`chunk_and_filter`
(or :func:`preprocess` for all three) -> :func:`split` -> :func:`batch`.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .numerics import make_rng

CANONICAL_COLUMNS = ("student_id", "question_id", "kc_ids", "response", "order_key")
MAX_LEN = 200
MIN_LEN = 3

KIND_BOTH = "both"
KIND_QUESTIONS = "questions-only"
KIND_KCS = "kcs-only"


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class InteractionRecord:
    student_id: str
    question_id: int | None
    kc_ids: tuple[int, ...]
    response: int
    order_key: float

    def __post_init__(self):
        if self.response not in (0, 1):
            raise DataError(f"response must be 0 or 1, got {self.response!r}")
        if self.question_id is None and not self.kc_ids:
            raise DataError("a record needs a question id or at least one KC")


@dataclass(frozen=True)
class ExpandedStep:
    """One KC-level step.

    ``interaction`` indexes the source record within the student's
    chronological record list; steps expanded from one record share it.
    """

    kc_id: int
    question_id: int
    response: int
    position: int
    interaction: int
    order_key: float = 0.0


@dataclass
class StudentSequence:
    student_id: str
    chunks: list[list[ExpandedStep]] = field(default_factory=list)


@dataclass
class DatasetSplit:
    test_students: list[str]
    folds: list[list[str]]

    def train_valid(self, fold: int) -> tuple[list[str], list[str]]:
        """Students for training and validation when ``fold`` is held out."""
        train = [s for i, f in enumerate(self.folds) if i != fold for s in f]
        return train, list(self.folds[fold])


def _natural_key(s: str):
    return [(0, int(tok), "") if tok.isdigit() else (1, 0, tok) for tok in re.split(r"(\d+)", s) if tok]


@dataclass
class VocabMaps:
    """Dense id maps. Index ``len(map)`` is the reserved UNK slot."""

    questions: dict[str, int]
    kcs: dict[str, int]
    kind: str = KIND_BOTH

    @classmethod
    def build(cls, question_ids: Iterable[str], kc_ids: Iterable[str], kind: str) -> "VocabMaps":
        qs = sorted(set(question_ids), key=_natural_key)
        ks = sorted(set(kc_ids), key=_natural_key)
        qmap = {q: i for i, q in enumerate(qs)}
        kmap = {k: i for i, k in enumerate(ks)}
        if kind == KIND_QUESTIONS:
            kmap = dict(qmap)
        elif kind == KIND_KCS:
            qmap = dict(kmap)
        return cls(qmap, kmap, kind)

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    @property
    def n_kcs(self) -> int:
        return len(self.kcs)

    @property
    def unk_question(self) -> int:
        return len(self.questions)

    @property
    def unk_kc(self) -> int:
        return len(self.kcs)

    def question_index(self, raw: str) -> int:
        return self.questions.get(raw, self.unk_question)

    def kc_index(self, raw: str) -> int:
        return self.kcs.get(raw, self.unk_kc)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, mapping in (("questions", self.questions), ("kcs", self.kcs)):
            with open(directory / f"vocab_{name}.tsv", "w", encoding="utf-8", newline="") as fh:
                fh.write(f"# kind={self.kind}\n")
                for raw, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
                    fh.write(f"{raw}\t{idx}\n")

    @classmethod
    def load(cls, directory: str | Path) -> "VocabMaps":
        directory = Path(directory)
        maps = []
        kind = KIND_BOTH
        for name in ("questions", "kcs"):
            path = directory / f"vocab_{name}.tsv"
            if not path.exists():
                raise DataError(f"missing vocab file {path}")
            mapping = {}
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.rstrip("\n")
                    if line.startswith("# kind="):
                        kind = line.split("=", 1)[1]
                        continue
                    raw, idx = line.split("\t")
                    mapping[raw] = int(idx)
            maps.append(mapping)
        return cls(maps[0], maps[1], kind)


@dataclass
class FormatConfig:
    delimiter: str = ","
    kc_delimiter: str = ";"
    student_col: str = "student_id"
    question_col: str = "question_id"
    kc_col: str = "kc_ids"
    response_col: str = "response"
    order_col: str = "order_key"


RawRow = tuple[int, str, str, list[str], str, str]  # line, student, question, kcs, response, order


def _parse_order(value: str, line: int) -> float:
    try:
        return float(int(value))
    except ValueError:
        try:
            v = float(value)
        except ValueError:
            raise DataError(f"line {line}: order_key {value!r} is not numeric") from None
        if not math.isfinite(v):
            raise DataError(f"line {line}: order_key {value!r} is not finite")
        return v


def _parse_response(value: str, line: int) -> int:
    value = value.strip()
    if value not in ("0", "1"):
        raise DataError(f"line {line}: response must be 0 or 1, got {value!r}")
    return int(value)


def read_raw(path: str | Path, config: FormatConfig | None = None) -> list[RawRow]:
    config = config or FormatConfig()
    rows: list[RawRow] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=config.delimiter)
        header = next(reader, None)
        if header is None:
            return rows
        header = [h.strip() for h in header]
        cols = (config.student_col, config.question_col, config.kc_col, config.response_col, config.order_col)
        missing = [c for c in cols if c not in header]
        if missing:
            raise DataError(f"line 1: header lacks columns {missing}")
        pos = [header.index(c) for c in cols]
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            student, question, kcs, response, order = (row[i].strip() for i in pos)
            if not student:
                raise DataError(f"line {line}: empty student_id")
            kc_list = [k.strip() for k in kcs.split(config.kc_delimiter) if k.strip()] if kcs else []
            if not question and not kc_list:
                raise DataError(f"line {line}: neither question_id nor kc_ids given")
            rows.append((line, student, question, kc_list, response, order))
    return rows


def records_from_raw(rows: Sequence[RawRow], vocab: VocabMaps | None = None):
    """Turn raw rows into dense records grouped per student, chronologically."""
    if vocab is None:
        has_q = any(r[2] for r in rows)
        has_k = any(r[3] for r in rows)
        kind = KIND_BOTH if (has_q and has_k) or not rows else (KIND_QUESTIONS if has_q else KIND_KCS)
        vocab = VocabMaps.build(
            (r[2] for r in rows if r[2]), (k for r in rows for k in r[3]), kind
        )
    by_student: dict[str, list[InteractionRecord]] = defaultdict(list)
    for line, student, question, kcs, response, order in rows:
        r = _parse_response(response, line)
        key = _parse_order(order, line)
        if vocab.kind == KIND_QUESTIONS:
            q = vocab.question_index(question) if question else vocab.unk_question
            kc_ids = (q,)
        elif vocab.kind == KIND_KCS:
            q = None
            kc_ids = tuple(sorted({vocab.kc_index(k) for k in kcs})) if kcs else (vocab.unk_kc,)
        else:
            q = vocab.question_index(question) if question else vocab.unk_question
            kc_ids = tuple(sorted({vocab.kc_index(k) for k in kcs})) if kcs else (vocab.unk_kc,)
        by_student[student].append(InteractionRecord(student, q, kc_ids, r, key))
    out = {}
    for student in sorted(by_student, key=_natural_key):
        out[student] = sorted(by_student[student], key=lambda rec: rec.order_key)
    return out, vocab


def ingest(path: str | Path, config: FormatConfig | None = None, vocab: VocabMaps | None = None):
    """Read a canonical interaction file.

    Returns ``(records_by_student, vocab)``. Records are sorted stably by
    ``order_key`` within each student. When ``vocab`` is given it is used as
    is and unknown ids map to its UNK slots; otherwise one is built from the
    file with ids ordered naturally ("q2" before "q10").
    """
    return records_from_raw(read_raw(path, config), vocab)


def expand_kc(records: Sequence[InteractionRecord]) -> list[ExpandedStep]:
    """One step per (interaction, KC), KCs in ascending index order."""
    steps = []
    for i, rec in enumerate(records):
        for kc in sorted(rec.kc_ids):
            q = rec.question_id if rec.question_id is not None else kc
            steps.append(ExpandedStep(kc, q, rec.response, len(steps), i, rec.order_key))
    return steps


def chunk_and_filter(
    student_id: str, steps: Sequence[ExpandedStep], max_len: int = MAX_LEN, min_len: int = MIN_LEN
) -> StudentSequence:
    """Cut ``steps`` into consecutive windows of ``max_len``; drop windows shorter than ``min_len``."""
    chunks = []
    for start in range(0, len(steps), max_len):
        window = steps[start : start + max_len]
        if len(window) < min_len:
            continue
        chunks.append(
            [
                ExpandedStep(s.kc_id, s.question_id, s.response, p, s.interaction, s.order_key)
                for p, s in enumerate(window)
            ]
        )
    return StudentSequence(student_id, chunks)


def preprocess(
    records_by_student: dict[str, list[InteractionRecord]], max_len: int = MAX_LEN, min_len: int = MIN_LEN
) -> list[StudentSequence]:
    out = []
    for student, records in records_by_student.items():
        seq = chunk_and_filter(student, expand_kc(records), max_len, min_len)
        if seq.chunks:
            out.append(seq)
    return out


def split(student_ids: Sequence[str], seed: int, n_folds: int = 5, test_fraction: float = 0.2) -> DatasetSplit:
    """Hold out ``test_fraction`` of students, then cut the rest into ``n_folds`` folds."""
    ids = list(student_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate student ids in split input")
    n_test = int(math.floor(len(ids) * test_fraction + 1e-9))
    if len(ids) < n_folds or len(ids) - n_test < n_folds:
        raise DataError(f"need at least {n_folds} students outside the test set, got {len(ids) - n_test}")
    order = make_rng(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    test = shuffled[:n_test]
    folds = [list(part) for part in np.array_split(np.array(shuffled[n_test:], dtype=object), n_folds)]
    return DatasetSplit(test, folds)


@dataclass
class Batch:
    """Right-padded arrays of shape ``[B, L]``.

    ``group_start[b, p]`` is the in-chunk position of the first step of the
    interaction that step ``p`` came from; the model lets ``p`` attend only to
    positions before it, so no step sees the response of its own question.
    """

    kc_ids: np.ndarray
    question_ids: np.ndarray
    responses: np.ndarray
    valid_mask: np.ndarray
    group_start: np.ndarray
    interaction_ids: np.ndarray
    order_keys: np.ndarray
    student_ids: list[str]

    @property
    def shape(self) -> tuple[int, int]:
        return self.kc_ids.shape

    def predict_mask(self) -> np.ndarray:
        """Valid positions with a non-empty visible history."""
        return self.valid_mask & (self.group_start > 0)


def batch(
    chunks: Sequence[Sequence[ExpandedStep]],
    pad_token: int = 0,
    student_ids: Sequence[str] | None = None,
) -> Batch:
    if not chunks:
        raise DataError("cannot batch zero chunks")
    B = len(chunks)
    L = max(len(c) for c in chunks)
    kc = np.full((B, L), pad_token, dtype=np.int64)
    q = np.full((B, L), pad_token, dtype=np.int64)
    r = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    start = np.zeros((B, L), dtype=np.int64)
    inter = np.full((B, L), -1, dtype=np.int64)
    order = np.zeros((B, L), dtype=np.float64)
    for b, chunk in enumerate(chunks):
        group = 0
        for p, s in enumerate(chunk):
            if p > 0 and s.interaction != chunk[p - 1].interaction:
                group = p
            kc[b, p] = s.kc_id
            q[b, p] = s.question_id
            r[b, p] = s.response
            valid[b, p] = True
            start[b, p] = group
            inter[b, p] = s.interaction
            order[b, p] = s.order_key
    sids = list(student_ids) if student_ids is not None else [""] * B
    return Batch(kc, q, r, valid, start, inter, order, sids)


def iter_batches(
    sequences: Sequence[StudentSequence], batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[Batch]:
    """Batch every chunk of ``sequences``; shuffled when ``rng`` is given."""
    items = [(seq.student_id, chunk) for seq in sequences for chunk in seq.chunks]
    order = rng.permutation(len(items)) if rng is not None else np.arange(len(items))
    for lo in range(0, len(items), batch_size):
        sel = [items[i] for i in order[lo : lo + batch_size]]
        yield batch([c for _, c in sel], student_ids=[s for s, _ in sel])


def interactions_of(sequences: Iterable[StudentSequence]) -> Iterator[tuple[str, int, int, tuple[int, ...], int]]:
    """Yield ``(student, interaction, question, kc_set, response)`` from retained steps."""
    for seq in sequences:
        grouped: dict[int, list[ExpandedStep]] = {}
        for chunk in seq.chunks:
            for s in chunk:
                grouped.setdefault(s.interaction, []).append(s)
        for inter, steps in grouped.items():
            kcs = tuple(sorted({s.kc_id for s in steps}))
            yield seq.student_id, inter, steps[0].question_id, kcs, steps[0].response


def stats(sequences: Sequence[StudentSequence], kind: str = KIND_BOTH) -> dict:
    """Table-style counts over preprocessed data.

    ``avg_kcs`` is the mean KC-set size over distinct questions; it is
    ``None`` when the data is empty or lacks one of the two identifiers.
    """
    n_inter = 0
    q_kcs: dict[int, set[int]] = defaultdict(set)
    kcs: set[int] = set()
    for _, _, q, kc_set, _ in interactions_of(sequences):
        n_inter += 1
        q_kcs[q].update(kc_set)
        kcs.update(kc_set)
    n_seq = sum(len(s.chunks) for s in sequences)
    avg = None
    if q_kcs and kind == KIND_BOTH:
        avg = sum(len(v) for v in q_kcs.values()) / len(q_kcs)
    return {
        "interactions": n_inter,
        "sequences": n_seq,
        "questions": len(q_kcs) if kind != KIND_KCS else None,
        "kcs": len(kcs) if kind != KIND_QUESTIONS else None,
        "avg_kcs": avg,
    }


def format_stats(name: str, report: dict) -> str:
    def cell(v, fmt="{:,}"):
        return "-" if v is None else fmt.format(v)

    head = f"{'dataset':<16} {'interactions':>12} {'sequences':>9} {'questions':>9} {'KCs':>5} {'avg KCs':>7}"
    row = (
        f"{name:<16} {cell(report['interactions']):>12} {cell(report['sequences']):>9} "
        f"{cell(report['questions']):>9} {cell(report['kcs']):>5} {cell(report['avg_kcs'], '{:.4f}'):>7}"
    )
    return head + "\n" + row


def her(records: Iterable[InteractionRecord]) -> dict[int, float]:
    """Historical error rate per question: incorrect attempts / attempts."""
    wrong: dict[int, int] = defaultdict(int)
    seen: dict[int, int] = defaultdict(int)
    for rec in records:
        if rec.question_id is None:
            continue
        seen[rec.question_id] += 1
        wrong[rec.question_id] += 1 - rec.response
    return {q: wrong[q] / n for q, n in seen.items()}


def her_from_sequences(sequences: Iterable[StudentSequence]) -> dict[int, float]:
    return her(
        InteractionRecord(s, q, kcs, r, float(i)) for s, i, q, kcs, r in interactions_of(sequences)
    )


def write_canonical(path: str | Path, rows: Iterable[tuple[str, str, Sequence[str], int, float | int]]) -> None:
    """Write ``(student, question, kcs, response, order)`` rows in canonical form."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CANONICAL_COLUMNS)
        for student, question, kcs, response, order in rows:
            w.writerow([student, question, ";".join(kcs), response, _fmt_order(order)])


def _fmt_order(order) -> str:
    return str(int(order)) if float(order).is_integer() else repr(float(order))


# ---------------------------------------------------------------------------
# adapters: raw platform dumps -> canonical rows


def _adapter_canonical(path: Path) -> list[tuple[str, str, list[str], int, float]]:
    return [(s, q, kcs, int(_parse_response(r, ln)), _parse_order(o, ln)) for ln, s, q, kcs, r, o in read_raw(path)]


def _adapter_assistments2009(path: Path):
    """ASSISTments 2009 skill-builder export.

    Multi-skill problems appear as one row per skill sharing ``order_id``;
    they are merged into one interaction.
    """
    merged: dict[tuple[str, str], list] = {}
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            skill = (row.get("skill_id") or "").strip()
            if not skill:
                continue
            key = (row["user_id"].strip(), row["order_id"].strip())
            if key not in merged:
                merged[key] = [key[0], row["problem_id"].strip(), [], row["correct"].strip(), row["order_id"].strip()]
            if skill not in merged[key][2]:
                merged[key][2].append(skill)
    out = []
    for s, q, kcs, r, o in merged.values():
        if r not in ("0", "1"):
            continue
        out.append((s, q, kcs, int(r), float(o)))
    return out


def _adapter_assistments2015(path: Path):
    """ASSISTments 2015 export: KC-only (``sequence_id``), fractional ``correct`` dropped."""
    out = []
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        for row in csv.DictReader(fh):
            r = row["correct"].strip()
            if r in ("0", "1", "0.0", "1.0"):
                out.append((row["user_id"].strip(), "", [row["sequence_id"].strip()], int(float(r)), float(row["log_id"])))
    return out


ADAPTERS: dict[str, Callable[[Path], list]] = {
    "canonical": _adapter_canonical,
    "assistments2009": _adapter_assistments2009,
    "assistments2015": _adapter_assistments2015,
}


def adapt(path: str | Path, adapter: str):
    if adapter not in ADAPTERS:
        raise DataError(f"unknown adapter {adapter!r}; available: {', '.join(sorted(ADAPTERS))}")
    return ADAPTERS[adapter](Path(path))
