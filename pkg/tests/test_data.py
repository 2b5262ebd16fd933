from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simplekt import data as D
from simplekt.data import ExpandedStep, InteractionRecord


def write(tmp_path: Path, body: str, name="log.csv") -> Path:
    p = tmp_path / name
    p.write_text("student_id,question_id,kc_ids,response,order_key\n" + body, encoding="utf-8")
    return p


def test_ingest_parses_row(tmp_path):
    recs, vocab = D.ingest(write(tmp_path, "s1,q2,c1;c3,0,5\n"))
    (rec,) = recs["s1"]
    assert rec.student_id == "s1"
    assert rec.question_id == vocab.questions["q2"]
    assert set(rec.kc_ids) == {vocab.kcs["c1"], vocab.kcs["c3"]}
    assert rec.response == 0 and rec.order_key == 5


def test_ingest_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("", encoding="utf-8")
    recs, _ = D.ingest(p)
    assert recs == {}
    recs, _ = D.ingest(write(tmp_path, ""))
    assert recs == {}


def test_ingest_rejects_bad_response(tmp_path):
    with pytest.raises(D.DataError, match="line 3"):
        D.ingest(write(tmp_path, "s1,q1,c1,1,1\ns1,q2,c1,2,2\n"))


def test_ingest_malformed_row_names_line(tmp_path):
    with pytest.raises(D.DataError, match="line 2"):
        D.ingest(write(tmp_path, "s1,q1,c1,1\n"))
    with pytest.raises(D.DataError, match="line 2"):
        D.ingest(write(tmp_path, "s1,q1,c1,1,abc\n"))


def test_ingest_sorts_by_order_key(tmp_path):
    recs, vocab = D.ingest(write(tmp_path, "s1,q1,c1,1,9\ns1,q2,c1,0,3\ns2,q1,c1,1,1\n"))
    assert [r.order_key for r in recs["s1"]] == [3, 9]
    assert list(recs) == ["s1", "s2"]


def test_vocab_natural_order_and_unk(tmp_path):
    recs, vocab = D.ingest(write(tmp_path, "s1,q10,c1,1,1\ns1,q2,c1,0,2\n"))
    assert vocab.questions == {"q2": 0, "q10": 1}
    assert vocab.question_index("q999") == vocab.unk_question == 2
    other = write(tmp_path, "s9,q7,c1,1,1\n", "other.csv")
    recs2, _ = D.ingest(other, vocab=vocab)
    assert recs2["s9"][0].question_id == vocab.unk_question


def test_vocab_roundtrip(tmp_path):
    _, vocab = D.ingest(write(tmp_path, "s1,q1,c1;c2,1,1\ns1,q2,c3,0,2\n"))
    vocab.save(tmp_path / "v")
    again = D.VocabMaps.load(tmp_path / "v")
    assert again == vocab


def test_kc_only_and_question_only_fallbacks(tmp_path):
    recs, vocab = D.ingest(write(tmp_path, "s1,,c1;c2,1,1\ns1,,c2,0,2\n", "kc.csv"))
    assert vocab.kind == D.KIND_KCS
    steps = D.expand_kc(recs["s1"])
    assert all(s.question_id == s.kc_id for s in steps)
    recs, vocab = D.ingest(write(tmp_path, "s1,q1,,1,1\ns1,q2,,0,2\n", "q.csv"))
    assert vocab.kind == D.KIND_QUESTIONS and vocab.n_kcs == vocab.n_questions
    assert [r.kc_ids for r in recs["s1"]] == [(r.question_id,) for r in recs["s1"]]


def test_expand_kc_two_kc_question():
    # q2 covers c1 and c3 and was answered wrongly
    recs = [InteractionRecord("s", 2, (3, 1), 0, 0)]
    steps = D.expand_kc(recs)
    assert [(s.kc_id, s.question_id, s.response) for s in steps] == [(1, 2, 0), (3, 2, 0)]
    assert D.expand_kc([InteractionRecord("s", 5, (4,), 1, 0)])[0].kc_id == 4


record_lists = st.lists(
    st.tuples(st.integers(0, 20), st.frozensets(st.integers(0, 9), min_size=1, max_size=4), st.integers(0, 1)),
    max_size=40,
)


@settings(max_examples=50, deadline=None)
@given(record_lists)
def test_expansion_counts_and_is_lossless(items):
    recs = [InteractionRecord("s", q, tuple(kcs), r, float(i)) for i, (q, kcs, r) in enumerate(items)]
    steps = D.expand_kc(recs)
    assert len(steps) == sum(len(r.kc_ids) for r in recs)
    grouped = {}
    for s in steps:
        grouped.setdefault(s.interaction, []).append(s)
    rebuilt = [
        (g[0].question_id, frozenset(s.kc_id for s in g), g[0].response) for _, g in sorted(grouped.items())
    ]
    assert rebuilt == [(q, kcs, r) for q, kcs, r in items]
    # steps from one interaction are consecutive
    seen = []
    for s in steps:
        if not seen or seen[-1] != s.interaction:
            assert s.interaction not in seen
            seen.append(s.interaction)


def _steps(n):
    return [ExpandedStep(0, i, 1, i, i) for i in range(n)]


def test_chunking_examples():
    assert [len(c) for c in D.chunk_and_filter("s", _steps(450)).chunks] == [200, 200, 50]
    assert D.chunk_and_filter("s", _steps(2)).chunks == []
    assert [len(c) for c in D.chunk_and_filter("s", _steps(202)).chunks] == [200]
    seqs = D.preprocess({"a": [InteractionRecord("a", 1, (1,), 1, 0)] * 2, "b": [InteractionRecord("b", 1, (1,), 1, 0)] * 3})
    assert [s.student_id for s in seqs] == ["b"]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 900))
def test_chunk_lengths_in_range(n):
    seq = D.chunk_and_filter("s", _steps(n))
    assert all(3 <= len(c) <= 200 for c in seq.chunks)
    assert all(c[i].position == i for c in seq.chunks for i in range(len(c)))
    flat = [s.interaction for c in seq.chunks for s in c]
    assert flat == sorted(flat)


def test_split_examples():
    ids = [f"s{i}" for i in range(100)]
    sp = D.split(ids, 42)
    assert len(sp.test_students) == 20
    assert [len(f) for f in sp.folds] == [16] * 5
    assert D.split(ids, 42) == sp
    with pytest.raises(D.DataError):
        D.split(ids[:4], 42)


@settings(max_examples=30, deadline=None)
@given(st.integers(6, 300), st.integers(0, 2**31))
def test_split_is_partition(n, seed):
    ids = [f"s{i}" for i in range(n)]
    sp = D.split(ids, seed)
    parts = [sp.test_students, *sp.folds]
    flat = [s for p in parts for s in p]
    assert sorted(flat) == sorted(ids) and len(flat) == len(set(flat))
    sizes = [len(f) for f in sp.folds]
    assert max(sizes) - min(sizes) <= 1


def test_split_seeds_differ():
    ids = [f"s{i}" for i in range(10)]
    base = D.split(ids, 0)
    same = sum(D.split(ids, seed) == base for seed in range(1, 101))
    assert same <= 1


def test_batch_padding():
    b = D.batch([_steps(3), _steps(5)])
    assert b.shape == (2, 5)
    assert b.valid_mask[0].tolist() == [True, True, True, False, False]
    assert b.valid_mask[1].all()
    one = D.batch([_steps(4)])
    assert one.shape == (1, 4) and one.valid_mask.all()
    eq = D.batch([_steps(4), _steps(4)])
    assert eq.valid_mask.all()


def test_batch_group_start_marks_interaction_boundaries():
    chunk = [ExpandedStep(1, 7, 0, 0, 0), ExpandedStep(3, 7, 0, 1, 0), ExpandedStep(2, 8, 1, 2, 1)]
    b = D.batch([chunk])
    assert b.group_start[0].tolist() == [0, 0, 2]
    assert b.predict_mask()[0].tolist() == [False, False, True]


def test_stats():
    recs = {f"s{i}": [InteractionRecord(f"s{i}", q, (q % 3,), 1, float(q)) for q in range(10)] for i in range(2)}
    report = D.stats(D.preprocess(recs))
    assert report == {"interactions": 20, "sequences": 2, "questions": 10, "kcs": 3, "avg_kcs": 1.0}
    empty = D.stats([])
    assert empty["interactions"] == 0 and empty["sequences"] == 0 and empty["avg_kcs"] is None


def test_her():
    recs = [InteractionRecord("s", 1, (0,), r, float(i)) for i, r in enumerate([1, 0, 1, 1])]
    recs += [InteractionRecord("s", 2, (0,), 1, 9.0)]
    rates = D.her(recs)
    assert rates[1] == 0.25 and rates[2] == 0.0
    assert rates.get(3) is None


def test_adapters(tmp_path):
    raw = tmp_path / "as09.csv"
    raw.write_text(
        "order_id,user_id,problem_id,skill_id,correct\n1,u1,p1,10,1\n1,u1,p1,11,1\n2,u1,p2,10,0\n3,u1,p3,,1\n",
        encoding="utf-8",
    )
    rows = D.adapt(raw, "assistments2009")
    assert rows == [("u1", "p1", ["10", "11"], 1, 1.0), ("u1", "p2", ["10"], 0, 2.0)]
    with pytest.raises(D.DataError, match="available"):
        D.adapt(raw, "nope")
