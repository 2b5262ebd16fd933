import numpy as np
import pytest

from simplekt import numerics as nx
from simplekt.data import ExpandedStep, batch
from simplekt.model import (
    ConfigError,
    ModelConfig,
    SimpleKT,
    embed_step,
    init_params,
    knowledge_state,
    predict_logit,
    visibility,
)
from simplekt.numerics import Tensor

from conftest import random_chunk


def small_config(**kw):
    base = dict(n_kcs=5, n_questions=8, d=8, n_heads=2, n_blocks=1, dropout=0.0, variant="full", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(d=10, n_heads=4).validate()
    with pytest.raises(ConfigError):
        small_config(variant="other").validate()
    with pytest.raises(ConfigError):
        small_config(n_blocks=0).validate()
    with pytest.raises(ConfigError):
        small_config(dropout=1.0).validate()


def test_param_shapes_per_variant():
    full = init_params(small_config())
    assert full["M"].shape == (8, 8) and full["W1"].shape == (8, 16) and full["R"].shape == (2, 8)
    assert init_params(small_config(variant="scalardiff"))["M"].shape == (8, 1)
    nod = init_params(small_config(variant="nodiff"))
    assert "M" not in nod and "V" not in nod
    bound = 1 / np.sqrt(8)
    assert np.abs(full["Z"].data).max() <= bound and not full["b1"].data.any()


def _params(d=2, **arrays):
    p = {k: Tensor(np.asarray(v, dtype=float)) for k, v in arrays.items()}
    return p


def test_embed_step_examples():
    p = _params(Z=[[1.0, 2.0]], M=[[0.5, -1.0]], V=[[2.0, 2.0]], R=[[0.25, 0.5], [0.75, 1.5]])
    x, y = embed_step(0, 0, 0, p, "full")
    np.testing.assert_array_equal(x, [2.0, 0.0])
    p0 = _params(Z=[[1.0, 2.0]], M=[[0.0, 0.0]], V=[[2.0, 2.0]], R=[[0.1, 0.2], [0.3, 0.5]])
    np.testing.assert_array_equal(embed_step(0, 0, 0, p0, "full")[0], [1.0, 2.0])
    x0, y0 = embed_step(0, 0, 0, p, "full")
    x1, y1 = embed_step(0, 0, 1, p, "full")
    np.testing.assert_array_equal(x0, x1)
    np.testing.assert_array_equal(y1 - y0, p["R"].data[1] - p["R"].data[0])
    np.testing.assert_array_equal(embed_step(0, 0, 1, p, "nodiff")[0], [1.0, 2.0])
    with pytest.raises(IndexError):
        embed_step(1, 0, 0, p, "full")


def test_embed_step_matches_batched_embed(rng):
    m = SimpleKT(small_config())
    chunk = random_chunk(rng, 6)
    b = batch([chunk])
    x, y = m.embed(b.kc_ids, b.question_ids, b.responses)
    for p, s in enumerate(chunk):
        xs, ys = embed_step(s.kc_id, s.question_id, s.response, m.params, "full")
        np.testing.assert_array_equal(x.data[0, p], xs)
        np.testing.assert_array_equal(y.data[0, p], ys)


def _identity_attention(cfg):
    params = init_params(cfg)
    for w in ("WQ", "WK", "WV", "WO"):
        params[f"block0.{w}"] = Tensor(np.eye(cfg.d))
    return params


def test_knowledge_state_examples(rng):
    cfg = small_config(d=4, n_heads=1)
    params = _identity_attention(cfg)
    y = rng.normal(size=(1, 4))
    h = knowledge_state(rng.normal(size=4), rng.normal(size=(1, 4)), y, params, cfg)
    np.testing.assert_allclose(h, y[0], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(knowledge_state(np.ones(4), np.zeros((0, 4)), np.zeros((0, 4)), params, cfg), np.zeros(4))
    # query orthogonal to both keys -> equal logits -> mean of values
    X = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    Y = rng.normal(size=(2, 4))
    h = knowledge_state(np.array([0, 0, 1.0, 0]), X, Y, params, cfg)
    np.testing.assert_allclose(h, Y.mean(axis=0), atol=1e-15)


def test_knowledge_state_matches_forward(rng):
    cfg = small_config(n_blocks=1)
    m = SimpleKT(cfg)
    chunk = [ExpandedStep(int(rng.integers(5)), int(rng.integers(8)), int(rng.integers(2)), p, p) for p in range(5)]
    b = batch([chunk])
    x, y = m.embed(b.kc_ids, b.question_ids, b.responses)
    h = m.knowledge_states(x, y, visibility(b))
    logits, _ = m.forward(b)
    for p in range(1, 5):
        hp = knowledge_state(x.data[0, p], x.data[0, :p], y.data[0, :p], m.params, cfg)
        np.testing.assert_allclose(hp, h.data[0, p], atol=1e-12)
        assert predict_logit(hp, x.data[0, p], m.params) == pytest.approx(logits.data[0, p], abs=1e-12)


def test_predict_logit_examples():
    d = 3
    zeros = {"W1": np.zeros((d, 2 * d)), "b1": np.zeros(d), "W2": np.zeros((d, d)), "b2": np.zeros(d), "w": np.zeros((d, 1)), "b": np.zeros(1)}
    p = {k: Tensor(v) for k, v in zeros.items()}
    eta = predict_logit(np.ones(d), np.ones(d), p)
    assert eta == 0.0 and nx.sigmoid(Tensor(eta)).item() == 0.5
    p["b"] = Tensor([3.0])
    assert nx.sigmoid(Tensor(predict_logit(np.ones(d), np.ones(d), p))).item() == pytest.approx(0.95257412682, abs=1e-10)


def test_golden_forward():
    # frozen regression values from a seed-42 toy instance
    m = SimpleKT(ModelConfig(n_kcs=3, n_questions=4, d=8, n_heads=2, dropout=0.0, seed=42))
    b = batch([[ExpandedStep(0, 1, 1, 0, 0), ExpandedStep(2, 3, 0, 1, 1), ExpandedStep(1, 1, 1, 2, 2)]])
    logits, mask = m.forward(b)
    assert mask.tolist() == [[False, True, True]]
    np.testing.assert_allclose(logits.data[0, 1:], [0.017266440837884752, 0.051381255930156106], rtol=0, atol=1e-14)


def test_forward_examples(rng):
    m = SimpleKT(small_config())
    c3 = [ExpandedStep(1, 2, 1, p, p) for p in range(3)]
    _, mask = m.forward(batch([c3]))
    assert mask.sum() == 2 and mask[0].tolist() == [False, True, True]
    chunk = random_chunk(rng, 9)
    logits, _ = m.forward(batch([chunk, chunk]))
    np.testing.assert_array_equal(logits.data[0], logits.data[1])
    again, _ = m.forward(batch([chunk, chunk]))
    np.testing.assert_array_equal(logits.data, again.data)


def test_dropout_only_in_training(rng):
    m = SimpleKT(small_config(dropout=0.5))
    b = batch([random_chunk(rng, 8)])
    a, _ = m.forward(b, training=True, rng=nx.make_rng(1))
    c, _ = m.forward(b, training=True, rng=nx.make_rng(2))
    assert not np.array_equal(a.data, c.data)
    e1, _ = m.forward(b)
    e2, _ = m.forward(b)
    np.testing.assert_array_equal(e1.data, e2.data)


@pytest.mark.parametrize("variant", ["full", "scalardiff", "nodiff"])
@pytest.mark.parametrize("blocks", [1, 2])
def test_causality(rng, variant, blocks):
    m = SimpleKT(small_config(variant=variant, n_blocks=blocks))
    for _ in range(10):
        chunk = random_chunk(rng, 12)
        base, _ = m.forward(batch([chunk]))
        p = int(rng.integers(1, 12))
        tail = random_chunk(rng, 12 - p)
        offset = chunk[p - 1].interaction + 1
        new = chunk[:p] + [
            ExpandedStep(s.kc_id, s.question_id, s.response, p + i, s.interaction + offset) for i, s in enumerate(tail)
        ]
        out, _ = m.forward(batch([new]))
        np.testing.assert_array_equal(out.data[0, :p], base.data[0, :p])


def test_no_step_sees_its_own_response():
    m = SimpleKT(small_config())
    a = [ExpandedStep(0, 1, 1, 0, 0), ExpandedStep(1, 2, 1, 1, 1), ExpandedStep(3, 2, 1, 2, 1)]
    b = [ExpandedStep(0, 1, 1, 0, 0), ExpandedStep(1, 2, 0, 1, 1), ExpandedStep(3, 2, 0, 2, 1)]
    la, _ = m.forward(batch([a]))
    lb, _ = m.forward(batch([b]))
    np.testing.assert_array_equal(la.data, lb.data)


def test_pad_content_is_ignored(rng):
    m = SimpleKT(small_config())
    chunks = [random_chunk(rng, 4), random_chunk(rng, 9)]
    b = batch(chunks)
    base, mask = m.forward(b)
    pad = ~b.valid_mask
    b.kc_ids[pad] = rng.integers(5, size=pad.sum())
    b.question_ids[pad] = rng.integers(8, size=pad.sum())
    b.responses[pad] = rng.integers(2, size=pad.sum())
    out, _ = m.forward(b)
    np.testing.assert_array_equal(out.data[mask], base.data[mask])


def test_variant_nesting(rng):
    full = SimpleKT(small_config())
    full.params["M"] = Tensor(np.zeros((8, 8)))
    shared = {k: v for k, v in full.params.items() if k not in ("M", "V")}
    nodiff = SimpleKT(small_config(variant="nodiff"), shared)
    scalar_m = rng.normal(size=(8, 1))
    scal = SimpleKT(small_config(variant="scalardiff"), {**full.params, "M": Tensor(scalar_m)})
    full_r1 = SimpleKT(small_config(), {**full.params, "M": Tensor(np.repeat(scalar_m, 8, axis=1))})
    for _ in range(5):
        b = batch([random_chunk(rng, 7), random_chunk(rng, 10)])
        np.testing.assert_array_equal(full.forward(b)[0].data, nodiff.forward(b)[0].data)
        np.testing.assert_array_equal(full_r1.forward(b)[0].data, scal.forward(b)[0].data)


def test_permutation_consistency(rng):
    m = SimpleKT(small_config())
    chunks = [random_chunk(rng, int(n)) for n in rng.integers(3, 12, size=5)]
    perm = rng.permutation(5)
    a, mask = m.forward(batch(chunks))
    b, _ = m.forward(batch([chunks[i] for i in perm]))
    np.testing.assert_array_equal(b.data[mask[perm]], a.data[perm][mask[perm]])


def test_probabilities_in_open_interval(rng):
    m = SimpleKT(small_config())
    prob, mask = m.predict_proba(batch([random_chunk(rng, 10)]))
    assert ((prob[mask] > 0) & (prob[mask] < 1)).all()


@pytest.mark.parametrize("variant", ["full", "scalardiff", "nodiff"])
def test_end_to_end_gradients(rng, variant):
    m = SimpleKT(small_config(variant=variant, n_blocks=2))
    b = batch([random_chunk(rng, 10), random_chunk(rng, 8)])
    loss, _ = m.loss(b)
    nx.backward(loss)

    def f():
        return m.loss(b)[0].item()

    for name, p in m.params.items():
        numeric = nx.finite_difference_grad(f, p.data, 1e-5)
        assert nx.max_relative_error(p.grad, numeric) < 1e-4, name


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = small_config(n_blocks=2)
    m = SimpleKT(cfg)
    path = tmp_path / "m.npz"
    m.save(path)
    again = SimpleKT.load(path, cfg)
    b = batch([random_chunk(rng, 6)])
    np.testing.assert_array_equal(m.forward(b)[0].data, again.forward(b)[0].data)
    with pytest.raises(ConfigError):
        SimpleKT.load(path, small_config(d=16))
    bad = dict(m.params)
    bad["W1"] = Tensor(np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        SimpleKT(cfg, bad)
