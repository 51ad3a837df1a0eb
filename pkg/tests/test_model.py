import numpy as np
import pytest

from eclseq import ops
from eclseq.data import pad_left
from eclseq.model import (DropoutMasks, EclsrModel, aggregate_last_k, discriminate, discriminator_features,
                          detection_scores, encode_causal, encode_generator, encode_inference,
                          generate_substituted, item_logits, score_items)
from eclseq.optim import Adam
from eclseq.tensor import ShapeError, Tensor

N, L, D = 30, 8, 16


@pytest.fixture(scope="module")
def model():
    return EclsrModel(N, L, d=D, n_layers=2, n_heads=2, seed=3)


def _batch(rng, B=3, lengths=(8, 5, 3)):
    rows = [pad_left(rng.choice(np.arange(1, N + 1), size=n, replace=False), L) for n in lengths[:B]]
    return np.stack(rows)


def test_parameter_names_and_shapes(model):
    p = model.params
    assert p["item_embed"].shape == (N + 2, D)
    assert np.all(p["item_embed"].data[0] == 0)
    assert p["ube.pos_embed"].shape == (L, D) and p["gen.pos_embed"].shape == (L, D)
    assert p["ube.layer0.attn.q.weight"].shape == (D, D)
    assert p["ube.layer1.ffn.in.weight"].shape == (D, 4 * D)
    assert p["cd.condition_proj.weight"].shape == (2 * D, D)
    assert p["cd.head.weight"].shape == (D, 1)
    assert not any(n.startswith("cd.layer") for n in p)
    with pytest.raises(ValueError):
        EclsrModel(N, L, d=15, n_heads=2)


def test_cd_blocks_alias_ube_blocks(model):
    for cd, ube in zip(model.cd_layers, model.ube_layers):
        for name in cd:
            assert cd[name] is ube[name]


def test_causality_probe():
    m = EclsrModel(60, 10, d=D, seed=1)
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 11))
        items = pad_left(rng.choice(np.arange(1, 61), size=n, replace=False), 10)[None]
        off = 10 - n
        s = off + int(rng.integers(n - 1))
        m.item_embed.zero_grad()
        h = encode_causal(m, items).hidden
        ops.sum(ops.mul(ops.take(h, (0, s)), Tensor(rng.normal(size=D)))).backward()
        g = m.item_embed.grad
        for t in range(s + 1, 10):
            assert np.all(g[items[0, t]] == 0.0), (s, t)
        assert np.any(g[items[0, s]] != 0.0)
        for p in m.params.values():
            p.zero_grad()


def test_perturbing_item_changes_only_later_states(model):
    rng = np.random.default_rng(1)
    items = _batch(rng, 1, (8,))
    base = encode_inference(model, items)
    other = items.copy()
    t = 4
    other[0, t] = next(v for v in range(1, N + 1) if v not in items[0])
    moved = encode_inference(model, other)
    diff = np.abs(moved - base).max(axis=-1)[0]
    assert np.all(diff[:t] == 0.0) and np.all(diff[t:] > 0)


def test_generator_sees_the_future(model):
    rng = np.random.default_rng(2)
    items = _batch(rng, 1, (8,))
    masked = items.copy()
    masked[0, 3] = model.mask_id
    a = encode_generator(model, masked).data[0, 3]
    future = masked.copy()
    future[0, 6] = next(v for v in range(1, N + 1) if v not in items[0])
    b = encode_generator(model, future).data[0, 3]
    assert np.abs(a - b).max() > 1e-8
    # and the encoder does not
    assert np.array_equal(encode_inference(model, masked)[0, 3], encode_inference(model, future)[0, 3])


def test_pad_row_gradient_is_zero_and_stays_zero():
    m = EclsrModel(N, L, d=D, seed=0)
    rng = np.random.default_rng(0)
    items = _batch(rng)
    out = encode_causal(m, items, dropout=DropoutMasks(np.random.default_rng(1), 0.2), k=3)
    disc = discriminate(m, items, out.hidden)
    loss = ops.add(ops.sum(ops.mul(out.aggregated, out.aggregated)), ops.sum(disc))
    loss.backward()
    assert np.linalg.norm(m.item_embed.grad[0]) == 0.0
    opt = Adam(m.params, lr=0.1)
    opt.step()
    assert np.all(m.item_embed.data[0] == 0.0)


def test_padding_invariance():
    m = EclsrModel(N, 20, d=D, seed=4)
    content = [5, 9, 2, 7]
    h_short = encode_inference(m, pad_left(content, 6)[None])[0, -4:]
    h_long = encode_inference(m, pad_left(content, 20)[None])[0, -4:]
    np.testing.assert_allclose(h_short, h_long, rtol=0, atol=1e-12)


def test_dropout_mask_determinism(model):
    items = _batch(np.random.default_rng(3))
    a = encode_causal(model, items, DropoutMasks(np.random.default_rng(7), 0.3)).hidden.data
    b = encode_causal(model, items, DropoutMasks(np.random.default_rng(7), 0.3)).hidden.data
    c = encode_causal(model, items, DropoutMasks(np.random.default_rng(8), 0.3)).hidden.data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_frame_longer_than_position_table(model):
    with pytest.raises(ShapeError):
        encode_causal(model, np.ones((1, L + 1), dtype=np.int64))


def test_aggregate_last_k_oracles():
    rng = np.random.default_rng(0)
    hidden = rng.normal(size=(1, 6, 3))
    a, b, c = hidden[0, 3], hidden[0, 4], hidden[0, 5]
    h = Tensor(hidden)
    np.testing.assert_array_equal(aggregate_last_k(h, [3], 1).data[0], c)
    np.testing.assert_allclose(aggregate_last_k(h, [3], 3).data[0], (a + b + c) / 3, rtol=1e-14)
    np.testing.assert_allclose(aggregate_last_k(h, [5], 100).data[0], hidden[0, 1:].mean(axis=0), rtol=1e-14)
    with pytest.raises(ValueError):
        aggregate_last_k(h, [3], 0)


def test_score_items_oracles():
    m = EclsrModel(4, 3, d=6, seed=0)
    m.item_embed.data[...] = np.vstack([np.zeros(6), np.eye(6)[:5]])
    for j in range(1, 5):
        scores = score_items(m, np.eye(6)[j - 1])
        assert int(np.argmax(scores)) == j
        assert scores[0] == -np.inf and scores[m.mask_id] == -np.inf
    rng = np.random.default_rng(1)
    m.item_embed.data[1:] = rng.normal(size=(5, 6))
    q = rng.normal(size=(2, 6))
    scores = score_items(m, q)
    for b in range(2):
        for i in range(1, 5):
            assert scores[b, i] == pytest.approx(sum(q[b, c] * m.item_embed.data[i, c] for c in range(6)), abs=1e-12)
    np.testing.assert_allclose(item_logits(m, Tensor(q)).data, scores[:, 1:5], rtol=1e-14)


def test_generator_empty_plan_is_identity(model):
    items = _batch(np.random.default_rng(5))
    out = generate_substituted(model, items, np.zeros_like(items, dtype=bool))
    assert np.array_equal(out.items, items) and out.logits.shape == (0, N)


def test_generator_fill_rules(model):
    items = _batch(np.random.default_rng(6))
    plan = np.zeros_like(items, dtype=bool)
    plan[0, 2] = plan[1, 6] = plan[2, 7] = True
    a = generate_substituted(model, items, plan)
    b = generate_substituted(model, items, plan)
    assert np.array_equal(a.items, b.items)
    assert np.array_equal(a.items[~plan], items[~plan])
    assert np.all((a.items[plan] >= 1) & (a.items[plan] <= N))
    np.testing.assert_array_equal(a.items[plan], a.logits.data.argmax(axis=-1) + 1)
    c = generate_substituted(model, items, plan, np.random.default_rng(0), sampling="categorical")
    assert np.all((c.items[plan] >= 1) & (c.items[plan] <= N))
    with pytest.raises(ValueError):
        generate_substituted(model, items, plan, sampling="categorical")
    with pytest.raises(ValueError, match="padding"):
        generate_substituted(model, items, np.ones_like(items, dtype=bool))


def test_generated_sequence_carries_no_gradient(model):
    items = _batch(np.random.default_rng(6))
    plan = np.zeros_like(items, dtype=bool)
    plan[:, -1] = True
    out = generate_substituted(model, items, plan)
    assert out.items.dtype == np.int64 and out.logits.requires_grad


def test_discriminate_range_and_zero_head():
    m = EclsrModel(N, L, d=D, seed=9)
    for p in m.params.values():
        p.data[...] = np.random.default_rng(0).normal(0, 0.5, p.shape) if p.data.ndim > 1 else p.data
    m.item_embed.data[0] = 0
    items = _batch(np.random.default_rng(0))
    cond = encode_causal(m, items).hidden
    s = discriminate(m, items, cond).data
    assert np.all((s > 0) & (s < 1))
    m.params["cd.head.weight"].data[...] = 0
    m.params["cd.head.bias"].data[...] = 0
    assert np.all(discriminate(m, items, cond).data == 0.5)


def test_doubling_head_moves_scores_away_from_half(model):
    items = _batch(np.random.default_rng(10))
    cond = encode_causal(model, items).hidden
    feats = Tensor(discriminator_features(model, items, cond).data)
    w = model.params["cd.head.weight"]
    base = detection_scores(model, feats).data
    saved = w.data.copy()
    try:
        w.data[...] = 2 * saved
        doubled = detection_scores(model, feats).data
    finally:
        w.data[...] = saved
    assert np.all(np.abs(doubled - 0.5) >= np.abs(base - 0.5))


def test_discriminate_condition_mismatch(model):
    items = _batch(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        discriminate(model, items, Tensor(np.zeros((3, L, D + 1))))


def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "m.ckpt"
    model.save(path, {"epoch": 3})
    fresh = EclsrModel(N, L, d=D, seed=99)
    meta = fresh.load(path)
    assert meta["epoch"] == 3 and meta["model"]["d"] == D
    for name in model.params:
        assert fresh.params[name].data.tobytes() == model.params[name].data.tobytes()
    assert fresh.cd_layers[0]["attn.q.weight"] is fresh.ube_layers[0]["attn.q.weight"]
