import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eclseq import gradcheck, ops
from eclseq.checkpoint import load_into, read_blob, save_tensors, write_blob
from eclseq.optim import Adam, AdamState, adam_step
from eclseq.tensor import GraphError, ShapeError, Tensor, no_grad, parameter

GRAD_TOL = 1e-4
N_INSTANCES = 100


def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# op name -> (fn over Tensors, generator of input arrays, indices to differentiate)
def _cases():
    def shape(rng):
        return tuple(int(n) for n in rng.integers(2, 4, size=2))

    idx_rows = np.array([[0, 2, 1], [3, 3, 0]])
    cases = {
        "add": (lambda a, b: ops.add(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "add_bias": (lambda a, b: ops.add(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4,))]),
        "sub": (lambda a, b: ops.sub(a, b), lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
        "mul": (lambda a, b: ops.mul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "mul_broadcast": (lambda a, b: ops.mul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 1, 4))]),
        "div": (lambda a, b: ops.div(a, b), lambda r: [r.normal(size=(3, 3)), _pos(r, (3, 3))]),
        "matmul": (lambda a, b: ops.matmul(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "matmul_batched": (lambda a, b: ops.matmul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 3))]),
        "matmul_shared": (lambda a, b: ops.matmul(a, b), lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
        "transpose": (lambda a: ops.transpose(a, 1, 2), lambda r: [r.normal(size=(2, 3, 4))]),
        "reshape": (lambda a: ops.reshape(a, (4, 3)), lambda r: [r.normal(size=(2, 6))]),
        "embedding": (lambda w: ops.embedding(w, idx_rows), lambda r: [r.normal(size=(4, 3))]),
        "take": (lambda a: ops.take(a, (np.array([0, 1, 1]), np.array([2, 0, 2]))), lambda r: [r.normal(size=(2, 3, 2))]),
        "concat": (lambda a, b: ops.concat([a, b], axis=-1), lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "sum": (lambda a: ops.sum(a, axis=1), lambda r: [r.normal(size=(3, 4))]),
        "mean": (lambda a: ops.mean(a, axis=0), lambda r: [r.normal(size=(3, 4))]),
        "mean_all": (lambda a: ops.mean(a), lambda r: [r.normal(size=shape(r))]),
        "exp": (ops.exp, lambda r: [r.normal(size=(3, 3))]),
        "log": (ops.log, lambda r: [_pos(r, (3, 3))]),
        "sigmoid": (ops.sigmoid, lambda r: [3 * r.normal(size=(3, 3))]),
        "tanh": (ops.tanh, lambda r: [r.normal(size=(3, 3))]),
        "relu": (ops.relu, lambda r: [r.choice([-1, 1], size=(3, 3)) * r.uniform(0.1, 2, size=(3, 3))]),
        "gelu": (ops.gelu, lambda r: [2 * r.normal(size=(3, 4))]),
        "clip": (lambda a: ops.clip(a, -1.0, 1.0),
                 lambda r: [r.choice([-1, 1], size=(3, 3)) * r.choice([0.5, 1.5], size=(3, 3)) + 0.1 * r.normal(size=(3, 3))]),
        "where": (lambda a: ops.where(np.array([[True, False, True]]), a, -5.0), lambda r: [r.normal(size=(2, 3))]),
        "softmax": (ops.softmax, lambda r: [r.normal(size=(3, 5))]),
        "log_softmax": (ops.log_softmax, lambda r: [2 * r.normal(size=(3, 5))]),
        "layer_norm": (lambda x, g, b: ops.layer_norm(x, g, b),
                       lambda r: [r.normal(size=(3, 5)), r.normal(size=5), r.normal(size=5)]),
        "dropout": (lambda a: ops.dropout(a, np.array([[2.0, 0.0, 2.0], [0.0, 2.0, 2.0]])), lambda r: [r.normal(size=(2, 3))]),
        "normalize": (ops.normalize, lambda r: [r.normal(size=(3, 4))]),
        "cosine": (lambda a, b: ops.cosine_similarity(a, b), lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
        "linear": (lambda x, w, b: ops.linear(x, w, b),
                   lambda r: [r.normal(size=(2, 3)), r.normal(size=(3, 4)), r.normal(size=4)]),
    }
    return cases


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    fn, gen = CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(N_INSTANCES):
        worst = max(worst, gradcheck.check(fn, gen(rng), rng))
    assert worst < GRAD_TOL, f"{name}: relative error {worst:.2e}"


def test_chain_of_three_ops_matches_finite_differences():
    rng = np.random.default_rng(7)

    def chain(x, w):
        return ops.log_softmax(ops.gelu(ops.matmul(x, w)))

    for _ in range(N_INSTANCES):
        assert gradcheck.check(chain, [rng.normal(size=(2, 3)), rng.normal(size=(3, 4))], rng) < GRAD_TOL


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one(x):
    out = ops.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(np.isfinite(out))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10, allow_nan=False)))
def test_matmul_identity(a):
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_layer_norm_of_1_2_3_has_zero_mean_unit_variance():
    out = ops.layer_norm(Tensor([1.0, 2.0, 3.0])).data
    # oracle: (x - 2) / sqrt(2/3)
    np.testing.assert_allclose(out, np.array([-1.0, 0.0, 1.0]) / np.sqrt(2.0 / 3.0), rtol=1e-9)
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-9


def test_forward_values_match_scalar_reference():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    ref = [[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(2)] for i in range(2)]
    np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, ref, rtol=1e-12)
    x = rng.normal(size=4)
    e = [np.exp(v - x.max()) for v in x]
    np.testing.assert_allclose(ops.softmax(Tensor(x)).data, [v / sum(e) for v in e], rtol=1e-12)
    np.testing.assert_allclose(ops.sigmoid(Tensor(x)).data, [1 / (1 + np.exp(-v)) for v in x], rtol=1e-12)
    u, v = rng.normal(size=3), rng.normal(size=3)
    cos = sum(u * v) / (np.sqrt(sum(u * u)) * np.sqrt(sum(v * v)))
    np.testing.assert_allclose(ops.cosine_similarity(Tensor(u), Tensor(v)).data, cos, rtol=1e-12)


@pytest.mark.parametrize("fn,shapes", [
    (ops.matmul, [(2, 3), (2, 3)]),
    (ops.matmul, [(2, 2, 3), (3, 3, 2)]),
    (ops.add, [(2, 3), (3, 2)]),
    (ops.mul, [(4,), (3,)]),
    (ops.cosine_similarity, [(2, 3), (2, 4)]),
    (lambda a, b: ops.concat([a, b]), [(2, 3), (3, 3)]),
])
def test_shape_mismatch_names_op_and_shapes(fn, shapes):
    with pytest.raises(ShapeError) as err:
        fn(*[Tensor(np.ones(s)) for s in shapes])
    assert str(shapes[0]) in str(err.value) and str(shapes[1]) in str(err.value)


def test_square_derivative_at_three():
    x = parameter([3.0])
    ops.sum(ops.mul(x, x)).backward()
    assert x.grad[0] == 6.0


def test_softmax_cross_entropy_gradient_at_uniform_logits():
    def loss(z):
        return ops.mul(ops.take(ops.log_softmax(z), 0), -1.0)

    z = np.zeros(4)
    num = gradcheck.numeric_grads(loss, [z])[0]
    np.testing.assert_allclose(num, [-0.75, 0.25, 0.25, 0.25], atol=1e-9)
    ana = gradcheck.analytic_grads(loss, [z])[0]
    np.testing.assert_allclose(ana, [-0.75, 0.25, 0.25, 0.25], atol=1e-12)


def test_cosine_with_itself_has_zero_gradient():
    u = parameter(np.random.default_rng(1).normal(size=5))
    ops.cosine_similarity(u, u).backward()
    np.testing.assert_allclose(u.grad, 0.0, atol=1e-12)


def test_backward_rejects_non_scalar_and_detached():
    x = parameter(np.ones(3))
    with pytest.raises(GraphError, match="scalar"):
        ops.mul(x, 2.0).backward()
    with pytest.raises(GraphError, match="detached"):
        ops.sum(Tensor(np.ones(3))).backward()
    with no_grad():
        y = ops.sum(ops.mul(x, 2.0))
    with pytest.raises(GraphError, match="detached"):
        y.backward()


def test_repeated_backward_is_an_error():
    x = parameter(np.ones(3))
    loss = ops.sum(ops.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError, match="consumed"):
        loss.backward()
    # a fresh graph on a leaf that still holds a gradient is refused too
    with pytest.raises(GraphError, match="accumulation"):
        ops.sum(ops.mul(x, x)).backward()
    x.zero_grad()
    ops.sum(ops.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_shared_leaf_gradients_sum_within_one_backward():
    x = parameter([2.0])
    ops.sum(ops.add(ops.mul(x, x), ops.mul(x, 3.0))).backward()
    assert x.grad[0] == 7.0


def test_dropout_fixed_mask_is_reproducible():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    m1 = ops.dropout_mask(np.random.default_rng(5), x.shape, 0.3)
    m2 = ops.dropout_mask(np.random.default_rng(5), x.shape, 0.3)
    np.testing.assert_array_equal(ops.dropout(x, m1).data, ops.dropout(x, m2).data)


@pytest.mark.parametrize("rate", [0.1, 0.2, 0.5])
def test_dropout_zero_fraction_matches_rate(rate):
    mask = ops.dropout_mask(np.random.default_rng(11), (100_000,), rate)
    assert abs((mask == 0).mean() - rate) <= 0.01
    # inverted scaling keeps the mean
    assert abs(mask.mean() - 1.0) < 0.02


def test_values_stay_finite_for_extreme_inputs():
    x = Tensor(np.array([[-800.0, 0.0, 800.0]]))
    for fn in (ops.softmax, ops.log_softmax, ops.sigmoid, ops.layer_norm, ops.normalize):
        assert np.all(np.isfinite(fn(x).data))


def test_adam_zero_gradient_leaves_params():
    p = {"w": parameter(np.array([1.0, -2.0]))}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_moves_by_lr():
    p = {"w": parameter(np.array([0.0]))}
    state = AdamState()
    adam_step(p, {"w": np.ones(1)}, state, lr=0.1, beta1=0.9, beta2=0.999)
    # bias-corrected m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    adam_step(p, {"w": np.ones(1)}, state, lr=0.1)
    assert p["w"].data[0] == pytest.approx(-0.2, abs=1e-7)


def test_adam_identical_params_identical_trajectories():
    rng = np.random.default_rng(0)
    p = {"a": parameter([0.5]), "b": parameter([0.5])}
    opt = Adam(p, lr=0.01)
    for _ in range(20):
        g = rng.normal(size=1)
        p["a"].grad, p["b"].grad = g.copy(), g.copy()
        opt.step()
        opt.zero_grad()
    assert p["a"].data[0] == p["b"].data[0]


def test_adam_shape_mismatch():
    p = {"w": parameter(np.zeros(3))}
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=0.0)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": parameter(rng.normal(size=(3, 4))), "b.c": parameter(np.array([np.pi, -0.0, 1e-300]))}
    tensors["alias"] = tensors["a"]
    path = tmp_path / "x.ckpt"
    save_tensors(path, tensors, {"note": "hi"})
    fresh = {k: parameter(np.zeros_like(v.data)) for k, v in tensors.items()}
    meta = load_into(path, fresh)
    assert meta["note"] == "hi"
    for k in tensors:
        assert fresh[k].data.tobytes() == tensors[k].data.tobytes()
    arrays, _ = read_blob(path)
    assert set(arrays) == {"a", "b.c"}  # alias stored once


def test_checkpoint_layout_is_manifest_then_little_endian(tmp_path):
    path = tmp_path / "y.bin"
    write_blob(path, {"v": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw.endswith(np.array([1.0, 2.0], dtype="<f8").tobytes())
    assert b'"offset":0' in raw and b'"dtype":"float64"' in raw
