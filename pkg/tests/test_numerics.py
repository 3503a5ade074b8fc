import math

import numpy as np
import pytest

from kpgen import numerics as nx
from kpgen.errors import DimensionError, NumericError
from kpgen.numerics import AdamState, LSTMWeights, Tensor, Tape

from _util import central_diff, rel_err

SEEDS = range(20)


def check_op(op, shapes, seed, tol=1e-4, positive=False, n_out=1):
    """Compare tape gradients of sum(w * op(...)) with central differences."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*tensors)
    outs = out if isinstance(out, tuple) else (out,)
    weights = [rng.normal(size=o.shape) for o in outs]
    with Tape() as tape:
        out = op(*tensors)
        outs = out if isinstance(out, tuple) else (out,)
        total = None
        for o, w in zip(outs, weights):
            term = nx.tsum(o * w)
            total = term if total is None else total + term
    grads = tape.gradient(total, tensors)

    def f():
        res = op(*[Tensor(a) for a in arrays])
        res = res if isinstance(res, tuple) else (res,)
        return sum(float(np.sum(r.data * w)) for r, w in zip(res, weights))

    for a, g in zip(arrays, grads):
        assert g.shape == a.shape
        for idx in np.ndindex(a.shape):
            assert rel_err(g[idx], central_diff(f, a, idx)) < tol, idx


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_ops_gradients(seed):
    check_op(nx.add, [(3, 4), (4,)], seed, tol=1e-6)
    check_op(nx.sub, [(2, 3), (2, 3)], seed, tol=1e-6)
    check_op(nx.mul, [(2, 3), (1, 3)], seed, tol=1e-6)
    check_op(nx.neg, [(5,)], seed, tol=1e-6)
    check_op(lambda a: nx.tsum(a, axis=1), [(2, 3, 2)], seed, tol=1e-6)
    check_op(lambda a: nx.tsum(a, axis=0, keepdims=True), [(3, 2)], seed, tol=1e-6)
    check_op(lambda a: nx.reshape(a, (3, 2)), [(2, 3)], seed, tol=1e-6)
    check_op(nx.swap_last, [(2, 3, 4)], seed, tol=1e-6)
    check_op(lambda a, b: nx.concat([a, b], axis=-1), [(2, 3), (2, 1)], seed, tol=1e-6)
    check_op(lambda a, b: nx.stack([a, b], axis=1), [(2, 3), (2, 3)], seed, tol=1e-6)
    check_op(lambda a: nx.unstack(a, axis=1), [(2, 3, 2)], seed, tol=1e-6, n_out=3)
    check_op(lambda a: a[1:, ::2], [(3, 4)], seed, tol=1e-6)
    check_op(lambda t: nx.embedding(t, np.array([[0, 2], [2, 1]])), [(3, 2)], seed, tol=1e-6)
    check_op(lambda a: nx.gather_last(a, np.array([[[0], [2]], [[1], [1]]])), [(2, 2, 3)], seed, tol=1e-6)
    check_op(nx.matmul, [(2, 3), (3, 4)], seed, tol=1e-6)
    check_op(nx.matmul, [(2, 2, 3), (3, 4)], seed, tol=1e-6)
    check_op(nx.matmul, [(2, 2, 3), (2, 3, 4)], seed, tol=1e-6)


@pytest.mark.parametrize("seed", SEEDS)
def test_nonlinear_ops_gradients(seed):
    check_op(nx.div, [(2, 3), (2, 3)], seed, positive=True)
    check_op(nx.exp, [(4,)], seed)
    check_op(nx.log, [(4,)], seed, positive=True)
    check_op(nx.tanh, [(2, 3)], seed)
    check_op(nx.sigmoid, [(2, 3)], seed)
    check_op(lambda a: nx.clamp(a, -0.5, 0.5), [(6,)], seed)
    check_op(lambda a: nx.softmax(a, axis=-1), [(2, 5)], seed)
    check_op(lambda a: nx.softmax(a, axis=0), [(4, 2)], seed)
    mask = np.array([[1, 1, 0, 1], [1, 0, 0, 0]])
    check_op(lambda a: nx.softmax(a, axis=-1, mask=mask), [(2, 4)], seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_lstm_cell_gradients(seed):
    rng = np.random.default_rng(1000 + seed)
    mask = (rng.random((3, 1)) > 0.4).astype(float)

    def op(x, h, c, wx, wh, b):
        return nx.lstm_cell(x, h, c, LSTMWeights(wx, wh, b))

    def op_masked(x, h, c, wx, wh, b):
        return nx.lstm_cell(x, h, c, LSTMWeights(wx, wh, b), mask=mask)

    shapes = [(3, 2), (3, 3), (3, 3), (2, 12), (3, 12), (12,)]
    check_op(op, shapes, seed, n_out=2)
    check_op(op_masked, shapes, seed, n_out=2)


def test_lstm_cell_scalar_hand_oracle():
    # d = 1, n_in = 1: every gate is a scalar we can evaluate by hand
    x, h0, c0 = 0.5, -0.2, 0.3
    wx = np.array([[0.1, 0.2, 0.3, 0.4]])
    wh = np.array([[-0.1, 0.5, -0.3, 0.2]])
    b = np.array([0.0, 1.0, 0.0, -0.5])
    z = x * wx[0] + h0 * wh[0] + b
    sig = lambda v: 1 / (1 + math.exp(-v))
    i, f, g, o = sig(z[0]), sig(z[1]), math.tanh(z[2]), sig(z[3])
    c1 = f * c0 + i * g
    h1 = o * math.tanh(c1)
    h, c = nx.lstm_cell(Tensor([[x]]), Tensor([[h0]]), Tensor([[c0]]),
                        LSTMWeights(Tensor(wx), Tensor(wh), Tensor(b)))
    assert h.item() == pytest.approx(h1, abs=1e-15)
    assert c.item() == pytest.approx(c1, abs=1e-15)


def test_lstm_zero_weights_gives_half_gates():
    d = 3
    w = LSTMWeights(Tensor(np.zeros((2, 4 * d))), Tensor(np.zeros((d, 4 * d))), Tensor(np.zeros(4 * d)))
    c0 = np.array([[1.0, -2.0, 0.5]])
    h, c = nx.lstm_cell(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, d))), Tensor(c0), w)
    np.testing.assert_allclose(c.data, 0.5 * c0)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0))


def test_lstm_mask_freezes_state():
    rng = np.random.default_rng(3)
    w = LSTMWeights(Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=8)))
    h0, c0 = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    h, c = nx.lstm_cell(Tensor(rng.normal(size=(2, 2))), Tensor(h0), Tensor(c0), w, mask=np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(h.data[1], h0[1])
    np.testing.assert_array_equal(c.data[1], c0[1])
    assert not np.allclose(h.data[0], h0[0])


def test_lstm_shape_errors():
    w = LSTMWeights(Tensor(np.zeros((2, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
    with pytest.raises(DimensionError):
        nx.lstm_cell(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), w)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_properties(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=30, size=(4, 7))
    p = nx.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(-1), 1, atol=1e-12)
    assert (p >= 0).all()
    # shift invariance
    np.testing.assert_allclose(nx.softmax(Tensor(x + 123.0)).data, p, atol=1e-12)
    mask = rng.random((4, 7)) > 0.5
    mask[:, 0] = True
    pm = nx.softmax(Tensor(x), mask=mask).data
    assert (pm[~mask] == 0).all()
    np.testing.assert_allclose(pm.sum(-1), 1, atol=1e-12)


def test_softmax_extreme_logits_finite():
    p = nx.softmax(Tensor([1e4, -1e4, 0.0])).data
    assert np.isfinite(p).all()
    assert p[0] == 1.0


def test_softmax_empty_raises():
    with pytest.raises(DimensionError):
        nx.softmax(Tensor(np.zeros((2, 0))))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_embedding_out_of_range():
    with pytest.raises(DimensionError):
        nx.embedding(Tensor(np.zeros((3, 2))), np.array([3]))


def test_sigmoid_stable_at_extremes():
    s = nx.sigmoid(Tensor([-800.0, 0.0, 800.0])).data
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_gradient_accumulates_over_reuse():
    w = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = w * w + w * 2.0
    assert tape.gradient(y, [w])[0][0] == 8.0


def test_gradient_of_unused_source_is_zero():
    a, b = Tensor([1.0], requires_grad=True), Tensor([2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = a * 2.0
    ga, gb = tape.gradient(y, [a, b])
    assert ga[0] == 2.0
    np.testing.assert_array_equal(gb, [0.0, 0.0])


def test_nonscalar_target_needs_seed():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = a * 3.0
    with pytest.raises(DimensionError):
        tape.gradient(y, [a])
    np.testing.assert_array_equal(tape.gradient(y, [a], seed=np.array([1.0, -1.0]))[0], [3.0, -3.0])


def test_no_recording_outside_tape():
    with Tape() as tape:
        pass
    nx.exp(Tensor([1.0], requires_grad=True))
    assert len(tape) == 0


def test_debug_mode_flags_nan():
    nx.set_debug(True)
    try:
        with pytest.raises(NumericError), np.errstate(invalid="ignore"):
            nx.log(Tensor([-1.0]))
    finally:
        nx.set_debug(False)


# Adam ----------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_times_sign():
    # with bias correction the first update is lr * g / (|g| + eps)
    params = {"w": np.array([1.0, -1.0, 0.5])}
    grads = {"w": np.array([0.3, -2.0, 0.0])}
    new, state = nx.adam_step(params, grads, AdamState(lr=0.1, eps=0.0 + 1e-12))
    np.testing.assert_allclose(new["w"], [0.9, -0.9, 0.5], atol=1e-9)
    assert state.t == 1


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = rng.normal(size=4)
    m = v = np.zeros(4)
    params, state = {"p": p.copy()}, AdamState(lr=0.01)
    for t in range(1, 6):
        g = rng.normal(size=4)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        p = p - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        params, state = nx.adam_step(params, {"p": g}, state)
    np.testing.assert_allclose(params["p"], p, rtol=1e-12)


def test_adam_leaves_inputs_untouched():
    params = {"w": np.ones(3)}
    grads = {"w": np.ones(3)}
    state = AdamState()
    nx.adam_step(params, grads, state)
    np.testing.assert_array_equal(params["w"], np.ones(3))
    assert state.t == 0 and not state.m


def test_adam_name_and_shape_checks():
    with pytest.raises(DimensionError):
        nx.adam_step({"a": np.ones(2)}, {"b": np.ones(2)}, AdamState())
    with pytest.raises(DimensionError):
        nx.adam_step({"a": np.ones(2)}, {"a": np.ones(3)}, AdamState())


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = nx.clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert nx.global_norm(clipped) == pytest.approx(1.0)
    same, _ = nx.clip_by_global_norm(grads, 10.0)
    assert same is grads
    with pytest.raises(NumericError):
        nx.clip_by_global_norm({"a": np.array([np.nan])}, 1.0)


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    a = nx.softmax(Tensor(x) @ Tensor(x.T)).data
    b = nx.softmax(Tensor(x) @ Tensor(x.T)).data
    assert a.tobytes() == b.tobytes()


# worked cases ---------------------------------------------------------------

def test_matmul_worked_cases():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    np.testing.assert_array_equal((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_softmax_worked_cases():
    np.testing.assert_array_equal(nx.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    z = np.array([1.0, 2.0, 3.0])
    direct = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(nx.softmax(Tensor(z)).data, direct, atol=1e-7)


def test_lstm_all_zero_gives_zero_state():
    d = 2
    w = LSTMWeights(Tensor(np.zeros((3, 4 * d))), Tensor(np.zeros((d, 4 * d))), Tensor(np.zeros(4 * d)))
    z = Tensor(np.zeros((1, d)))
    h, c = nx.lstm_cell(Tensor(np.zeros((1, 3))), z, z, w)
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.5, -2.0])}
    new, _ = nx.adam_step(params, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(new["w"], params["w"])


def test_adam_unit_gradient_first_step():
    new, _ = nx.adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(lr=0.001))
    assert new["w"][0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(11)
        params, state = {"w": rng.normal(size=(3, 2)).astype(np.float32)}, AdamState()
        for _ in range(5):
            params, state = nx.adam_step(params, {"w": rng.normal(size=(3, 2)).astype(np.float32)}, state)
        return params["w"].tobytes()
    assert run() == run()
