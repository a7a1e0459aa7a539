import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from convmfit.numerics import (
    Adam,
    AdamState,
    DropoutSpec,
    Graph,
    LSTMLayer,
    LSTMParams,
    NumericError,
    ShapeError,
    Tensor,
    activation,
    adam_step,
    backward,
    bce_loss,
    ce_loss,
    embed_with_dropout,
    embedding_dropout_mask,
    lstm_cell,
    lstm_sequence,
    lstm_sequence_reference,
    masked_softmax,
    matmul,
    no_grad,
    sigmoid,
    softmax,
    tsum,
    variational_dropout_mask,
)
from convmfit.numerics.module import Dense, Module

from gradsuite import TOL, op_cases


# -- tensors and backward ----------------------------------------------------------------

def test_tensor_grad_starts_at_zero():
    t = Tensor(np.ones((2, 3)), requires_grad=True)
    assert t.grad.shape == t.shape
    assert not t.grad.any()


def test_backward_linear_and_quadratic():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(tsum(x))
    assert np.array_equal(x.grad, np.ones(3))
    x.zero_grad()
    backward(tsum(x * x))
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_unreachable_grad_untouched():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    y.grad[...] = 7.0
    backward(tsum(x * 3.0))
    assert np.array_equal(y.grad, [7.0, 7.0])


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    loss = tsum(sigmoid(x * 2.0) + x)
    g = Graph.from_loss(loss)
    seen = set()
    # each node's inputs' producers come before it
    for node in g.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert id(inp.node) in seen
        seen.add(id(node))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert y.node is None


# -- op examples ---------------------------------------------------------------------------

def test_matmul_examples():
    eye = Tensor(np.eye(2))
    m = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(matmul(eye, m).data, m.data)
    proj = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(matmul(proj, b).data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_activation_examples():
    assert activation(Tensor(np.array([0.0])), "sigmoid").data[0] == 0.5
    s = activation(Tensor(np.array([2.0, 2.0, 2.0])), "softmax").data
    assert np.allclose(s, 1 / 3, atol=1e-15)
    s = softmax(Tensor(np.array([0.0, math.log(3.0)]))).data
    assert np.allclose(s, [0.25, 0.75], atol=1e-15)


def test_softmax_large_logits_are_finite():
    s = softmax(Tensor(np.array([1000.0, 1001.0, -1000.0]))).data
    assert np.all(np.isfinite(s))
    assert abs(s.sum() - 1.0) < 1e-12


def test_sigmoid_extremes_are_finite():
    s = sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.array_equal(s, [0.0, 1.0]) or np.all(np.isfinite(s))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(x):
    s = softmax(Tensor(x)).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.data())
def test_masked_softmax_zero_on_masked(rows, cols, data):
    x = data.draw(hnp.arrays(np.float64, (rows, cols), elements=st.floats(-20, 20)))
    mask = data.draw(hnp.arrays(np.bool_, (rows, cols)))
    mask[:, 0] = True
    s = masked_softmax(Tensor(x), mask).data
    assert np.all(s[~mask] == 0.0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-9)


def test_masked_softmax_single_position_gets_all_weight():
    mask = np.array([[False, True, False]])
    s = masked_softmax(Tensor(np.array([[3.0, -4.0, 9.0]])), mask).data
    assert np.array_equal(s, [[0.0, 1.0, 0.0]])


def test_masked_softmax_rejects_empty_row():
    with pytest.raises(ShapeError):
        masked_softmax(Tensor(np.zeros((1, 3))), np.zeros((1, 3), dtype=bool))


def test_lstm_cell_zero_case():
    layer = LSTMLayer(3, 4, np.random.default_rng(0))
    for t in layer.parameters():
        t.data[...] = 0.0
    z = Tensor(np.zeros((1, 4)))
    h, c = lstm_cell(Tensor(np.zeros((1, 3))), z, z, layer.params)
    assert not h.data.any() and not c.data.any()


def test_lstm_cell_memory_passthrough():
    rng = np.random.default_rng(1)
    layer = LSTMLayer(3, 4, rng)
    b = layer.b.data
    b[0:4] = -50.0  # input gate closed
    b[4:8] = 50.0  # forget gate open
    c0 = Tensor(rng.normal(size=(2, 4)))
    _, c1 = lstm_cell(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 4))), c0, layer.params)
    assert np.allclose(c1.data, c0.data, atol=1e-12)


def test_lstm_shape_error():
    layer = LSTMLayer(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        lstm_sequence(Tensor(np.zeros((1, 2, 5))), layer.params)


def test_fused_lstm_matches_reference():
    rng = np.random.default_rng(3)
    layer = LSTMLayer(5, 6, rng)
    x = Tensor(rng.normal(size=(3, 7, 5)))
    mask = np.ones((3, 7), dtype=bool)
    mask[1, 4:] = False
    mask[2, 1:] = False
    ys, h, c = lstm_sequence(x, layer.params, mask=mask)
    ys_r, h_r, c_r = lstm_sequence_reference(x, layer.params, mask=mask)
    assert np.allclose(ys.data, ys_r.data, atol=1e-13)
    assert np.allclose(h.data, h_r.data, atol=1e-13)
    assert np.allclose(c.data, c_r.data, atol=1e-13)
    assert not ys.data[1, 4:].any()


def test_lstm_masked_steps_carry_state():
    rng = np.random.default_rng(4)
    layer = LSTMLayer(2, 3, rng)
    x = Tensor(rng.normal(size=(1, 5, 2)))
    full = lstm_sequence(Tensor(x.data[:, :3]), layer.params)
    masked = lstm_sequence(x, layer.params, mask=np.array([[1, 1, 1, 0, 0]], dtype=bool))
    assert np.array_equal(full[1].data, masked[1].data)


def test_bce_examples():
    assert abs(bce_loss(Tensor(np.array([0.5])), [1.0]).item() - math.log(2)) < 1e-15
    assert bce_loss(Tensor(np.array([1.0, 0.0])), [1.0, 0.0]).item() < 1e-11
    val = bce_loss(Tensor(np.array([0.9, 0.1])), [1.0, 0.0]).item()
    assert abs(val - (-(math.log(0.9) + math.log(0.9)) / 2)) < 1e-15


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(Tensor(np.full(3, 0.5)), np.ones(2))


def test_ce_examples():
    assert abs(ce_loss(Tensor(np.zeros((4, 10))), np.arange(4)).item() - math.log(10)) < 1e-12
    logits = np.zeros((2, 5))
    logits[0, 3] = logits[1, 1] = 100.0
    assert ce_loss(Tensor(logits), np.array([3, 1])).item() < 1e-40
    with pytest.raises(ValueError, match="empty loss"):
        ce_loss(Tensor(np.zeros((2, 5))), np.array([1, 2]), np.zeros(2, dtype=bool))
    with pytest.raises(ValueError, match="out of range"):
        ce_loss(Tensor(np.zeros((2, 5))), np.array([1, 5]))


@pytest.mark.parametrize("case", [c[0] for c in op_cases(np.random.default_rng(0))])
def test_op_gradients(case):
    from convmfit.numerics import check_gradients

    for name, fn, named in op_cases(np.random.default_rng(0)):
        if name == case:
            errs = check_gradients(fn, named)
            assert max(errs.values()) < TOL, errs


def test_matmul_gradient_tight():
    from convmfit.numerics import check_gradients

    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    errs = check_gradients(lambda: tsum(matmul(a, b)), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


# -- dropout ---------------------------------------------------------------------------------

def test_dropout_rate_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        variational_dropout_mask(4, 1.0, rng)
    with pytest.raises(ValueError):
        embedding_dropout_mask(4, 1.2, rng)
    with pytest.raises(ValueError):
        DropoutSpec("variational", -0.1)


def test_zero_rate_is_identity():
    rng = np.random.default_rng(0)
    assert np.array_equal(variational_dropout_mask(6, 0.0, rng), np.ones(6))
    assert np.array_equal(embedding_dropout_mask(6, 0.0, rng), np.ones(6))


def test_variational_mask_constant_over_time():
    x = Tensor(np.ones((3, 5, 4)))
    y = DropoutSpec("variational", 0.5).apply(x, np.random.default_rng(2)).data
    for t in range(5):
        assert np.array_equal(y[:, t], y[:, 0])


def test_variational_mask_mean():
    m = variational_dropout_mask(100_000, 0.5, np.random.default_rng(0))
    assert abs(m.mean() - 1.0) < 0.02
    assert set(np.unique(m)) <= {0.0, 2.0}


def test_embedding_dropout_whole_rows():
    table = Tensor(np.random.default_rng(0).normal(size=(20, 4)))
    ids = np.array([[1, 2, 1, 3], [2, 1, 5, 1]])
    rng = np.random.default_rng(7)
    mask = embedding_dropout_mask(20, 0.5, np.random.default_rng(7))
    out = embed_with_dropout(table, ids, 0.5, True, rng).data
    for tok in np.unique(ids):
        rows = out[ids == tok]
        assert all(np.array_equal(r, rows[0]) for r in rows)
        expect = table.data[tok] * mask[tok]
        assert np.allclose(rows[0], expect)


def test_embedding_dropout_fraction():
    rng = np.random.default_rng(0)
    frac = np.mean([np.mean(embedding_dropout_mask(1000, 0.2, rng) == 0) for _ in range(1000)])
    assert abs(frac - 0.2) < 0.03


def test_eval_mode_dropout_is_bitwise_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    for kind in ("standard", "variational"):
        y = DropoutSpec(kind, 0.5, active=False).apply(x, None)
        assert np.array_equal(y.data, x.data)
    table = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    ids = np.array([[0, 4, 2]])
    assert np.array_equal(embed_with_dropout(table, ids, 0.5, False, None).data, table.data[ids])


def test_active_dropout_needs_rng():
    with pytest.raises(ValueError):
        DropoutSpec("standard", 0.5).apply(Tensor(np.ones(3)), None)


def test_dropout_masks_deterministic():
    a = variational_dropout_mask(50, 0.3, np.random.default_rng(9), batch=2)
    b = variational_dropout_mask(50, 0.3, np.random.default_rng(9), batch=2)
    assert np.array_equal(a, b)


# -- Adam --------------------------------------------------------------------------------------

def test_adam_first_step_moves_by_lr_sign():
    for g in (3.0, -0.002):
        p = {"x": np.array([1.0])}
        st_ = adam_step(p, {"x": np.array([g])}, AdamState())
        assert abs(p["x"][0] - (1.0 - 1e-3 * np.sign(g))) < 1e-8
        assert st_.t == 1


def test_adam_zero_grad_keeps_params_and_counts_step():
    p = {"x": np.array([1.0, 2.0])}
    st_ = adam_step(p, {"x": np.zeros(2)}, AdamState())
    assert np.array_equal(p["x"], [1.0, 2.0])
    assert st_.t == 1


def test_adam_converges_on_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([("x", x)], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        d = x - 3.0
        backward(tsum(d * d))
        opt.step()
    assert abs(x.data[0] - 3.0) < 0.05


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(5)]
    p = {"x": x0.copy()}
    st_ = AdamState()
    for g in grads:
        adam_step(p, {"x": g}, st_)
    m = np.zeros(4)
    v = np.zeros(4)
    x = x0.copy()
    for k, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 1e-3 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    assert np.allclose(p["x"], x, rtol=0, atol=1e-15)


def test_adam_frozen_skips_moments():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st_ = AdamState()
    adam_step(p, {"a": np.ones(2), "b": np.ones(2)}, st_, frozen={"b"})
    assert "b" not in st_.m and np.array_equal(p["b"], np.ones(2))
    assert st_.counts["a"] == 1


def test_adam_nan_gradient_aborts():
    p = {"a": np.ones(2)}
    with pytest.raises(NumericError, match="non-finite gradient"):
        adam_step(p, {"a": np.array([1.0, np.nan])}, AdamState())
    assert np.array_equal(p["a"], np.ones(2))


def test_adam_state_dict_roundtrip():
    x = Tensor(np.array([0.5, -0.5]), requires_grad=True)
    opt = Adam([("x", x)])
    x.grad[...] = [1.0, 2.0]
    opt.step()
    other = Adam([("x", x)])
    other.load_state_dict(opt.state_dict())
    assert other.state.t == 1 and np.array_equal(other.state.m["x"], opt.state.m["x"])


# -- modules -------------------------------------------------------------------------------

def test_module_state_dict_roundtrip_and_strictness():
    rng = np.random.default_rng(0)
    a, b = Dense(3, 2, rng), Dense(3, 2, rng)
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))
    with pytest.raises(KeyError):
        b.load_state_dict({"w": a.w.data})
    with pytest.raises(ValueError):
        b.load_state_dict({"w": np.zeros((2, 2)), "b": np.zeros(2)})


def test_shared_param_is_deduplicated():
    m = Module()
    t = m.add_param("w", np.ones(3))
    m.share_param("w_alias", t)
    assert len(m.parameters()) == 1


def test_lstm_param_count():
    layer = LSTMLayer(7, 5, np.random.default_rng(0))
    assert sum(t.data.size for t in layer.parameters()) == LSTMLayer.count(7, 5) == 4 * 5 * (7 + 5 + 1)


def test_lstm_init_ranges():
    layer = LSTMLayer(16, 8, np.random.default_rng(0))
    assert np.abs(layer.w_ih.data).max() <= 1 / 4
    assert np.abs(layer.w_hh.data).max() <= 1 / math.sqrt(8)
    assert np.array_equal(layer.b.data[8:16], np.ones(8))
    assert not layer.b.data[:8].any() and not layer.b.data[16:].any()


def test_float32_precision_is_kept():
    layer = LSTMLayer(3, 4, np.random.default_rng(0), dtype=np.float32)
    x = Tensor(np.ones((1, 2, 3), dtype=np.float32))
    ys, _, _ = lstm_sequence(x, layer.params)
    assert ys.dtype == np.float32
    assert isinstance(layer.params, LSTMParams)
