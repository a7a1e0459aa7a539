"""Finite-difference cases for every differentiable op, shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from convmfit.numerics import (
    LSTMLayer,
    Tensor,
    bce_loss,
    ce_loss,
    check_gradients,
    concat,
    exp,
    log,
    lstm_cell,
    lstm_sequence,
    lstm_sequence_reference,
    masked_max,
    masked_softmax,
    matmul,
    mean,
    relu,
    reshape,
    sigmoid,
    softmax,
    take_rows,
    tanh,
    transpose,
    tsum,
)

TOL = 1e-4


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weights(rng, shape):
    # a fixed random projection turns any output into a scalar loss with
    # non-trivial upstream gradients
    return rng.normal(size=shape)


def op_cases(rng: np.random.Generator):
    """Yield (name, loss_fn, named tensors) with random small shapes."""
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    w = _weights(rng, (3, 4))
    yield "add", lambda: tsum((a + b) * w), [("a", a), ("b", b)]
    yield "sub", lambda: tsum((a - b) * w), [("a", a), ("b", b)]
    yield "mul", lambda: tsum(a * b * w), [("a", a), ("b", b)]
    c = _t(rng, 3, 4, lo=0.5, hi=2.0)
    yield "div", lambda: tsum(a / c * w), [("a", a), ("c", c)]
    yield "neg", lambda: tsum(-a * w), [("a", a)]
    yield "exp", lambda: tsum(exp(a) * w), [("a", a)]
    yield "log", lambda: tsum(log(c) * w), [("c", c)]
    yield "sigmoid", lambda: tsum(sigmoid(a) * w), [("a", a)]
    yield "tanh", lambda: tsum(tanh(a) * w), [("a", a)]
    # keep entries away from the kink so central differences are exact
    r = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    yield "relu", lambda: tsum(relu(r) * w), [("r", r)]
    bb = _t(rng, 4)
    yield "broadcast-add", lambda: tsum((a + bb) * w), [("a", a), ("bias", bb)]
    yield "reshape", lambda: tsum(reshape(a, (4, 3)) * w.reshape(4, 3)), [("a", a)]
    yield "transpose", lambda: tsum(transpose(a) * w.T), [("a", a)]
    yield "getitem", lambda: tsum(a[1:, ::2] * w[1:, ::2]), [("a", a)]
    yield "concat", lambda: tsum(concat([a, b], axis=1) * _weights(np.random.default_rng(5), (3, 8))), \
        [("a", a), ("b", b)]
    table = _t(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 2]])
    wt = _weights(rng, (2, 3, 3))
    yield "take_rows", lambda: tsum(take_rows(table, ids) * wt), [("table", table)]
    yield "sum-axis", lambda: tsum(tsum(a, axis=0) * w[0]), [("a", a)]
    yield "mean", lambda: tsum(mean(a, axis=1) * w[:, 0]), [("a", a)]
    mm = Tensor(np.arange(24, dtype=float).reshape(2, 3, 4) * 0.1 + rng.uniform(0, 0.01, (2, 3, 4)),
                requires_grad=True)
    mmask = np.array([[True, True, False], [True, False, False]])[:, :, None]
    yield "masked_max", lambda: tsum(masked_max(mm, mmask, axis=1) * _weights(np.random.default_rng(6), (2, 4))), \
        [("x", mm)]
    m1, m2 = _t(rng, 3, 4), _t(rng, 4, 2)
    yield "matmul", lambda: tsum(matmul(m1, m2) * _weights(np.random.default_rng(7), (3, 2))), \
        [("a", m1), ("b", m2)]
    m3 = _t(rng, 2, 3, 4)
    yield "matmul-batched", lambda: tsum(matmul(m3, m2) * _weights(np.random.default_rng(8), (2, 3, 2))), \
        [("a", m3), ("b", m2)]
    yield "softmax", lambda: tsum(softmax(a) * w), [("a", a)]
    smask = np.array([[True, True, False, True], [True, False, False, False], [True, True, True, True]])
    yield "masked_softmax", lambda: tsum(masked_softmax(a, smask) * w), [("a", a)]
    p = Tensor(rng.uniform(0.05, 0.95, size=(3, 5)), requires_grad=True)
    y = (rng.random((3, 5)) < 0.5).astype(float)
    yield "bce_loss", lambda: bce_loss(p, y), [("p", p)]
    logits = _t(rng, 2, 3, 6)
    targets = rng.integers(0, 6, size=(2, 3))
    valid = np.array([[True, True, False], [True, False, False]])
    yield "ce_loss", lambda: ce_loss(logits, targets, valid), [("logits", logits)]
    yield "ce_loss-sum", lambda: ce_loss(logits, targets, valid, reduction="sum"), [("logits", logits)]

    layer = LSTMLayer(3, 4, rng)
    x1, h1, c1 = _t(rng, 2, 3), _t(rng, 2, 4), _t(rng, 2, 4)
    wl = _weights(rng, (2, 4))
    named = [("x", x1), ("h", h1), ("c", c1)] + list(layer.named_parameters())
    yield "lstm_cell", lambda: tsum(lstm_cell(x1, h1, c1, layer.params)[0] * wl) + \
        tsum(lstm_cell(x1, h1, c1, layer.params)[1] * wl), named
    xs = _t(rng, 2, 5, 3)
    h0, c0 = _t(rng, 2, 4), _t(rng, 2, 4)
    smask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    wy = _weights(rng, (2, 5, 4))
    named = [("x", xs), ("h0", h0), ("c0", c0)] + list(layer.named_parameters())

    def seq_loss(fn):
        def f():
            ys, hT, cT = fn(xs, layer.params, h0, c0, smask)
            return tsum(ys * wy) + tsum(hT * wl) + tsum(cT * wl)
        return f

    yield "lstm_sequence", seq_loss(lstm_sequence), named
    yield "lstm_sequence_reference", seq_loss(lstm_sequence_reference), named


def run_op_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error per op."""
    rng = np.random.default_rng(seed)
    return {name: max(check_gradients(fn, named).values()) for name, fn, named in op_cases(rng)}
