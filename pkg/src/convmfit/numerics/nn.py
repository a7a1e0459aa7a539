"""Recurrent cells, fused sequence kernels and losses built on autodiff."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    _sigmoid,
    concat,
    log_softmax_np,
    make_multi_op,
    make_op,
    matmul,
    mul,
    sigmoid,
    tanh,
)

PROB_EPS = 1e-12


@dataclass
class LSTMParams:
    """Weights of one LSTM layer; gate blocks are ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [input, 4*hidden]
    w_hh: Tensor  # [hidden, 4*hidden]
    b: Tensor  # [4*hidden]

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[0]


def _check_lstm_shapes(x_dim: int, p: LSTMParams) -> None:
    h = p.hidden_size
    if p.w_ih.shape != (x_dim, 4 * h) or p.w_hh.shape != (h, 4 * h) or p.b.shape != (4 * h,):
        raise ShapeError(
            f"LSTM parameter shapes {p.w_ih.shape}, {p.w_hh.shape}, {p.b.shape} "
            f"do not fit input {x_dim} / hidden {h}"
        )


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, p: LSTMParams) -> tuple[Tensor, Tensor]:
    """One LSTM step composed from primitive ops (reference path)."""
    _check_lstm_shapes(x.shape[-1], p)
    hs = p.hidden_size
    if h.shape[-1] != hs or c.shape[-1] != hs:
        raise ShapeError(f"state width {h.shape[-1]}/{c.shape[-1]} != hidden {hs}")
    z = matmul(x, p.w_ih) + matmul(h, p.w_hh) + p.b
    i = sigmoid(z[..., 0:hs])
    f = sigmoid(z[..., hs:2 * hs])
    g = tanh(z[..., 2 * hs:3 * hs])
    o = sigmoid(z[..., 3 * hs:4 * hs])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


def lstm_sequence(
    x: Tensor,
    p: LSTMParams,
    h0: Tensor | None = None,
    c0: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Run an LSTM over ``x`` [B, T, I] as a single fused graph node.

    Where ``mask[b, t]`` is False the state is carried through unchanged and
    the output is zero, so right-padded rows end with the state of their last
    real token.  Returns ``(outputs [B,T,H], h_T, c_T)``.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence expects [B, T, I], got {x.shape}")
    bsz, steps, in_dim = x.shape
    _check_lstm_shapes(in_dim, p)
    hs = p.hidden_size
    dt = x.dtype
    if h0 is None:
        h0 = Tensor(np.zeros((bsz, hs), dtype=dt))
    if c0 is None:
        c0 = Tensor(np.zeros((bsz, hs), dtype=dt))
    m = np.ones((bsz, steps), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)

    w_hh = p.w_hh.data
    xw = x.data @ p.w_ih.data + p.b.data  # [B, T, 4H]
    ys = np.zeros((bsz, steps, hs), dtype=dt)
    cache_gates = np.empty((steps, bsz, 4 * hs), dtype=dt)
    cache_tc = np.empty((steps, bsz, hs), dtype=dt)
    cache_h = np.empty((steps, bsz, hs), dtype=dt)
    cache_c = np.empty((steps, bsz, hs), dtype=dt)
    h, c = h0.data, c0.data
    for t in range(steps):
        cache_h[t] = h
        cache_c[t] = c
        z = xw[:, t] + h @ w_hh
        gates = np.empty_like(z)
        gates[:, :2 * hs] = _sigmoid(z[:, :2 * hs])
        gates[:, 2 * hs:3 * hs] = np.tanh(z[:, 2 * hs:3 * hs])
        gates[:, 3 * hs:] = _sigmoid(z[:, 3 * hs:])
        i, f, g, o = (gates[:, k * hs:(k + 1) * hs] for k in range(4))
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        cache_gates[t] = gates
        cache_tc[t] = tc
        mt = m[:, t:t + 1]
        ys[:, t] = mt * h_new
        c = mt * c_new + (1.0 - mt) * c
        h = mt * h_new + (1.0 - mt) * h

    def bw(g_ys, g_h, g_c):
        dh = g_h.copy()
        dc = g_c.copy()
        dz_all = np.empty((bsz, steps, 4 * hs), dtype=dt)
        for t in range(steps - 1, -1, -1):
            mt = m[:, t:t + 1]
            gates = cache_gates[t]
            i, f, g, o = (gates[:, k * hs:(k + 1) * hs] for k in range(4))
            tc = cache_tc[t]
            dh_new = mt * (dh + g_ys[:, t])
            dc_new = mt * dc + dh_new * o * (1.0 - tc * tc)
            dz = np.empty((bsz, 4 * hs), dtype=dt)
            dz[:, :hs] = dc_new * g * i * (1.0 - i)
            dz[:, hs:2 * hs] = dc_new * cache_c[t] * f * (1.0 - f)
            dz[:, 2 * hs:3 * hs] = dc_new * i * (1.0 - g * g)
            dz[:, 3 * hs:] = dh_new * tc * o * (1.0 - o)
            dz_all[:, t] = dz
            dc = dc_new * f + (1.0 - mt) * dc
            dh = dz @ w_hh.T + (1.0 - mt) * dh
        flat = dz_all.reshape(-1, 4 * hs)
        g_x = dz_all @ p.w_ih.data.T
        g_wih = x.data.reshape(-1, in_dim).T @ flat
        g_whh = cache_h.transpose(1, 0, 2).reshape(-1, hs).T @ flat
        g_b = flat.sum(axis=0)
        return g_x, g_wih, g_whh, g_b, dh, dc

    return make_multi_op("lstm_sequence", (ys, h, c), (x, p.w_ih, p.w_hh, p.b, h0, c0), bw)


def lstm_sequence_reference(
    x: Tensor, p: LSTMParams, h0: Tensor | None = None, c0: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Same contract as :func:`lstm_sequence`, unrolled through :func:`lstm_cell`."""
    bsz, steps, _ = x.shape
    hs = p.hidden_size
    dt = x.dtype
    h = h0 if h0 is not None else Tensor(np.zeros((bsz, hs), dtype=dt))
    c = c0 if c0 is not None else Tensor(np.zeros((bsz, hs), dtype=dt))
    m = np.ones((bsz, steps), dtype=dt) if mask is None else np.asarray(mask, dtype=dt)
    outs = []
    for t in range(steps):
        h_new, c_new = lstm_cell(x[:, t], h, c, p)
        mt = m[:, t:t + 1]
        outs.append(mul(h_new, mt).reshape(bsz, 1, hs))
        h = h_new * mt + h * (1.0 - mt)
        c = c_new * mt + c * (1.0 - mt)
    return concat(outs, axis=1), h, c


def bce_loss(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"bce_loss shape mismatch: {p.shape} vs {y.shape}")
    pc = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    n = p.data.size
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean()
    inside = (p.data >= PROB_EPS) & (p.data <= 1.0 - PROB_EPS)

    def bw(g):
        return (g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n,)

    return make_op("bce_loss", np.asarray(loss, dtype=p.dtype), (p,), bw)


def ce_loss(logits: Tensor, targets, valid=None, reduction: str = "mean") -> Tensor:
    """Token cross-entropy over the last axis of ``logits``.

    ``valid`` marks positions that count (padding is False).  ``reduction``
    is ``"mean"`` over counted positions or ``"sum"``.
    """
    vocab = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"ce_loss targets {targets.shape} vs logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != targets.shape:
        raise ShapeError(f"ce_loss mask {valid.shape} vs targets {targets.shape}")
    n = int(valid.sum())
    if n == 0:
        raise ValueError("empty loss: every position is masked")
    live = targets[valid]
    if live.min() < 0 or live.max() >= vocab:
        raise ValueError(f"target id out of range [0, {vocab})")
    flat_logits = logits.data.reshape(-1, vocab)
    flat_t = np.where(valid, targets, 0).reshape(-1)
    flat_v = valid.reshape(-1)
    ls = log_softmax_np(flat_logits)
    picked = ls[np.arange(flat_t.size), flat_t]
    total = -(picked * flat_v).sum()
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = total * scale

    def bw(g):
        grad = np.exp(ls)
        grad[np.arange(flat_t.size), flat_t] -= 1.0
        grad *= flat_v[:, None] * (g * scale)
        return (grad.reshape(logits.shape),)

    return make_op("ce_loss", np.asarray(loss, dtype=logits.dtype), (logits,), bw)
