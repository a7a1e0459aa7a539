"""Adam with bias correction; frozen parameters are skipped outright."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # per-parameter update counts drive bias correction, so a group that
    # unfreezes late starts with a properly corrected first step
    counts: dict[str, int] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              frozen: frozenset[str] | set[str] = frozenset()) -> AdamState:
    """Update ``params`` in place.

    Names in ``frozen`` get neither a parameter update nor a moment update.
    The global counter ``state.t`` advances by one on every call.
    """
    for name, g in grads.items():
        if name in frozen:
            continue
        if not np.all(np.isfinite(g)):
            bad = int(g.size - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name!r} ({bad} of {g.size} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.counts[name] = 0
        k = state.counts[name] = state.counts[name] + 1
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** k)
        v_hat = v / (1.0 - b2 ** k)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Stateful wrapper over :func:`adam_step` for named tensors.

    A tensor with ``requires_grad=False`` counts as frozen for the step.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        live = {n: p for n, p in self.params if p.requires_grad}
        frozen = {n for n, p in self.params if not p.requires_grad}
        adam_step({n: p.data for n, p in live.items()},
                  {n: p.grad for n, p in live.items()}, self.state, frozen)

    def state_dict(self) -> dict:
        s = self.state
        return {
            "hyper": {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps, "t": s.t},
            "counts": dict(s.counts),
            "m": {k: v.copy() for k, v in s.m.items()},
            "v": {k: v.copy() for k, v in s.v.items()},
        }

    def load_state_dict(self, sd: dict) -> None:
        h = sd["hyper"]
        self.state = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], t=int(h["t"]),
                               m={k: np.array(v) for k, v in sd["m"].items()},
                               v={k: np.array(v) for k, v in sd["v"].items()},
                               counts={k: int(v) for k, v in sd["counts"].items()})
