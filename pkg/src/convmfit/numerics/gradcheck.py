"""Central finite differences against analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad

# below this magnitude the comparison is effectively absolute: central
# differences at h=1e-5 carry ~1e-10 truncation/roundoff noise
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                 indices: Sequence[tuple] | None = None) -> tuple[list[tuple], np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``t``.

    ``loss_fn`` must be deterministic (no fresh dropout masks per call).
    """
    if indices is None:
        indices = list(np.ndindex(*t.shape))
    out = np.empty(len(indices))
    with no_grad():
        for k, idx in enumerate(indices):
            orig = t.data[idx]
            t.data[idx] = orig + h
            up = float(loss_fn().data)
            t.data[idx] = orig - h
            down = float(loss_fn().data)
            t.data[idx] = orig
            out[k] = (up - down) / (2.0 * h)
    return list(indices), out


def check_gradients(loss_fn: Callable[[], Tensor], named: Sequence[tuple[str, Tensor]],
                    h: float = 1e-5, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Max relative error per tensor between backward() and central differences.

    With ``max_entries`` set, a random subset of entries is probed per tensor.
    """
    for _, t in named:
        t.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in named}
    rng = rng or np.random.default_rng(0)
    report: dict[str, float] = {}
    for name, t in named:
        idx = list(np.ndindex(*t.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = rng.choice(len(idx), size=max_entries, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        idx, num = numeric_grad(loss_fn, t, h, idx)
        ana = np.array([analytic[name][i] for i in idx])
        report[name] = float(relative_error(ana, num).max()) if len(idx) else 0.0
    return report
