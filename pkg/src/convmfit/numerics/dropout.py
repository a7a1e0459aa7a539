"""Inverted dropout masks: standard, embedding-row and variational (time-shared)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, mul, take_rows

KINDS = ("standard", "embedding-row", "variational")


def _check_rate(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")


def _keep_mask(shape, p: float, rng: np.random.Generator, dtype) -> np.ndarray:
    _check_rate(p)
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    if rng is None:
        raise ValueError("active dropout needs a random generator")
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / (1.0 - p)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    return _keep_mask(shape, p, rng, dtype)


def variational_dropout_mask(hidden_size: int, p: float, rng: np.random.Generator,
                             batch: int | None = None, dtype=np.float64) -> np.ndarray:
    """One mask per sequence, reused at every time step.

    Returns ``[hidden]`` or ``[batch, 1, hidden]`` so it broadcasts over a
    ``[batch, time, hidden]`` activation.
    """
    if batch is None:
        return _keep_mask((hidden_size,), p, rng, dtype)
    return _keep_mask((batch, 1, hidden_size), p, rng, dtype)


def embedding_dropout_mask(vocab_size: int, p: float, rng: np.random.Generator,
                           dtype=np.float64) -> np.ndarray:
    """Row mask over the vocabulary; a dropped word vanishes at all its occurrences."""
    return _keep_mask((vocab_size,), p, rng, dtype)


@dataclass
class DropoutSpec:
    kind: str = "standard"
    rate: float = 0.0
    active: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dropout kind {self.kind!r}")
        _check_rate(self.rate)

    def apply(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        """Drop activations of ``x``; identity in eval mode or at rate 0.

        For ``variational`` the input is [B, T, H] and one mask per row is
        shared across T.  ``embedding-row`` is applied through
        :func:`embed_with_dropout` instead, since it acts on the table.
        """
        if not self.active or self.rate == 0.0:
            return x
        if self.kind == "variational":
            mask = variational_dropout_mask(x.shape[-1], self.rate, rng, batch=x.shape[0], dtype=x.dtype)
        elif self.kind == "standard":
            mask = dropout_mask(x.shape, self.rate, rng, dtype=x.dtype)
        else:
            raise ValueError("embedding-row dropout acts on the table; use embed_with_dropout")
        return mul(x, mask)


def embed_with_dropout(table: Tensor, ids: np.ndarray, p: float, active: bool,
                       rng: np.random.Generator | None) -> Tensor:
    """Look up ``ids`` in ``table`` after zeroing whole rows with probability ``p``."""
    if not active or p == 0.0:
        return take_rows(table, ids)
    mask = embedding_dropout_mask(table.shape[0], p, rng, dtype=table.dtype)
    # mask only the rows that are looked up: same result, less work than scaling the table
    return mul(take_rows(table, ids), mask[np.asarray(ids)][..., None])
