"""Epoch-level training state shared by every stage; makes resume exact.

Each epoch draws its randomness from ``default_rng([seed, epoch])`` so a run
restored from the state after epoch k continues identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Adam, Module, NumericError


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    best_epoch: int = 0
    best_metric: float = math.inf
    bad_epochs: int = 0
    stopped: bool = False
    log: list[dict] = field(default_factory=list)
    model: dict[str, np.ndarray] = field(default_factory=dict)
    best_model: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)


EpochHook = Callable[[TrainState], None]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def restore(model: Module, opt: Adam, state: TrainState | None) -> TrainState:
    if state is None:
        return TrainState(best_model=model.state_dict())
    model.load_state_dict(state.model)
    if state.optimizer:
        opt.load_state_dict(state.optimizer)
    return state


def finish_epoch(model: Module, opt: Adam, state: TrainState, metric: float, patience: int | None,
                 record: dict, hook: EpochHook | None, stop_ratio: float | None = None,
                 count_patience: bool = True) -> None:
    """Log the epoch, keep the best-metric snapshot, update early stopping, call ``hook``.

    Training stops after ``patience`` epochs without improvement, or at once
    when ``metric`` exceeds ``stop_ratio`` times the best value so far.  With
    ``count_patience`` false the epoch never counts towards patience.
    """
    if not math.isfinite(metric):
        raise NumericError(f"non-finite validation metric at epoch {state.epoch + 1}")
    state.epoch += 1
    state.log.append(record)
    if metric < state.best_metric:
        state.best_metric = metric
        state.best_epoch = state.epoch
        state.best_model = model.state_dict()
        state.bad_epochs = 0
    elif count_patience:
        state.bad_epochs += 1
    if not count_patience:
        state.bad_epochs = 0
    if patience is not None and state.bad_epochs >= patience:
        state.stopped = True
    if stop_ratio is not None and metric > state.best_metric * stop_ratio:
        state.stopped = True
    state.model = model.state_dict()
    state.optimizer = opt.state_dict()
    if hook is not None:
        hook(state)
