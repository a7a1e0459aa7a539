"""Comparison classifiers: CNN, BiLSTM, ULMFiT-style and three-LSTM Seq2Seq."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from ..corpus import LABELS, PAD_ID
from ..lm import LanguageModel
from ..numerics import (
    DEFAULT_DTYPE,
    Dense,
    LSTMLayer,
    Module,
    Tensor,
    concat,
    masked_max,
    relu,
    sigmoid,
    take_rows,
    uniform_fan_in,
    lstm_sequence,
)
from .model import ClassifierBatch

VARIANTS = ("CNN", "RNN", "ULMFiT", "Seq2Seq")


class MissingResourceError(ValueError):
    pass


@dataclass
class BaselineResources:
    word_vectors: np.ndarray | None = None  # [V, d]
    client_lm: LanguageModel | None = None
    hidden: int | None = None  # defaults to the word-vector width
    dtype: object = DEFAULT_DTYPE
    cnn_widths: tuple[int, ...] = tuple(range(1, 11))
    cnn_filters: int = 30
    task_layers: int = 2


class TripleClassifier(Protocol):
    gradual_unfreezing: bool

    def forward(self, batch: ClassifierBatch, rngs: dict | None = None) -> tuple[Tensor, Tensor | None]: ...

    def param_groups(self) -> list[list[Tensor]]: ...

    def after_backward(self) -> None: ...


class _EmbeddingBaseline(Module):
    gradual_unfreezing = False

    def __init__(self, word_vectors: np.ndarray, dtype):
        super().__init__(dtype)
        emb = np.array(word_vectors, dtype=dtype)
        emb[PAD_ID] = 0.0
        self.embedding = self.add_param("embedding", emb)

    def param_groups(self) -> list[list[Tensor]]:
        return [self.parameters()]

    def after_backward(self) -> None:
        if self.embedding.grad is not None:
            self.embedding.grad[PAD_ID] = 0.0


class CNNBaseline(_EmbeddingBaseline):
    """Convolutions of every width with max-over-time pooling, then dense + sigmoid."""

    def __init__(self, word_vectors: np.ndarray, rng: np.random.Generator, widths=tuple(range(1, 11)),
                 filters: int = 30, dtype=DEFAULT_DTYPE):
        super().__init__(word_vectors, dtype)
        d = word_vectors.shape[1]
        self.widths = tuple(widths)
        self.filters = filters
        self.convs = []
        for w in self.widths:
            conv = Module(dtype)
            conv.add_param("w", uniform_fan_in(rng, (w * d, filters), w * d, dtype))
            conv.add_param("b", np.zeros(filters, dtype=dtype))
            self.convs.append(self.add_child(f"conv{w}", conv))
        self.out = self.add_child("out", Dense(len(self.widths) * filters, len(LABELS), rng, dtype))

    def forward(self, batch: ClassifierBatch, rngs=None):
        ids = batch.target.ids
        lengths = batch.target.mask.sum(axis=1)
        width = max(ids.shape[1], max(self.widths))
        if width > ids.shape[1]:
            ids = np.pad(ids, ((0, 0), (0, width - ids.shape[1])), constant_values=PAD_ID)
        x = take_rows(self.embedding, ids)  # [B, T, d]
        bsz, steps, d = x.shape
        pooled = []
        for w, conv in zip(self.widths, self.convs):
            n_win = steps - w + 1
            idx = np.arange(n_win)[:, None] + np.arange(w)[None, :]
            win = x[:, idx, :].reshape(bsz, n_win, w * d)
            feat = relu(win @ conv._params["w"] + conv._params["b"])
            # a window is valid if it starts inside the sequence and fits, or
            # is the first window of a sequence shorter than w
            valid = np.arange(n_win)[None, :] <= np.maximum(lengths - w, 0)[:, None]
            pooled.append(masked_max(feat, valid[:, :, None], axis=1))
        return sigmoid(self.out(concat(pooled, axis=1))), None


def _reverse_rows(ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = ids.copy()
    for b, n in enumerate(mask.sum(axis=1)):
        out[b, :n] = ids[b, :n][::-1]
    return out


class RNNBaseline(_EmbeddingBaseline):
    """Bidirectional LSTM; final states of both directions concatenated."""

    def __init__(self, word_vectors: np.ndarray, rng: np.random.Generator, hidden: int, dtype=DEFAULT_DTYPE):
        super().__init__(word_vectors, dtype)
        d = word_vectors.shape[1]
        self.fwd = self.add_child("fwd", LSTMLayer(d, hidden, rng, dtype))
        self.bwd = self.add_child("bwd", LSTMLayer(d, hidden, rng, dtype))
        self.out = self.add_child("out", Dense(2 * hidden, len(LABELS), rng, dtype))

    def forward(self, batch: ClassifierBatch, rngs=None):
        ids, mask = batch.target.ids, batch.target.mask
        _, h_f, _ = lstm_sequence(take_rows(self.embedding, ids), self.fwd.params, mask=mask)
        _, h_b, _ = lstm_sequence(take_rows(self.embedding, _reverse_rows(ids, mask)), self.bwd.params, mask=mask)
        return sigmoid(self.out(concat([h_f, h_b], axis=1))), None


class ULMFiTBaseline(Module):
    """Pre-trained client LM body, 2 task LSTM layers, dense + sigmoid; gradual unfreezing."""

    gradual_unfreezing = True

    def __init__(self, client_lm: LanguageModel, rng: np.random.Generator, task_layers: int = 2):
        super().__init__(client_lm.dtype)
        lm = copy.deepcopy(client_lm)
        lm._params.pop("out_proj", None)
        lm._params.pop("out_bias", None)
        self.lm = self.add_child("lm", lm)
        d = lm.dim
        self.task = [self.add_child(f"task{k}", LSTMLayer(d, d, rng, self.dtype)) for k in range(task_layers)]
        self.out = self.add_child("out", Dense(d, len(LABELS), rng, self.dtype))

    def param_groups(self) -> list[list[Tensor]]:
        task = [t for m in self.task for t in m.parameters()] + self.out.parameters()
        return [task, self.lm.lstm_parameters(), [self.lm.embedding]]

    def forward(self, batch: ClassifierBatch, rngs=None):
        rngs = rngs or {}
        ids, mask = batch.target.ids, batch.target.mask
        hs, _ = self.lm.run(ids, mask, rng=rngs.get("dec_lm"))
        h = None
        for layer in self.task:
            hs, h, _ = lstm_sequence(hs, layer.params, mask=mask)
        return sigmoid(self.out(h)), None

    def after_backward(self) -> None:
        self.lm.after_backward()


class Seq2SeqBaseline(_EmbeddingBaseline):
    """Counselor, context and target LSTMs chained by final-state handoff.

    An empty field passes on the state it received, so an empty counselor
    field makes the context LSTM start from zeros.
    """

    def __init__(self, word_vectors: np.ndarray, rng: np.random.Generator, hidden: int, dtype=DEFAULT_DTYPE):
        super().__init__(word_vectors, dtype)
        d = word_vectors.shape[1]
        self.lstms = [self.add_child(name, LSTMLayer(d, hidden, rng, dtype))
                      for name in ("counselor", "context", "target")]
        self.out = self.add_child("out", Dense(hidden, len(LABELS), rng, dtype))
        self.hidden = hidden

    def forward(self, batch: ClassifierBatch, rngs=None):
        bsz = len(batch)
        zeros = np.zeros((bsz, self.hidden), dtype=self.dtype)
        h, c = Tensor(zeros), Tensor(zeros)
        fields = (batch.counselor, batch.context, batch.target)
        for k, (layer, enc) in enumerate(zip(self.lstms, fields)):
            _, h_new, c_new = lstm_sequence(take_rows(self.embedding, enc.ids), layer.params, h, c, enc.mask)
            if k == 2:
                h = h_new
                break
            present = (enc.lengths > 0).astype(self.dtype)[:, None]
            h = h_new * present + h * (1.0 - present)
            c = c_new * present + c * (1.0 - present)
        return sigmoid(self.out(h)), None


def build_baseline(variant: str, resources: BaselineResources, seed: int = 0) -> Module:
    """Baseline classifier; all variants start from the shared pre-trained word vectors."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown baseline {variant!r}; choose from {VARIANTS}")
    rng = np.random.default_rng(seed)
    if variant == "ULMFiT":
        if resources.client_lm is None:
            raise MissingResourceError("ULMFiT baseline needs a pre-trained client language model")
        return ULMFiTBaseline(resources.client_lm, rng, resources.task_layers)
    if resources.word_vectors is None:
        raise MissingResourceError(f"{variant} baseline needs pre-trained word vectors")
    wv = resources.word_vectors
    hidden = resources.hidden or wv.shape[1]
    if variant == "CNN":
        return CNNBaseline(wv, rng, resources.cnn_widths, resources.cnn_filters, resources.dtype)
    if variant == "RNN":
        return RNNBaseline(wv, rng, hidden, resources.dtype)
    return Seq2SeqBaseline(wv, rng, hidden, resources.dtype)
