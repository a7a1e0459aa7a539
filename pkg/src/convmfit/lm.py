"""Role-specific word-level LSTM language models with tied embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .corpus import EOS_ID, PAD_ID, ROLES, Vocab
from .numerics import (
    DEFAULT_DTYPE,
    Adam,
    DropoutSpec,
    LSTMLayer,
    Module,
    Tensor,
    backward,
    ce_loss,
    embed_with_dropout,
    lstm_sequence,
    matmul,
    no_grad,
    transpose,
    uniform_fan_in,
)
from .training import EpochHook, TrainState, epoch_rng, finish_epoch, restore

State = list[tuple[Tensor, Tensor]]


@dataclass(frozen=True)
class LMTrainConfig:
    role: str = "client"
    dim: int = 300
    n_layers: int = 3
    batch_size: int = 32
    seq_len: int = 32
    epochs: int = 10
    lr: float = 1e-3
    emb_dropout: float = 0.2
    out_dropout: float = 0.1
    patience: int | None = 3
    seed: int = 0
    finetune_lr_scale: float = 0.1
    finetune_epochs: int = 5
    finetune_stop_ratio: float = 1.05

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        for r in (self.emb_dropout, self.out_dropout):
            if not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate {r} outside [0, 1)")


class LanguageModel(Module):
    """Embedding -> stacked LSTMs -> projection through the transposed embedding.

    The projection reuses the embedding Tensor itself, so both views share
    one storage and one gradient accumulator.
    """

    def __init__(self, vocab_size: int, dim: int = 300, n_layers: int = 3, role: str = "client",
                 emb_dropout: float = 0.2, out_dropout: float = 0.1, seed: int = 0,
                 embedding: np.ndarray | None = None, dtype=DEFAULT_DTYPE):
        super().__init__(dtype)
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        rng = np.random.default_rng(seed)
        self.role = role
        self.vocab_size = vocab_size
        self.dim = dim
        self.n_layers = n_layers
        self.emb_dropout = emb_dropout
        self.out_dropout = DropoutSpec("variational", out_dropout)
        if embedding is None:
            # a lookup row sees a one-hot input, so its fan-in is 1
            embedding = uniform_fan_in(rng, (vocab_size, dim), 1, dtype)
        elif embedding.shape != (vocab_size, dim):
            raise ValueError(f"embedding shape {embedding.shape} != {(vocab_size, dim)}")
        emb = np.array(embedding, dtype=dtype)
        emb[PAD_ID] = 0.0
        self.embedding = self.add_param("embedding", emb)
        self.layers = [self.add_child(f"lstm{k}", LSTMLayer(dim, dim, rng, dtype)) for k in range(n_layers)]
        self.out_bias = self.add_param("out_bias", np.zeros(vocab_size, dtype=dtype))
        # tied head: the same Tensor under a second name
        self.share_param("out_proj", self.embedding)

    def lstm_parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.parameters()]

    def zero_state(self, batch: int) -> State:
        z = np.zeros((batch, self.dim), dtype=self.dtype)
        return [(Tensor(z), Tensor(z)) for _ in self.layers]

    def run(self, ids: np.ndarray, mask: np.ndarray | None = None, state: State | None = None,
            rng: np.random.Generator | None = None) -> tuple[Tensor, State]:
        """Top-layer outputs [B, T, dim] (after output dropout) and final states."""
        active = self.training
        x = embed_with_dropout(self.embedding, ids, self.emb_dropout, active, rng)
        if state is None:
            state = self.zero_state(ids.shape[0])
        spec = replace(self.out_dropout, active=active)
        new_state: State = []
        for layer, (h0, c0) in zip(self.layers, state):
            y, h, c = lstm_sequence(x, layer.params, h0, c0, mask)
            x = spec.apply(y, rng)
            new_state.append((h, c))
        return x, new_state

    def logits(self, h: Tensor) -> Tensor:
        return matmul(h, transpose(self.embedding)) + self.out_bias

    def after_backward(self) -> None:
        """Keep the <pad> row of the embedding at exactly zero."""
        if self.embedding.grad is not None:
            self.embedding.grad[PAD_ID] = 0.0


# -- token streams -----------------------------------------------------------------------

def make_stream(utterances: Sequence[Sequence[str]], vocab: Vocab) -> np.ndarray:
    """Utterances concatenated into one id stream, each followed by <eos>."""
    out = [EOS_ID]
    for u in utterances:
        out.extend(vocab.ids(u))
        out.append(EOS_ID)
    return np.asarray(out, dtype=np.int64)


def batchify(stream: np.ndarray, batch_size: int) -> np.ndarray:
    """Fold a stream into ``[rows, length]`` contiguous columns."""
    rows = max(1, min(batch_size, len(stream) // 2))
    length = len(stream) // rows
    return stream[:rows * length].reshape(rows, length)


def _windows(length: int, seq_len: int):
    for i in range(0, length - 1, seq_len):
        yield i, min(seq_len, length - 1 - i)


def _detach(state: State) -> State:
    return [(Tensor(h.data), Tensor(c.data)) for h, c in state]


def stream_nll(lm: LanguageModel, data: np.ndarray, seq_len: int) -> tuple[float, int]:
    """Summed next-token NLL over a folded stream, eval mode, state carried."""
    was = lm.training
    lm.eval()
    total, count = 0.0, 0
    state = None
    with no_grad():
        for i, n in _windows(data.shape[1], seq_len):
            h, state = lm.run(data[:, i:i + n], state=state)
            loss = ce_loss(lm.logits(h), data[:, i + 1:i + 1 + n], reduction="sum")
            total += float(loss.data)
            count += data.shape[0] * n
    lm.train(was)
    return total, count


def _exp(nll: float) -> float:
    # a diverged model gives inf (or nan), which the epoch check reports as a numeric failure
    return math.exp(nll) if nll < 700.0 else math.inf if nll == nll else math.nan


def perplexity(lm: LanguageModel, utterances: Sequence[Sequence[str]], vocab: Vocab,
               batch_size: int = 1, seq_len: int = 64) -> float:
    """exp(mean next-token cross-entropy) over the utterance stream."""
    if not utterances:
        raise ValueError("perplexity of an empty corpus")
    data = batchify(make_stream(utterances, vocab), batch_size)
    total, count = stream_nll(lm, data, seq_len)
    return _exp(total / count)


def _train_epochs(lm: LanguageModel, data: np.ndarray, valid: np.ndarray | None, cfg: LMTrainConfig,
                  lr: float, epochs: int, state: TrainState | None, hook: EpochHook | None,
                  stop_ratio: float | None, tag: str) -> TrainState:
    opt = Adam(lm.named_parameters(), lr=lr)
    state = restore(lm, opt, state)
    while state.epoch < epochs and not state.stopped:
        rng = epoch_rng(cfg.seed, state.epoch)
        lm.train()
        total, count = 0.0, 0
        carry = None
        for i, n in _windows(data.shape[1], cfg.seq_len):
            lm.zero_grad()
            h, carry = lm.run(data[:, i:i + n], state=carry, rng=rng)
            loss = ce_loss(lm.logits(h), data[:, i + 1:i + 1 + n])
            backward(loss)
            lm.after_backward()
            opt.step()
            carry = _detach(carry)
            total += float(loss.data) * data.shape[0] * n
            count += data.shape[0] * n
        train_ppl = _exp(total / count)
        if valid is not None:
            vt, vc = stream_nll(lm, valid, cfg.seq_len)
            valid_ppl = _exp(vt / vc)
        else:
            valid_ppl = train_ppl
        record = {"stage": tag, "epoch": state.epoch + 1, "train_perplexity": train_ppl,
                  "valid_perplexity": valid_ppl}
        finish_epoch(lm, opt, state, valid_ppl, cfg.patience, record, hook, stop_ratio)
    if state.best_model:
        lm.load_state_dict(state.best_model)
    lm.eval()
    return state


def train_language_model(role: str, utterances: Sequence[Sequence[str]], vocab: Vocab, cfg: LMTrainConfig,
                         valid_utterances: Sequence[Sequence[str]] | None = None,
                         embedding: np.ndarray | None = None, dtype=DEFAULT_DTYPE,
                         state: TrainState | None = None, hook: EpochHook | None = None,
                         ) -> tuple[LanguageModel, TrainState]:
    """Pre-train a role LM on next-token prediction with Adam.

    Returns the best-validation snapshot and the training state (its
    ``log`` holds per-epoch train/valid perplexity).
    """
    if role != cfg.role:
        raise ValueError(f"role {role!r} does not match config role {cfg.role!r}")
    if not utterances:
        raise ValueError(f"empty {role} corpus")
    lm = LanguageModel(len(vocab), cfg.dim, cfg.n_layers, role, cfg.emb_dropout, cfg.out_dropout,
                       seed=cfg.seed, embedding=embedding, dtype=dtype)
    data = batchify(make_stream(utterances, vocab), cfg.batch_size)
    valid = batchify(make_stream(valid_utterances, vocab), cfg.batch_size) if valid_utterances else None
    state = _train_epochs(lm, data, valid, cfg, cfg.lr, cfg.epochs, state, hook, None, f"lm-{role}")
    return lm, state


def finetune_language_model(lm: LanguageModel, utterances: Sequence[Sequence[str]], vocab: Vocab,
                            cfg: LMTrainConfig, valid_utterances: Sequence[Sequence[str]] | None = None,
                            state: TrainState | None = None, hook: EpochHook | None = None,
                            ) -> tuple[LanguageModel, TrainState]:
    """Continue training on labeled-set utterances at a reduced learning rate.

    Stops as soon as validation perplexity rises more than
    ``finetune_stop_ratio`` above its running minimum and restores the best
    snapshot.
    """
    if lm.role != cfg.role:
        raise ValueError(f"cannot fine-tune a {lm.role} LM with a {cfg.role} config")
    if cfg.finetune_epochs == 0:
        return lm, state or TrainState()
    if not utterances:
        raise ValueError("empty fine-tuning corpus")
    data = batchify(make_stream(utterances, vocab), cfg.batch_size)
    valid = batchify(make_stream(valid_utterances, vocab), cfg.batch_size) if valid_utterances else None
    state = _train_epochs(lm, data, valid, cfg, cfg.lr * cfg.finetune_lr_scale, cfg.finetune_epochs, state,
                          hook, cfg.finetune_stop_ratio, f"lm-{cfg.role}-finetune")
    return lm, state
