"""Seq2seq conversation model over the two role LMs, trained with the tri-loss.

Encoder: counselor LM -> 2 LSTM layers.  Decoder: client LM -> 2 LSTM
layers whose initial states are the encoder layers' final states, layer by
layer.  The decoder LM's tied head serves both the client-LM loss (fed by
the LM's top layer) and the seq2seq loss (fed by the top decoder layer).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import Vocab, encode_sequences
from .lm import LanguageModel
from .numerics import (
    DEFAULT_DTYPE,
    Adam,
    DropoutSpec,
    LSTMLayer,
    Module,
    Tensor,
    backward,
    ce_loss,
    lstm_sequence,
    no_grad,
)
from .training import EpochHook, TrainState, finish_epoch, restore

SUBNETS = ("enc_lm", "enc_s2s", "dec_lm", "dec_s2s")
Pair = tuple[Sequence[str], Sequence[str]]


@dataclass(frozen=True)
class ConvTrainConfig:
    n_layers: int = 2
    dropout: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    patience: int | None = 3
    seed: int = 0
    max_len: int = 64


class TriLoss(NamedTuple):
    total: Tensor
    l_enc: Tensor
    l_dec: Tensor
    l_s2s: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in self._fields}


def step_rngs(entropy) -> dict[str, np.random.Generator]:
    """One independent generator per sub-network, all derived from ``entropy``."""
    seqs = np.random.SeedSequence(entropy).spawn(len(SUBNETS))
    return {name: np.random.default_rng(s) for name, s in zip(SUBNETS, seqs)}


class ConversationModel(Module):
    def __init__(self, counselor_lm: LanguageModel, client_lm: LanguageModel, seed: int = 0,
                 n_layers: int = 2, dropout: float = 0.05):
        if counselor_lm.vocab_size != client_lm.vocab_size:
            raise ValueError(f"vocab mismatch: {counselor_lm.vocab_size} vs {client_lm.vocab_size}")
        if counselor_lm.dim != client_lm.dim:
            raise ValueError(f"dimension mismatch: {counselor_lm.dim} vs {client_lm.dim}")
        if counselor_lm.dtype != client_lm.dtype:
            raise ValueError("the two LMs use different precisions")
        if counselor_lm.role != "counselor" or client_lm.role != "client":
            raise ValueError("encoder must be the counselor LM and decoder the client LM")
        super().__init__(counselor_lm.dtype)
        rng = np.random.default_rng(seed)
        dim = counselor_lm.dim
        self.dim = dim
        self.vocab_size = counselor_lm.vocab_size
        self.enc_lm = self.add_child("enc_lm", copy.deepcopy(counselor_lm))
        self.dec_lm = self.add_child("dec_lm", copy.deepcopy(client_lm))
        self.enc_s2s = [self.add_child(f"enc_s2s{k}", LSTMLayer(dim, dim, rng, self.dtype)) for k in range(n_layers)]
        self.dec_s2s = [self.add_child(f"dec_s2s{k}", LSTMLayer(dim, dim, rng, self.dtype)) for k in range(n_layers)]
        self.dropout = DropoutSpec("variational", dropout)

    def seq2seq_parameters(self) -> list[Tensor]:
        return [t for layer in self.enc_s2s + self.dec_s2s for t in layer.parameters()]

    def lm_lstm_parameters(self) -> list[Tensor]:
        return self.enc_lm.lstm_parameters() + self.dec_lm.lstm_parameters()

    def embedding_parameters(self) -> list[Tensor]:
        return [self.enc_lm.embedding, self.enc_lm.out_bias, self.dec_lm.embedding, self.dec_lm.out_bias]

    def _stack(self, layers, x, mask, init, rng):
        spec = replace(self.dropout, active=self.training)
        states = []
        for k, layer in enumerate(layers):
            h0, c0 = init[k] if init is not None else (None, None)
            y, h, c = lstm_sequence(x, layer.params, h0, c0, mask)
            x = spec.apply(y, rng)
            states.append((h, c))
        return x, states

    def encode(self, ids, mask, rngs=None):
        """Returns (LM top outputs, seq2seq outputs, seq2seq final states)."""
        rngs = rngs or {}
        lm_out, _ = self.enc_lm.run(ids, mask, rng=rngs.get("enc_lm"))
        out, states = self._stack(self.enc_s2s, lm_out, mask, None, rngs.get("enc_s2s"))
        return lm_out, out, states

    def decode(self, ids, mask, init_states, rngs=None):
        rngs = rngs or {}
        lm_out, _ = self.dec_lm.run(ids, mask, rng=rngs.get("dec_lm"))
        out, states = self._stack(self.dec_s2s, lm_out, mask, init_states, rngs.get("dec_s2s"))
        return lm_out, out, states

    def after_backward(self) -> None:
        self.enc_lm.after_backward()
        self.dec_lm.after_backward()


def build_conversation_model(counselor_lm: LanguageModel, client_lm: LanguageModel, seed: int = 0,
                             n_layers: int = 2, dropout: float = 0.05) -> ConversationModel:
    """Copy both LMs unchanged and add freshly initialized seq2seq layers."""
    return ConversationModel(counselor_lm, client_lm, seed, n_layers, dropout)


def next_token_loss(lm: LanguageModel, hidden: Tensor, ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """CE of predicting ``ids[:, 1:]`` from ``hidden[:, :-1]`` through ``lm``'s tied head."""
    logits = lm.logits(hidden[:, :-1])
    return ce_loss(logits, ids[:, 1:], mask[:, 1:])


def tri_loss(model: ConversationModel, c_ids: np.ndarray, c_mask: np.ndarray, x_ids: np.ndarray,
             x_mask: np.ndarray, rngs: dict | None = None) -> TriLoss:
    """Counselor-LM loss + client-LM loss + seq2seq loss, unit weights."""
    if c_ids.shape[0] == 0:
        raise ValueError("empty batch")
    enc_lm_out, _, enc_states = model.encode(c_ids, c_mask, rngs)
    l_enc = next_token_loss(model.enc_lm, enc_lm_out, c_ids, c_mask)
    dec_lm_out, dec_out, _ = model.decode(x_ids, x_mask, enc_states, rngs)
    l_dec = next_token_loss(model.dec_lm, dec_lm_out, x_ids, x_mask)
    l_s2s = next_token_loss(model.dec_lm, dec_out, x_ids, x_mask)
    return TriLoss(l_enc + l_dec + l_s2s, l_enc, l_dec, l_s2s)


def encode_pairs(pairs: Sequence[Pair], vocab: Vocab, max_len: int = 64):
    c = encode_sequences([p[0] for p in pairs], vocab, max_len)
    x = encode_sequences([p[1] for p in pairs], vocab, max_len)
    return c.ids, c.mask, x.ids, x.mask


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        yield order[start:start + size]


def evaluate_tri_loss(model: ConversationModel, pairs: Sequence[Pair], vocab: Vocab,
                      batch_size: int = 64, max_len: int = 64) -> dict[str, float]:
    """Token-weighted mean of each component over ``pairs`` in eval mode."""
    was = model.training
    model.eval()
    sums = {"l_enc": 0.0, "l_dec": 0.0, "l_s2s": 0.0}
    counts = {"l_enc": 0, "l_dec": 0, "l_s2s": 0}
    with no_grad():
        for idx in _batches(len(pairs), batch_size, np.arange(len(pairs))):
            c_ids, c_mask, x_ids, x_mask = encode_pairs([pairs[i] for i in idx], vocab, max_len)
            tl = tri_loss(model, c_ids, c_mask, x_ids, x_mask)
            nc, nx = int(c_mask[:, 1:].sum()), int(x_mask[:, 1:].sum())
            for k, n in (("l_enc", nc), ("l_dec", nx), ("l_s2s", nx)):
                sums[k] += float(getattr(tl, k).data) * n
                counts[k] += n
    model.train(was)
    out = {k: sums[k] / counts[k] for k in sums}
    out["total"] = out["l_enc"] + out["l_dec"] + out["l_s2s"]
    return out


def lm_sequence_loss(lm: LanguageModel, seqs: Sequence[Sequence[str]], vocab: Vocab,
                     batch_size: int = 64, max_len: int = 64) -> float:
    """Token-weighted next-token CE of a standalone LM over <bos>/<eos>-wrapped sequences."""
    was = lm.training
    lm.eval()
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(seqs), batch_size):
            enc = encode_sequences(seqs[start:start + batch_size], vocab, max_len)
            h, _ = lm.run(enc.ids, enc.mask)
            n = int(enc.mask[:, 1:].sum())
            total += float(next_token_loss(lm, h, enc.ids, enc.mask).data) * n
            count += n
    lm.train(was)
    return total / count


def train_conversation_model(model: ConversationModel, pairs: Sequence[Pair], vocab: Vocab,
                             cfg: ConvTrainConfig, valid_pairs: Sequence[Pair] | None = None,
                             state: TrainState | None = None, hook: EpochHook | None = None,
                             step_callback=None) -> tuple[ConversationModel, TrainState]:
    """Adam on the tri-loss; early stop on validation total, best snapshot restored.

    ``step_callback(model, batch, losses, entropy)`` runs after each forward
    pass (before the update) with the per-step component values.
    """
    if not pairs:
        raise ValueError("empty pair set")
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    state = restore(model, opt, state)
    while state.epoch < cfg.epochs and not state.stopped:
        ep = state.epoch
        order = np.random.default_rng([cfg.seed, ep]).permutation(len(pairs))
        model.train()
        sums = {"l_enc": 0.0, "l_dec": 0.0, "l_s2s": 0.0, "total": 0.0}
        n_steps = 0
        for step, idx in enumerate(_batches(len(pairs), cfg.batch_size, order)):
            batch = encode_pairs([pairs[i] for i in idx], vocab, cfg.max_len)
            entropy = (cfg.seed, ep, step)
            model.zero_grad()
            tl = tri_loss(model, *batch, rngs=step_rngs(entropy))
            values = tl.values()
            if step_callback is not None:
                step_callback(model, batch, values, entropy)
            backward(tl.total)
            model.after_backward()
            opt.step()
            for k in sums:
                sums[k] += values[k]
            n_steps += 1
        train = {k: v / n_steps for k, v in sums.items()}
        valid = evaluate_tri_loss(model, valid_pairs, vocab, max_len=cfg.max_len) if valid_pairs else train
        for split, vals in (("train", train), ("valid", valid)):
            rec = {"stage": "conv", "epoch": ep + 1, "split": split, **vals}
            if split == "train":
                state.log.append(rec)
            else:
                last = rec
        finish_epoch(model, opt, state, valid["total"], cfg.patience, last, hook)
    if state.best_model:
        model.load_state_dict(state.best_model)
    model.eval()
    return model, state
