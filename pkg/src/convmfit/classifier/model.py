"""ConvMFiT assembly: conversation body, task seq2seq layers, attention pooling, sigmoid head."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ..convmodel import ConversationModel
from ..corpus import BOS_ID, EOS_ID, LABELS, PAD_ID, SEP_ID, Encoded, Triple, Vocab, encode_sequences
from ..numerics import (
    Dense,
    DropoutSpec,
    LSTMLayer,
    Module,
    Tensor,
    concat,
    lstm_sequence,
    masked_softmax,
    matmul,
    sigmoid,
    tanh,
    tsum,
    uniform_fan_in,
)

# per-position role codes in the attention sequence
SPECIAL, COUNSELOR, CONTEXT, TARGET = 0, 1, 2, 3
ROLE_NAMES = {SPECIAL: "special", COUNSELOR: "counselor", CONTEXT: "context", TARGET: "target"}


@dataclass(frozen=True)
class AblationConfig:
    pretrained_embeddings: bool = True
    pretrained_lms: bool = True
    pretrained_conv_seq2seq: bool = True
    gradual_unfreezing: bool = True
    task_seq2seq_layers: bool = True

    def __post_init__(self):
        if self.pretrained_conv_seq2seq and not self.pretrained_lms:
            raise ValueError("pretrained_conv_seq2seq requires pretrained_lms")
        if self.pretrained_lms and not self.pretrained_embeddings:
            raise ValueError("pretrained_lms requires pretrained_embeddings")


ABLATION_ROWS: dict[str, AblationConfig] = {
    "1": AblationConfig(False, False, False, False, True),
    "2": AblationConfig(True, False, False, False, True),
    "3": AblationConfig(True, True, False, True, True),
    "4": AblationConfig(True, True, True, True, True),
    "4-1": AblationConfig(True, True, True, True, False),
    "4-2": AblationConfig(True, True, True, False, True),
}
FULL_CONVMFIT = ABLATION_ROWS["4"]


# -- batch encoding ----------------------------------------------------------------------------

@dataclass
class ClassifierBatch:
    triple_ids: list[str]
    labels: np.ndarray  # [B, 5]
    enc_ids: np.ndarray  # counselor field, [B, Te]
    enc_mask: np.ndarray
    enc_roles: np.ndarray
    dec_ids: np.ndarray  # <bos> context <sep> target <eos>, [B, Td]
    dec_mask: np.ndarray
    dec_roles: np.ndarray
    counselor: Encoded  # per-field encodings for the baselines
    context: Encoded
    target: Encoded

    def __len__(self) -> int:
        return len(self.triple_ids)

    @property
    def ids(self) -> np.ndarray:
        return np.concatenate([self.enc_ids, self.dec_ids], axis=1)

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate([self.enc_mask, self.dec_mask], axis=1)

    @property
    def roles(self) -> np.ndarray:
        return np.concatenate([self.enc_roles, self.dec_roles], axis=1)


def _pad_rows(rows: list[list[int]], fill: int) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def encode_triples(triples: Sequence[Triple], vocab: Vocab, max_len: int = 64,
                   min_width: int = 1) -> ClassifierBatch:
    """Encode triples for the classifier; empty fields become a bare <bos><eos>.

    Each field keeps at most ``max_len - 2`` content tokens; the client
    context keeps its most recent tokens.
    """
    keep = max_len - 2
    enc_rows, enc_roles, dec_rows, dec_roles = [], [], [], []
    for t in triples:
        c = vocab.ids(t.counselor)[:keep]
        enc_rows.append([BOS_ID] + c + [EOS_ID])
        enc_roles.append([SPECIAL] + [SPECIAL if i == SEP_ID else COUNSELOR for i in c] + [SPECIAL])
        ctx = vocab.ids(t.context)[-keep:] if t.context else []
        tgt = vocab.ids(t.target)[:keep]
        row, roles = [BOS_ID], [SPECIAL]
        if ctx:
            row += ctx + [SEP_ID]
            roles += [SPECIAL if i == SEP_ID else CONTEXT for i in ctx] + [SPECIAL]
        row += tgt + [EOS_ID]
        roles += [TARGET] * len(tgt) + [SPECIAL]
        dec_rows.append(row)
        dec_roles.append(roles)
    enc_ids = _pad_rows(enc_rows, PAD_ID)
    dec_ids = _pad_rows(dec_rows, PAD_ID)
    return ClassifierBatch(
        triple_ids=[t.id for t in triples],
        labels=np.stack([t.label_array for t in triples]),
        enc_ids=enc_ids, enc_mask=enc_ids != PAD_ID, enc_roles=_pad_rows(enc_roles, SPECIAL),
        dec_ids=dec_ids, dec_mask=dec_ids != PAD_ID, dec_roles=_pad_rows(dec_roles, SPECIAL),
        counselor=encode_sequences([t.counselor for t in triples], vocab, max_len, min_width),
        context=encode_sequences([t.context for t in triples], vocab, max_len, min_width),
        target=encode_sequences([t.target for t in triples], vocab, max_len, min_width),
    )


# -- attention pooling -------------------------------------------------------------------------

class AdditiveAttention(Module):
    """score_t = ctx . tanh(W h_t + b); softmax over unmasked positions; weighted sum."""

    def __init__(self, in_dim: int, att_dim: int, rng: np.random.Generator, dtype):
        super().__init__(dtype)
        self.proj = self.add_child("proj", Dense(in_dim, att_dim, rng, dtype))
        self.context = self.add_param("context", uniform_fan_in(rng, (att_dim, 1), att_dim, dtype))

    def __call__(self, hs: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        bsz, steps, _ = hs.shape
        u = tanh(self.proj(hs))
        scores = matmul(u, self.context).reshape(bsz, steps)
        weights = masked_softmax(scores, mask)
        pooled = tsum(hs * weights.reshape(bsz, steps, 1), axis=1)
        return pooled, weights


# -- ConvMFiT ----------------------------------------------------------------------------------

def _fresh_lstm(layer: LSTMLayer, rng: np.random.Generator) -> None:
    new = LSTMLayer(layer.input_size, layer.hidden_size, rng, layer.dtype)
    layer.load_state_dict(new.state_dict())


class ConvMFiTClassifier(Module):
    def __init__(self, body: ConversationModel, ablation: AblationConfig, seed: int = 0,
                 att_dim: int = 500, task_layers: int = 2, task_dropout: float = 0.05,
                 word_vectors: np.ndarray | None = None):
        super().__init__(body.dtype)
        rng = np.random.default_rng(seed)
        body = copy.deepcopy(body)
        for lm in (body.enc_lm, body.dec_lm):
            # the LM softmax heads are not part of the classifier
            lm._params.pop("out_proj", None)
            lm._params.pop("out_bias", None)
        if not ablation.pretrained_conv_seq2seq:
            for layer in body.enc_s2s + body.dec_s2s:
                _fresh_lstm(layer, rng)
        if not ablation.pretrained_lms:
            for lm in (body.enc_lm, body.dec_lm):
                for layer in lm.layers:
                    _fresh_lstm(layer, rng)
        if not ablation.pretrained_embeddings:
            for lm in (body.enc_lm, body.dec_lm):
                lm.embedding.data[...] = uniform_fan_in(rng, lm.embedding.shape, 1, self.dtype)
                lm.embedding.data[PAD_ID] = 0.0
        elif not ablation.pretrained_lms and word_vectors is not None:
            for lm in (body.enc_lm, body.dec_lm):
                lm.embedding.data[...] = word_vectors
                lm.embedding.data[PAD_ID] = 0.0
        self.ablation = ablation
        self.body = self.add_child("body", body)
        dim = body.dim
        self.task = [self.add_child(f"task{k}", LSTMLayer(dim, dim, rng, self.dtype))
                     for k in range(task_layers if ablation.task_seq2seq_layers else 0)]
        self.task_dropout = DropoutSpec("variational", task_dropout)
        self.attention = self.add_child("attention", AdditiveAttention(dim, att_dim, rng, self.dtype))
        self.out = self.add_child("out", Dense(dim, len(LABELS), rng, self.dtype))

    @property
    def gradual_unfreezing(self) -> bool:
        return self.ablation.gradual_unfreezing

    def param_groups(self) -> list[list[Tensor]]:
        """Top to bottom: task layers, conversation seq2seq, LM LSTMs, embeddings."""
        task = [t for m in self.task for t in m.parameters()] + self.attention.parameters() + self.out.parameters()
        body = self.body
        return [task, body.seq2seq_parameters(), body.lm_lstm_parameters(),
                [body.enc_lm.embedding, body.dec_lm.embedding]]

    def forward(self, batch: ClassifierBatch, rngs: dict | None = None) -> tuple[Tensor, Tensor]:
        """Label probabilities [B, 5] and attention weights [B, Te + Td]."""
        rngs = rngs or {}
        body = self.body
        _, enc_out, enc_states = body.encode(batch.enc_ids, batch.enc_mask, rngs)
        _, dec_out, _ = body.decode(batch.dec_ids, batch.dec_mask, enc_states, rngs)
        hs = concat([enc_out, dec_out], axis=1)
        mask = batch.mask
        spec = replace(self.task_dropout, active=self.training)
        for layer in self.task:
            y, _, _ = lstm_sequence(hs, layer.params, mask=mask)
            hs = spec.apply(y, rngs.get("task"))
        pooled, weights = self.attention(hs, mask)
        return sigmoid(self.out(pooled)), weights

    def after_backward(self) -> None:
        for lm in (self.body.enc_lm, self.body.dec_lm):
            lm.after_backward()


def build_classifier(conv_model: ConversationModel, ablation: AblationConfig = FULL_CONVMFIT, seed: int = 0,
                     att_dim: int = 500, task_layers: int = 2, task_dropout: float = 0.05,
                     word_vectors: np.ndarray | None = None) -> ConvMFiTClassifier:
    """Assemble a classifier; disabled ablation flags re-randomize the matching parts.

    The architecture is the same for every flag setting except
    ``task_seq2seq_layers=False``, which drops the task LSTMs.  With
    ``pretrained_embeddings`` but not ``pretrained_lms`` the embeddings are
    reset to ``word_vectors`` when given.
    """
    return ConvMFiTClassifier(conv_model, ablation, seed, att_dim, task_layers, task_dropout, word_vectors)


class UnfreezeSchedule:
    """Activates parameter groups top-down, one more every ``period`` epochs."""

    def __init__(self, groups: list[list[Tensor]], period: int = 2, enabled: bool = True):
        if period < 1:
            raise ValueError("unfreeze period must be >= 1")
        self.groups = groups
        self.period = period
        self.enabled = enabled

    def n_active(self, epoch: int) -> int:
        """Number of active groups during 1-based ``epoch``."""
        if not self.enabled:
            return len(self.groups)
        return min(1 + (epoch - 1) // self.period, len(self.groups))

    def apply(self, epoch: int) -> None:
        k = self.n_active(epoch)
        for gi, group in enumerate(self.groups):
            for t in group:
                t.requires_grad = gi < k
                if t.requires_grad and t.grad is None:
                    t.grad = np.zeros_like(t.data)
