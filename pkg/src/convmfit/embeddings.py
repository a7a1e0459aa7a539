"""Skip-gram word vectors with negative sampling, and their binary file format.

Embedding file layout (little-endian)::

    magic    4 bytes  b"CMFE"
    version  uint32   1
    vocab    32 bytes sha256 digest of Vocab.content_hash() input
    V        uint64
    d        uint64
    data     V*d float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import PAD_ID, RESERVED, Vocab

MAGIC = b"CMFE"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQQ")


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    vocab_hash: str
    matrix: np.ndarray  # [V, d]
    loss_log: list[float] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _pairs(sentences: Sequence[Sequence[int]], window: int) -> np.ndarray:
    out = []
    for s in sentences:
        s = np.asarray(s, dtype=np.int64)
        n = len(s)
        for off in range(1, window + 1):
            if off >= n:
                break
            out.append(np.stack([s[:-off], s[off:]], axis=1))
            out.append(np.stack([s[off:], s[:-off]], axis=1))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _apply_mean(w: np.ndarray, rows: np.ndarray, grads: np.ndarray, lr: float) -> None:
    # rows repeated within a batch get their mean gradient; summing them
    # lets frequent tokens take steps of batch_size * lr and diverge
    uniq, inv, counts = np.unique(rows, return_inverse=True, return_counts=True)
    acc = np.zeros((len(uniq), w.shape[1]))
    np.add.at(acc, inv, grads)
    w[uniq] -= lr * acc / counts[:, None]


def train_skipgram(sentences: Sequence[Sequence[int]], vocab: Vocab, dim: int = 300, window: int = 4,
                   negatives: int = 5, epochs: int = 5, seed: int = 0, lr: float = 0.025,
                   batch_size: int = 256) -> EmbeddingMatrix:
    """Train input vectors on (center, context) id pairs from ``sentences``.

    Negatives come from the unigram^0.75 distribution over non-reserved
    tokens, so reserved rows (and <pad> in particular) are never touched.
    """
    vocab_size = len(vocab)
    n_real = vocab_size - len(RESERVED)
    if n_real < 2:
        raise ValueError("vocabulary too small to train word vectors")
    pairs = _pairs(sentences, window)
    pairs = pairs[(pairs >= len(RESERVED)).all(axis=1)]
    if len(pairs) == 0:
        raise ValueError(f"no (center, context) pairs within window {window}; corpus too small")
    rng = np.random.default_rng(seed)
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(vocab_size, dim))
    w_in[:len(RESERVED)] = 0.0
    w_out = np.zeros((vocab_size, dim))

    counts = np.bincount(pairs[:, 0], minlength=vocab_size).astype(float)
    counts[:len(RESERVED)] = 0.0
    noise = counts ** 0.75
    noise /= noise.sum()
    cdf = np.cumsum(noise)

    log: list[float] = []
    for ep in range(epochs):
        order = rng.permutation(len(pairs))
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = pairs[order[start:start + batch_size]]
            c, o = batch[:, 0], batch[:, 1]
            neg = np.minimum(np.searchsorted(cdf, rng.random((len(batch), negatives))), vocab_size - 1)
            u = w_in[c]  # [B, d]
            v_pos = w_out[o]  # [B, d]
            v_neg = w_out[neg]  # [B, k, d]
            s_pos = np.einsum("bd,bd->b", u, v_pos)
            s_neg = np.einsum("bd,bkd->bk", u, v_neg)
            total += float(-(_log_sigmoid(s_pos).sum() + _log_sigmoid(-s_neg).sum()))
            seen += len(batch)
            g_pos = 1.0 / (1.0 + np.exp(-s_pos)) - 1.0  # d loss / d s_pos
            g_neg = 1.0 / (1.0 + np.exp(-s_neg))  # d loss / d s_neg
            g_u = g_pos[:, None] * v_pos + np.einsum("bk,bkd->bd", g_neg, v_neg)
            rows_out = np.concatenate([o, neg.reshape(-1)])
            g_out = np.concatenate([g_pos[:, None] * u, (g_neg[..., None] * u[:, None, :]).reshape(-1, dim)])
            _apply_mean(w_out, rows_out, g_out, lr)
            _apply_mean(w_in, c, g_u, lr)
        log.append(total / seen)
    w_in[PAD_ID] = 0.0
    return EmbeddingMatrix(vocab.content_hash(), w_in, log)


def save_embeddings(path: str | Path, emb: EmbeddingMatrix) -> None:
    v, d = emb.matrix.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, bytes.fromhex(emb.vocab_hash), v, d))
        fh.write(np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes())


def load_embeddings(path: str | Path, vocab: Vocab | None = None) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise EmbeddingFormatError(f"{path}: truncated header")
    magic, version, digest, v, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version} (reader handles {VERSION})")
    vocab_hash = digest.hex()
    if vocab is not None and vocab.content_hash() != vocab_hash:
        raise EmbeddingFormatError(
            f"{path}: vocab hash mismatch: file {vocab_hash[:12]}..., vocab {vocab.content_hash()[:12]}...")
    body = raw[_HEADER.size:]
    if len(body) != v * d * 4:
        raise EmbeddingFormatError(f"{path}: expected {v * d * 4} data bytes, found {len(body)}")
    mat = np.frombuffer(body, dtype="<f4").reshape(v, d).copy()
    return EmbeddingMatrix(vocab_hash, mat)
