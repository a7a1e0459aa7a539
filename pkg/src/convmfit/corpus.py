"""Dialogue data model, tokenization, vocabulary, triples, splits and a synthetic corpus.

File formats
------------
Dialogue file: UTF-8, one JSON object per line::

    {"id": "d00003", "turns": [{"role": "counselor", "utterances": [{"text": "..."}]},
                               {"role": "client", "utterances": [{"text": "...", "labels": ["Anec"]}]}]}

``labels`` appears only on labeled client utterances and uses the short
names Fact/Anec/Prob/Chan/Proc.  Keys are written sorted, separators
``", "``/``": "``, non-ASCII kept verbatim, lines end in ``\\n``.

Vocab file: UTF-8, one ``token<TAB>id<TAB>frequency`` line per entry in id
order, reserved tokens first with frequency 0.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABELS = ("Fact", "Anec", "Prob", "Chan", "Proc")
ROLES = ("counselor", "client")

PAD, UNK, BOS, EOS, SEP = "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"
RESERVED = (PAD, UNK, BOS, EOS, SEP)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, SEP_ID = range(5)

# proportion of triples carrying each label, from the per-class label counts
# (1129, 7726, 6713, 1297, 6459) over 21,100 triples
DEFAULT_LABEL_MIX = (0.054, 0.366, 0.318, 0.061, 0.306)


# -- data model ---------------------------------------------------------------------

@dataclass(frozen=True)
class Utterance:
    text: str
    role: str
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.labels is not None:
            if self.role != "client":
                raise ValueError("only client utterances carry labels")
            if len(self.labels) == 0:
                raise ValueError("a labeled utterance needs at least one label")
            bad = [lab for lab in self.labels if lab not in LABELS]
            if bad:
                raise ValueError(f"unknown label(s) {bad}")


@dataclass(frozen=True)
class Turn:
    role: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        if not self.utterances:
            raise ValueError("a turn has at least one utterance")
        if any(u.role != self.role for u in self.utterances):
            raise ValueError("all utterances in a turn share its role")


@dataclass(frozen=True)
class Dialogue:
    id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"dialogue {self.id!r} is empty")

    def client_utterances(self) -> list[Utterance]:
        return [u for t in self.turns if t.role == "client" for u in t.utterances]

    def to_record(self) -> dict:
        turns = []
        for t in self.turns:
            utts = []
            for u in t.utterances:
                rec = {"text": u.text}
                if u.labels is not None:
                    rec["labels"] = list(u.labels)
                utts.append(rec)
            turns.append({"role": t.role, "utterances": utts})
        return {"id": self.id, "turns": turns}

    @classmethod
    def from_record(cls, rec: dict) -> "Dialogue":
        turns = []
        for t in rec["turns"]:
            role = t["role"]
            utts = tuple(Utterance(u["text"], role, tuple(u["labels"]) if "labels" in u else None)
                         for u in t["utterances"])
            turns.append(Turn(role, utts))
        return cls(rec["id"], tuple(turns))


def multi_hot(labels: Iterable[str] | None) -> np.ndarray:
    out = np.zeros(len(LABELS), dtype=np.int64)
    for lab in labels or ():
        out[LABELS.index(lab)] = 1
    return out


def write_dialogues(path: str | Path, dialogues: Sequence[Dialogue]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in dialogues:
            fh.write(json.dumps(d.to_record(), sort_keys=True, ensure_ascii=False) + "\n")


def read_dialogues(path: str | Path) -> list[Dialogue]:
    with open(path, encoding="utf-8") as fh:
        return [Dialogue.from_record(json.loads(line)) for line in fh if line.strip()]


# -- tokenization ---------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\[[A-Za-z_]+\]|#+|[^\W_]+|\S", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Split on whitespace and detach punctuation/emoji as their own tokens.

    Bracketed anonymization markers such as ``[NAME]`` and runs of the
    digit mask ``#`` survive as single tokens.
    """
    return _TOKEN_RE.findall(text)


# -- vocabulary --------------------------------------------------------------------------

class Vocab:
    def __init__(self, tokens: Sequence[str], freqs: Sequence[int] | None = None):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.freqs = list(freqs) if freqs is not None else [0] * len(tokens)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK_ID)

    def ids(self, toks: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in toks]

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for i, t in enumerate(self.itos):
            h.update(f"{t}\t{i}\n".encode("utf-8"))
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, (t, f) in enumerate(zip(self.itos, self.freqs)):
                fh.write(f"{t}\t{i}\t{f}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        toks, freqs = [], []
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh):
                tok, idx, freq = line.rstrip("\n").split("\t")
                if int(idx) != n:
                    raise ValueError(f"vocab file ids out of order at line {n + 1}")
                toks.append(tok)
                freqs.append(int(freq))
        return cls(toks, freqs)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1, max_size: int | None = None) -> Vocab:
    """Frequency-ordered vocabulary over tokenized sentences.

    Ties keep first-occurrence order.  ``max_size`` caps the non-reserved
    entries.
    """
    counts: Counter[str] = Counter()
    n_sent = 0
    for sent in corpus:
        n_sent += 1
        counts.update(t for t in sent if t not in RESERVED)
    if n_sent == 0:
        raise ValueError("build_vocab needs a non-empty corpus")
    kept = [(t, c) for t, c in counts.most_common() if c >= min_count]
    if max_size is not None:
        kept = kept[:max_size]
    return Vocab(list(RESERVED) + [t for t, _ in kept], [0] * len(RESERVED) + [c for _, c in kept])


def dialogue_sentences(dialogues: Iterable[Dialogue], role: str | None = None) -> list[list[str]]:
    return [tokenize(u.text) for d in dialogues for t in d.turns if role in (None, t.role)
            for u in t.utterances]


# -- triples -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Triple:
    """Classification unit: counselor field, client context, client target, labels.

    Fields hold tokens; multi-utterance fields are joined with ``<sep>``.
    """

    id: str
    dialogue_id: str
    counselor: tuple[str, ...]
    context: tuple[str, ...]
    target: tuple[str, ...]
    labels: tuple[int, ...] = field(default=(0, 0, 0, 0, 0))

    @property
    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    @property
    def label_names(self) -> list[str]:
        return [LABELS[i] for i, v in enumerate(self.labels) if v]


def join_with_sep(utterances: Sequence[Sequence[str]]) -> tuple[str, ...]:
    out: list[str] = []
    for k, u in enumerate(utterances):
        if k:
            out.append(SEP)
        out.extend(u)
    return tuple(out)


def build_triples(dialogue: Dialogue, labeled_only: bool = True) -> list[Triple]:
    """One triple per client utterance (per labeled one when ``labeled_only``)."""
    triples: list[Triple] = []
    counselor: tuple[str, ...] = ()
    for ti, turn in enumerate(dialogue.turns):
        toks = [tokenize(u.text) for u in turn.utterances]
        if turn.role == "counselor":
            counselor = join_with_sep(toks)
            continue
        for ui, utt in enumerate(turn.utterances):
            if labeled_only and utt.labels is None:
                continue
            if not toks[ui]:
                raise ValueError(f"empty client utterance in {dialogue.id} turn {ti}")
            triples.append(Triple(
                id=f"{dialogue.id}:{ti}:{ui}",
                dialogue_id=dialogue.id,
                counselor=counselor,
                context=join_with_sep(toks[:ui]),
                target=tuple(toks[ui]),
                labels=tuple(int(v) for v in multi_hot(utt.labels)),
            ))
    return triples


def conversation_pairs(dialogue: Dialogue) -> list[tuple[tuple[str, ...], tuple[str, ...]]]:
    """(counselor turn, immediately following client turn), each joined with <sep>."""
    pairs = []
    turns = dialogue.turns
    for a, b in zip(turns, turns[1:]):
        if a.role == "counselor" and b.role == "client":
            pairs.append((join_with_sep([tokenize(u.text) for u in a.utterances]),
                          join_with_sep([tokenize(u.text) for u in b.utterances])))
    return pairs


# -- splitting ------------------------------------------------------------------------------

def _split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    if n < len(ratios):
        raise ValueError(f"cannot split {n} dialogues into {len(ratios)} parts")
    sizes = [int(round(r * n)) for r in ratios[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 0:
        sizes[-2] += sizes[-1]
        sizes[-1] = 0
    return sizes


def split_dialogues(dialogues: Sequence[Dialogue], ratios=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[list[Dialogue], ...]:
    sizes = _split_sizes(len(dialogues), ratios)
    order = np.random.default_rng(seed).permutation(len(dialogues))
    out, start = [], 0
    for s in sizes:
        idx = sorted(order[start:start + s])
        out.append([dialogues[i] for i in idx])
        start += s
    return tuple(out)


def split_dataset(triples: Sequence[Triple], ratios=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[list[Triple], ...]:
    """Split at dialogue granularity; every dialogue's triples land together."""
    dids = list(dict.fromkeys(t.dialogue_id for t in triples))
    sizes = _split_sizes(len(dids), ratios)
    order = np.random.default_rng(seed).permutation(len(dids))
    part_of: dict[str, int] = {}
    start = 0
    for k, s in enumerate(sizes):
        for i in order[start:start + s]:
            part_of[dids[i]] = k
        start += s
    parts: list[list[Triple]] = [[] for _ in sizes]
    for t in triples:
        parts[part_of[t.dialogue_id]].append(t)
    return tuple(parts)


# -- synthetic corpus -----------------------------------------------------------------------

PUNCT = (".", ",", "?", "!", "~")
_CONS = "bdfgklmnprstvz"
_VOWS = "aeiou"
_SYLL = [c + v for c in _CONS for v in _VOWS]


def pseudo_word(i: int) -> str:
    n = len(_SYLL)
    first = _SYLL[i % n]
    rest = i // n
    second = _SYLL[rest % n]
    third = "" if rest < n else _SYLL[(rest // n) % n]
    return first + second + third


@dataclass(frozen=True)
class SyntheticConfig:
    n_dialogues: int = 300
    vocab_size: int = 1000
    label_mix: tuple[float, ...] = DEFAULT_LABEL_MIX
    seed: int = 0
    multi_label_rate: float = 0.10
    labeled_fraction: float = 1.0
    turn_pairs: tuple[int, int] = (2, 5)
    counselor_utterances: tuple[int, int] = (1, 2)
    client_utterances: tuple[int, int] = (1, 3)
    noise_tokens: tuple[int, int] = (2, 5)
    indicative_tokens: tuple[int, int] = (1, 2)  # per label of a client utterance
    topic_coherence: float = 0.6
    zipf_exponent: float = 1.0
    planted_bigrams: bool = False
    planted_rate: float = 0.3

    def __post_init__(self):
        if self.vocab_size < 50:
            raise ValueError("synthetic vocab_size must be >= 50")
        if len(self.label_mix) != len(LABELS) or sum(self.label_mix) <= 0 or min(self.label_mix) < 0:
            raise ValueError("label_mix needs 5 non-negative weights with positive sum")


@dataclass(frozen=True)
class Lexicon:
    indicative: tuple[tuple[str, ...], ...]  # per label
    counselor_topic: tuple[tuple[str, ...], ...]  # per label
    planted: tuple[tuple[str, str], ...]  # per label
    noise: tuple[str, ...]


def build_lexicon(vocab_size: int) -> Lexicon:
    n_words = vocab_size - len(PUNCT)
    n_cls = len(LABELS)
    k_ind = max(4, int(0.06 * n_words))
    k_top = max(2, int(0.03 * n_words))
    words = [pseudo_word(i) for i in range(n_words)]
    pos = 0

    def take(k):
        nonlocal pos
        out = tuple(words[pos:pos + k])
        pos += k
        return out

    planted = tuple((a, b) for a, b in (take(2) for _ in range(n_cls)))
    indicative = tuple(take(k_ind) for _ in range(n_cls))
    topic = tuple(take(k_top) for _ in range(n_cls))
    noise = tuple(words[pos:])
    if len(noise) < 4:
        raise ValueError("vocab_size too small for the lexicon layout")
    return Lexicon(indicative, topic, planted, noise)


def _zipf_weights(k: int, s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, k + 1) ** s
    return w / w.sum()


class _Sampler:
    def __init__(self, cfg: SyntheticConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.lex = build_lexicon(cfg.vocab_size)
        mix = np.asarray(cfg.label_mix, dtype=float)
        self.mix = mix / mix.sum()
        self.w_ind = _zipf_weights(len(self.lex.indicative[0]), cfg.zipf_exponent)
        self.w_top = _zipf_weights(len(self.lex.counselor_topic[0]), cfg.zipf_exponent)
        self.w_noise = _zipf_weights(len(self.lex.noise), cfg.zipf_exponent)

    def pick(self, pool, weights) -> str:
        return pool[int(self.rng.choice(len(pool), p=weights))]

    def span(self, lo_hi) -> int:
        return int(self.rng.integers(lo_hi[0], lo_hi[1] + 1))

    def labels_for(self, topic: int) -> tuple[int, ...]:
        if self.rng.random() < self.cfg.topic_coherence:
            first = topic
        else:
            first = int(self.rng.choice(len(LABELS), p=self.mix))
        labels = [first]
        if self.rng.random() < self.cfg.multi_label_rate:
            rest = self.mix.copy()
            rest[first] = 0.0
            if rest.sum() > 0:
                labels.append(int(self.rng.choice(len(LABELS), p=rest / rest.sum())))
        return tuple(sorted(labels))

    def _noise(self) -> list[list[str]]:
        return [[self.pick(self.lex.noise, self.w_noise)] for _ in range(self.span(self.cfg.noise_tokens))]

    def _insert(self, chunks: list[list[str]], chunk: list[str]) -> None:
        # chunks stay whole, so later insertions never split a planted bigram
        at = int(self.rng.integers(0, len(chunks) + 1))
        chunks.insert(at, chunk)

    def client_text(self, labels: Sequence[int]) -> str:
        chunks = self._noise()
        for c in labels:
            for _ in range(self.span(self.cfg.indicative_tokens)):
                self._insert(chunks, [self.pick(self.lex.indicative[c], self.w_ind)])
            if self.cfg.planted_bigrams and self.rng.random() < self.cfg.planted_rate:
                self._insert(chunks, list(self.lex.planted[c]))
        if self.rng.random() < 0.1:
            self._insert(chunks, ["#"])
        return self._finish(chunks, ".")

    def counselor_text(self, topic: int) -> str:
        chunks = self._noise()
        for _ in range(1 + int(self.rng.random() < 0.5)):
            self._insert(chunks, [self.pick(self.lex.counselor_topic[topic], self.w_top)])
        return self._finish(chunks, "?")

    def _finish(self, chunks: list[list[str]], default_end: str) -> str:
        r = self.rng.random()
        end = default_end if r < 0.6 else PUNCT[int(self.rng.integers(0, len(PUNCT)))]
        text = " ".join(t for ch in chunks for t in ch)
        # attach the final mark directly half of the time, as chat text does
        return text + end if self.rng.random() < 0.5 else f"{text} {end}"


def generate_synthetic_corpus(cfg: SyntheticConfig) -> list[Dialogue]:
    """Seeded counselor/client dialogues with category-conditioned client utterances.

    Each counselor turn carries a topic category (drawn from ``label_mix``);
    client utterances in the following turn take that category with
    probability ``topic_coherence`` and otherwise an independent draw, so
    the label marginal stays ``label_mix``.
    """
    rng = np.random.default_rng(cfg.seed)
    s = _Sampler(cfg, rng)
    out = []
    for di in range(cfg.n_dialogues):
        labeled = rng.random() < cfg.labeled_fraction
        turns: list[Turn] = []
        open_with_client = rng.random() < 0.1
        for k in range(s.span(cfg.turn_pairs)):
            topic = int(rng.choice(len(LABELS), p=s.mix))
            if not (k == 0 and open_with_client):
                utts = tuple(Utterance(s.counselor_text(topic), "counselor")
                             for _ in range(s.span(cfg.counselor_utterances)))
                turns.append(Turn("counselor", utts))
            cl = []
            for _ in range(s.span(cfg.client_utterances)):
                labs = s.labels_for(topic)
                names = tuple(LABELS[c] for c in labs)
                cl.append(Utterance(s.client_text(labs), "client", names if labeled else None))
            turns.append(Turn("client", tuple(cl)))
        out.append(Dialogue(f"d{di:05d}", tuple(turns)))
    return out


# -- encoding ---------------------------------------------------------------------------------

@dataclass
class Encoded:
    ids: np.ndarray  # [B, T] int64
    mask: np.ndarray  # [B, T] bool
    lengths: np.ndarray  # [B] content tokens before wrapping/truncation


def encode_sequences(seqs: Sequence[Sequence[str]], vocab: Vocab, max_len: int = 64,
                     min_width: int = 1) -> Encoded:
    """Wrap each sequence in <bos>/<eos>, truncate to ``max_len``, right-pad."""
    if max_len < 2:
        raise ValueError("max_len must leave room for <bos> and <eos>")
    rows = [[BOS_ID] + vocab.ids(s)[:max_len - 2] + [EOS_ID] for s in seqs]
    width = max(min_width, max((len(r) for r in rows), default=2))
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
    return Encoded(ids, ids != PAD_ID, np.array([len(s) for s in seqs], dtype=np.int64))


@dataclass
class EncodedBatch:
    triple_ids: list[str]
    counselor: Encoded
    context: Encoded
    target: Encoded
    labels: np.ndarray  # [B, 5]


def encode_batch(triples: Sequence[Triple], vocab: Vocab, max_len: int = 64) -> EncodedBatch:
    return EncodedBatch(
        triple_ids=[t.id for t in triples],
        counselor=encode_sequences([t.counselor for t in triples], vocab, max_len),
        context=encode_sequences([t.context for t in triples], vocab, max_len),
        target=encode_sequences([t.target for t in triples], vocab, max_len),
        labels=np.stack([t.label_array for t in triples]) if triples else np.zeros((0, len(LABELS)), np.int64),
    )
