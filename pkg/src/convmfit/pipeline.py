"""Dataset assembly and the three training stages, shared by the CLI and the ablation suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .classifier import (
    ABLATION_ROWS,
    BaselineResources,
    FinetuneConfig,
    build_baseline,
    build_classifier,
    finetune_classifier,
)
from .config import PipelineConfig
from .convmodel import ConvTrainConfig, ConversationModel, build_conversation_model, train_conversation_model
from .corpus import (
    Dialogue,
    SyntheticConfig,
    Triple,
    Turn,
    Utterance,
    Vocab,
    build_triples,
    build_vocab,
    conversation_pairs,
    dialogue_sentences,
    generate_synthetic_corpus,
    read_dialogues,
    split_dialogues,
    write_dialogues,
)
from .embeddings import EmbeddingMatrix, train_skipgram
from .lm import LanguageModel, LMTrainConfig, finetune_language_model, train_language_model
from .numerics import Module
from .training import EpochHook, TrainState

SPLITS = ("unlabeled", "train", "valid", "test")


@dataclass
class Dataset:
    """Dialogues by split plus the vocabulary.

    ``unlabeled`` dialogues carry no labels and only feed pre-training;
    the pre-training text is unlabeled + train, never valid or test.
    """

    splits: dict[str, list[Dialogue]]
    vocab: Vocab
    _triples: dict[str, list[Triple]] = field(default_factory=dict, repr=False)

    def triples(self, split: str) -> list[Triple]:
        if split not in self._triples:
            self._triples[split] = [t for d in self.splits[split] for t in build_triples(d)]
        return self._triples[split]

    @property
    def pretrain_dialogues(self) -> list[Dialogue]:
        return self.splits["unlabeled"] + self.splits["train"]

    def utterances(self, split_names: Sequence[str], role: str | None = None) -> list[list[str]]:
        return dialogue_sentences([d for s in split_names for d in self.splits[s]], role)

    def pairs(self, split_names: Sequence[str]):
        return [p for s in split_names for d in self.splits[s] for p in conversation_pairs(d)]


def _strip_labels(d: Dialogue, keep: int) -> tuple[Dialogue, int]:
    """Drop labels after the first ``keep`` labeled client utterances; returns (dialogue, kept)."""
    kept = 0
    turns = []
    for turn in d.turns:
        utts = []
        for u in turn.utterances:
            if u.labels is not None:
                if kept < keep:
                    kept += 1
                else:
                    u = Utterance(u.text, u.role, None)
            utts.append(u)
        turns.append(Turn(turn.role, tuple(utts)))
    return Dialogue(d.id, tuple(turns)), kept


def generate_dataset(cfg: PipelineConfig) -> dict[str, list[Dialogue]]:
    """Synthetic corpus capped at ``corpus.n_triples`` labeled utterances, split by dialogue."""
    c = cfg.corpus
    dialogues = generate_synthetic_corpus(SyntheticConfig(
        n_dialogues=c.n_dialogues, vocab_size=c.vocab_size, label_mix=tuple(c.label_mix), seed=cfg.seed,
        multi_label_rate=c.multi_label_rate, labeled_fraction=c.labeled_fraction,
        topic_coherence=c.topic_coherence, zipf_exponent=c.zipf_exponent,
        noise_tokens=tuple(c.noise_tokens), indicative_tokens=tuple(c.indicative_tokens),
        planted_bigrams=c.planted_bigrams, planted_rate=c.planted_rate,
    ))
    budget = c.n_triples if c.n_triples is not None else float("inf")
    labeled, unlabeled = [], []
    for d in dialogues:
        has_labels = any(u.labels is not None for u in d.client_utterances())
        if has_labels and budget > 0:
            d, kept = _strip_labels(d, int(min(budget, 1 << 30)))
            budget -= kept
            labeled.append(d)
        else:
            if has_labels:
                d, _ = _strip_labels(d, 0)
            unlabeled.append(d)
    train, valid, test = split_dialogues(labeled, c.split, cfg.seed)
    return {"unlabeled": unlabeled, "train": train, "valid": valid, "test": test}


def make_vocab(splits: dict[str, list[Dialogue]], cfg: PipelineConfig) -> Vocab:
    """Vocabulary from the pre-training text (unlabeled + train)."""
    return build_vocab(dialogue_sentences(splits["unlabeled"] + splits["train"]), cfg.corpus.min_count)


def build_dataset(cfg: PipelineConfig) -> Dataset:
    splits = generate_dataset(cfg)
    return Dataset(splits, make_vocab(splits, cfg))


def write_dataset(ds: Dataset, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        write_dialogues(out / f"{name}.jsonl", ds.splits[name])
    ds.vocab.save(out / "vocab.tsv")


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    missing = [n for n in SPLITS if not (path / f"{n}.jsonl").exists()] + \
        ([] if (path / "vocab.tsv").exists() else ["vocab"])
    if missing:
        raise FileNotFoundError(f"data directory {path} lacks: {', '.join(missing)}")
    splits = {n: read_dialogues(path / f"{n}.jsonl") for n in SPLITS}
    return Dataset(splits, Vocab.load(path / "vocab.tsv"))


# -- stages --------------------------------------------------------------------------------

def train_embeddings_stage(cfg: PipelineConfig, ds: Dataset) -> EmbeddingMatrix:
    e = cfg.embeddings
    sentences = [ds.vocab.ids(s) for s in ds.utterances(("unlabeled", "train"))]
    return train_skipgram(sentences, ds.vocab, dim=e.dim, window=e.window, negatives=e.negatives,
                          epochs=e.epochs, seed=cfg.seed, lr=e.lr, batch_size=e.batch_size)


def lm_config(cfg: PipelineConfig, role: str) -> LMTrainConfig:
    m = cfg.lm
    return LMTrainConfig(role=role, dim=cfg.embeddings.dim, n_layers=m.n_layers, batch_size=m.batch_size,
                         seq_len=m.seq_len, epochs=m.epochs, lr=m.lr, emb_dropout=m.emb_dropout,
                         out_dropout=m.out_dropout, patience=m.patience, seed=cfg.seed,
                         finetune_lr_scale=m.finetune_lr_scale, finetune_epochs=m.finetune_epochs,
                         finetune_stop_ratio=m.finetune_stop_ratio)


@dataclass
class LMStageState:
    """Resume state of the two LM phases: pre-training, then fine-tuning."""

    pretrain: TrainState | None = None
    finetune: TrainState | None = None

    @property
    def log(self) -> list[dict]:
        return [r for st in (self.pretrain, self.finetune) if st is not None for r in st.log]


def train_lm_stage(cfg: PipelineConfig, ds: Dataset, role: str, word_vectors: np.ndarray | None,
                   state: LMStageState | None = None, hook=None) -> tuple[LanguageModel, LMStageState]:
    """Pre-train on unlabeled + train text, then fine-tune on the labeled train split.

    ``hook(stage_state)`` runs after every epoch of either phase.  A state
    with a fine-tuning phase skips pre-training on resume.
    """
    lmc = lm_config(cfg, role)
    valid = ds.utterances(("valid",), role)
    st = state or LMStageState()

    def pre_hook(ts: TrainState) -> None:
        st.pretrain = ts
        if hook is not None:
            hook(st)

    if st.finetune is None:
        lm, st.pretrain = train_language_model(role, ds.utterances(("unlabeled", "train"), role), ds.vocab, lmc,
                                               valid, word_vectors, cfg.dtype, st.pretrain, pre_hook)
    else:
        lm = LanguageModel(len(ds.vocab), lmc.dim, lmc.n_layers, role, lmc.emb_dropout, lmc.out_dropout,
                           seed=lmc.seed, dtype=cfg.dtype)
    if lmc.finetune_epochs > 0:
        def phase_hook(ft: TrainState) -> None:
            st.finetune = ft
            if hook is not None:
                hook(st)

        lm, st.finetune = finetune_language_model(lm, ds.utterances(("train",), role), ds.vocab, lmc, valid,
                                                  st.finetune, phase_hook)
    return lm, st


def conv_config(cfg: PipelineConfig) -> ConvTrainConfig:
    c = cfg.conv
    return ConvTrainConfig(n_layers=c.n_layers, dropout=c.dropout, batch_size=c.batch_size, epochs=c.epochs,
                           lr=c.lr, patience=c.patience, seed=cfg.seed, max_len=cfg.corpus.max_len)


def train_conv_stage(cfg: PipelineConfig, ds: Dataset, counselor_lm: LanguageModel, client_lm: LanguageModel,
                     state: TrainState | None = None, hook: EpochHook | None = None,
                     step_callback=None) -> tuple[ConversationModel, TrainState]:
    cc = conv_config(cfg)
    model = build_conversation_model(counselor_lm, client_lm, cfg.seed, cc.n_layers, cc.dropout)
    return train_conversation_model(model, ds.pairs(("unlabeled", "train")), ds.vocab, cc,
                                    ds.pairs(("valid",)), state, hook, step_callback)


def finetune_config(cfg: PipelineConfig, seed: int) -> FinetuneConfig:
    c = cfg.classifier
    return FinetuneConfig(epochs=c.epochs, patience=c.patience, threshold=cfg.eval.threshold, seed=seed, lr=c.lr,
                          batch_size=c.batch_size, max_len=cfg.corpus.max_len, unfreeze_period=c.unfreeze_period)


@dataclass
class Pretrained:
    """Artifacts of the pre-training stages; any may be absent."""

    word_vectors: np.ndarray | None = None
    counselor_lm: LanguageModel | None = None
    client_lm: LanguageModel | None = None
    conv: ConversationModel | None = None


class MissingStageError(RuntimeError):
    def __init__(self, stage: str, needed_by: str):
        super().__init__(f"{needed_by} needs the {stage} stage; train it first")
        self.stage = stage


def _placeholder_lm(cfg: PipelineConfig, vocab: Vocab, role: str, seed: int) -> LanguageModel:
    m = cfg.lm
    return LanguageModel(len(vocab), cfg.embeddings.dim, m.n_layers, role, m.emb_dropout, m.out_dropout,
                         seed=seed, dtype=cfg.dtype)


def classifier_body(cfg: PipelineConfig, vocab: Vocab, pre: Pretrained, row: str, seed: int) -> ConversationModel:
    """The conversation model a row starts from, checking that its pre-trained parts exist.

    Rows without pre-trained conversation layers are assembled from the
    fine-tuned LMs plus fresh seq2seq layers; rows without pre-trained LMs
    from randomly initialized LMs.
    """
    ab = ABLATION_ROWS[row]
    need = f"ablation row {row}"
    if ab.pretrained_conv_seq2seq:
        if pre.conv is None:
            raise MissingStageError("conv", need)
        return pre.conv
    cc = conv_config(cfg)
    if ab.pretrained_lms:
        if pre.counselor_lm is None:
            raise MissingStageError("lm-counselor", need)
        if pre.client_lm is None:
            raise MissingStageError("lm-client", need)
        return build_conversation_model(pre.counselor_lm, pre.client_lm, seed, cc.n_layers, cc.dropout)
    if ab.pretrained_embeddings and pre.word_vectors is None:
        raise MissingStageError("embeddings", need)
    lmc = _placeholder_lm(cfg, vocab, "counselor", seed)
    lmx = _placeholder_lm(cfg, vocab, "client", seed + 1)
    return build_conversation_model(lmc, lmx, seed, cc.n_layers, cc.dropout)


def build_model(cfg: PipelineConfig, vocab: Vocab, pre: Pretrained, seed: int, row: str | None = None,
                baseline: str | None = None) -> Module:
    """Untrained classifier for an ablation row or a baseline variant."""
    c = cfg.classifier
    if baseline is not None:
        if pre.word_vectors is None and baseline != "ULMFiT":
            raise MissingStageError("embeddings", f"{baseline} baseline")
        if pre.client_lm is None and baseline == "ULMFiT":
            raise MissingStageError("lm-client", "ULMFiT baseline")
        res = BaselineResources(word_vectors=pre.word_vectors, client_lm=pre.client_lm, hidden=cfg.embeddings.dim,
                                dtype=cfg.dtype, cnn_widths=tuple(c.cnn_widths), cnn_filters=c.cnn_filters,
                                task_layers=c.task_layers)
        return build_baseline(baseline, res, seed)
    row = row or c.ablation
    body = classifier_body(cfg, vocab, pre, row, seed)
    return build_classifier(body, ABLATION_ROWS[row], seed, c.att_dim, c.task_layers, c.task_dropout,
                            word_vectors=pre.word_vectors)


def train_classifier_stage(cfg: PipelineConfig, ds: Dataset, pre: Pretrained, seed: int, row: str | None = None,
                           baseline: str | None = None, state: TrainState | None = None,
                           hook: EpochHook | None = None, model: Module | None = None) -> tuple[Module, TrainState]:
    model = model or build_model(cfg, ds.vocab, pre, seed, row, baseline)
    return finetune_classifier(model, ds.triples("train"), ds.triples("valid"), ds.vocab,
                               finetune_config(cfg, seed), state, hook)


def pretrain_all(cfg: PipelineConfig, ds: Dataset, log=None) -> Pretrained:
    """Run embeddings, both LMs and the conversation model in sequence."""
    emb = train_embeddings_stage(cfg, ds)
    wv = emb.matrix.astype(cfg.dtype)
    lms = {}
    for role in ("counselor", "client"):
        lms[role], st = train_lm_stage(cfg, ds, role, wv)
        if log is not None:
            log.extend(st.log)
    conv, st = train_conv_stage(cfg, ds, lms["counselor"], lms["client"])
    if log is not None:
        log.extend(st.log)
    return Pretrained(wv, lms["counselor"], lms["client"], conv)
