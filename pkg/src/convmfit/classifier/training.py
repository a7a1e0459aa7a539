"""Fine-tuning with gradual unfreezing and early stopping; prediction records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..corpus import LABELS, Triple, Vocab
from ..evaluation import MetricsReport
from ..numerics import Adam, Module, Tensor, backward, bce_loss, no_grad
from ..training import EpochHook, TrainState, finish_epoch, restore
from .model import ROLE_NAMES, ClassifierBatch, UnfreezeSchedule, encode_triples

RNG_NAMES = ("enc_lm", "enc_s2s", "dec_lm", "dec_s2s", "task")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    patience: int | None = 3
    threshold: float = 0.5
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 32
    max_len: int = 64
    unfreeze_period: int = 2


def check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")


def _rngs(entropy) -> dict[str, np.random.Generator]:
    seqs = np.random.SeedSequence(entropy).spawn(len(RNG_NAMES))
    return {n: np.random.default_rng(s) for n, s in zip(RNG_NAMES, seqs)}


def _min_width(model) -> int:
    widths = getattr(model, "widths", None)
    return max(widths) if widths else 1


def iterate_batches(triples: Sequence[Triple], vocab: Vocab, batch_size: int, max_len: int,
                    order: np.ndarray | None = None, min_width: int = 1):
    if order is None:
        order = np.arange(len(triples))
    for start in range(0, len(order), batch_size):
        chunk = [triples[i] for i in order[start:start + batch_size]]
        yield encode_triples(chunk, vocab, max_len, min_width)


def mean_loss(model, triples: Sequence[Triple], vocab: Vocab, cfg: FinetuneConfig) -> float:
    was = model.training
    model.eval()
    total = 0.0
    with no_grad():
        for batch in iterate_batches(triples, vocab, 64, cfg.max_len, min_width=_min_width(model)):
            probs, _ = model.forward(batch)
            total += float(bce_loss(probs, batch.labels).data) * len(batch)
    model.train(was)
    return total / len(triples)


def finetune_classifier(model: Module, train: Sequence[Triple], valid: Sequence[Triple], vocab: Vocab,
                        cfg: FinetuneConfig, state: TrainState | None = None, hook: EpochHook | None = None,
                        ) -> tuple[Module, TrainState]:
    """Minimize mean binary cross-entropy over the 5 outputs with Adam.

    With ``model.gradual_unfreezing`` the parameter groups (top first) become
    trainable one per ``unfreeze_period`` epochs; frozen groups get neither
    updates nor optimizer moments.  Once all groups are trainable, stops after
    ``patience`` epochs without a lower validation loss; the best snapshot is
    restored.
    """
    if not train or not valid:
        raise ValueError("fine-tuning needs non-empty train and valid splits")
    check_threshold(cfg.threshold)
    schedule = UnfreezeSchedule(model.param_groups(), cfg.unfreeze_period, model.gradual_unfreezing)
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    state = restore(model, opt, state)
    min_width = _min_width(model)
    while state.epoch < cfg.epochs and not state.stopped:
        ep = state.epoch
        schedule.apply(ep + 1)
        model.train()
        order = np.random.default_rng([cfg.seed, ep]).permutation(len(train))
        total = 0.0
        for step, batch in enumerate(iterate_batches(train, vocab, cfg.batch_size, cfg.max_len, order, min_width)):
            model.zero_grad()
            probs, _ = model.forward(batch, _rngs((cfg.seed, ep, step)))
            loss = bce_loss(probs, batch.labels)
            backward(loss)
            model.after_backward()
            opt.step()
            total += float(loss.data) * len(batch)
        valid_loss = mean_loss(model, valid, vocab, cfg)
        record = {"stage": "classifier", "epoch": ep + 1, "train_loss": total / len(train),
                  "valid_loss": valid_loss, "active_groups": schedule.n_active(ep + 1)}
        # patience only runs once every group is trainable
        all_active = schedule.n_active(ep + 1) == len(schedule.groups)
        finish_epoch(model, opt, state, valid_loss, cfg.patience, record, hook, count_patience=all_active)
    schedule.apply(10 ** 6)  # leave everything trainable
    if state.best_model:
        model.load_state_dict(state.best_model)
    model.eval()
    return model, state


def threshold_labels(probs: Sequence[float], threshold: float = 0.5) -> list[str]:
    """Category names whose probability is at least ``threshold``."""
    check_threshold(threshold)
    return [LABELS[k] for k, p in enumerate(probs) if p >= threshold]


def predict_batch(model, batch: ClassifierBatch) -> tuple[np.ndarray, np.ndarray | None]:
    was = model.training
    model.eval()
    with no_grad():
        probs, att = model.forward(batch)
    model.train(was)
    return probs.data, (att.data if isinstance(att, Tensor) else None)


def predict(model, triples: Sequence[Triple], vocab: Vocab, threshold: float = 0.5, max_len: int = 64,
            batch_size: int = 64) -> list[dict]:
    """One record per triple: probabilities, thresholded labels (p >= threshold), attention."""
    check_threshold(threshold)
    records = []
    for batch in iterate_batches(triples, vocab, batch_size, max_len, min_width=_min_width(model)):
        probs, att = predict_batch(model, batch)
        ids, mask, roles = batch.ids, batch.mask, batch.roles
        for b, tid in enumerate(batch.triple_ids):
            rec = {
                "triple_id": tid,
                "probs": [float(p) for p in probs[b]],
                "labels": threshold_labels(probs[b], threshold),
                "gold": [LABELS[k] for k in range(len(LABELS)) if batch.labels[b, k]],
                "attention": [],
            }
            if att is not None:
                rec["attention"] = [
                    {"token": vocab.itos[ids[b, t]], "weight": float(att[b, t]), "role": ROLE_NAMES[int(roles[b, t])]}
                    for t in range(ids.shape[1]) if mask[b, t]
                ]
            records.append(rec)
    return records


def labels_from_records(records: Sequence[dict], key: str) -> np.ndarray:
    out = np.zeros((len(records), len(LABELS)), dtype=np.int64)
    for i, rec in enumerate(records):
        for lab in rec[key]:
            out[i, LABELS.index(lab)] = 1
    return out


def evaluate(model, triples: Sequence[Triple], vocab: Vocab, threshold: float = 0.5,
             max_len: int = 64) -> tuple[MetricsReport, list[dict]]:
    records = predict(model, triples, vocab, threshold, max_len)
    report = MetricsReport.from_predictions(labels_from_records(records, "labels"),
                                            labels_from_records(records, "gold"))
    return report, records
