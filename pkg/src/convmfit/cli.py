"""Command-line pipeline.

Every command works on one run directory (``--out``): ``gen-data`` writes
``data/``, each training stage writes ``<stage>.ckpt`` plus a JSON-lines
log, and every artifact gets its effective config next to it
(``<artifact>.config.json``).  Later stages read earlier artifacts from the
same directory.  Exit codes: 0 ok, 2 config error, 3 missing or mismatched
dependency, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .ablation import format_ablation_table, ordering_checks, run_ablation_suite
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, pack_train_state, save_checkpoint, \
    unpack_train_state
from .classifier import ABLATION_ROWS, VARIANTS, MissingResourceError, evaluate
from .config import ConfigError, PipelineConfig, from_dict, load_config, save_config
from .convmodel import ConversationModel, build_conversation_model
from .corpus import Vocab
from .evaluation import dump_records, format_key_phrase_report, format_metrics_table, key_phrase_report
from .lm import LanguageModel
from .numerics import Module, NumericError
from .pipeline import (
    Dataset,
    LMStageState,
    MissingStageError,
    Pretrained,
    build_dataset,
    build_model,
    conv_config,
    read_dataset,
    train_classifier_stage,
    train_conv_stage,
    train_embeddings_stage,
    train_lm_stage,
    write_dataset,
)
from .training import TrainState

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


class DependencyError(RuntimeError):
    pass


# -- config and run directory -------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """--config, else the run directory's config.json, else defaults; then flag overrides."""
    out = Path(args.out)
    if args.config:
        cfg = load_config(args.config)
    elif (out / "config.json").exists():
        cfg = load_config(out / "config.json")
    else:
        cfg = PipelineConfig()
    over: dict[str, Any] = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.precision is not None:
        over["precision"] = args.precision
    if getattr(args, "threshold", None) is not None:
        over["eval__threshold"] = args.threshold
    return cfg.replace(**over) if over else cfg


def write_effective_config(cfg: PipelineConfig, artifact: Path) -> None:
    save_config(cfg, artifact.with_name(artifact.name + ".config.json"))
    save_config(cfg, artifact.parent / "config.json")


def load_data(out: Path) -> Dataset:
    try:
        return read_dataset(out / "data")
    except FileNotFoundError as exc:
        raise DependencyError(f"no generated data in {out / 'data'} (run gen-data first): {exc}") from exc


def _ckpt_path(out: Path, stage: str) -> Path:
    return out / f"{stage}.ckpt"


def load_stage(out: Path, stage: str, vocab_hash: str, needed_by: str) -> Checkpoint:
    path = _ckpt_path(out, stage)
    if not path.exists():
        raise DependencyError(f"{needed_by} needs the {stage} stage; {path} not found")
    ckpt = load_checkpoint(path, stage=stage, vocab_hash=vocab_hash)
    if not ckpt.meta.get("complete"):
        raise DependencyError(f"{needed_by} needs the {stage} stage, but {path} is unfinished (resume it)")
    return ckpt


# -- model (re)construction from checkpoints ----------------------------------------------------

def _lm_meta(lm: LanguageModel) -> dict:
    return {"vocab_size": lm.vocab_size, "dim": lm.dim, "n_layers": lm.n_layers, "role": lm.role,
            "emb_dropout": lm.emb_dropout, "out_dropout": lm.out_dropout.rate}


def _lm_from_meta(meta: dict, dtype) -> LanguageModel:
    return LanguageModel(meta["vocab_size"], meta["dim"], meta["n_layers"], meta["role"], meta["emb_dropout"],
                         meta["out_dropout"], dtype=dtype)


def _dtype(cfg_dict: dict):
    return np.float32 if cfg_dict.get("precision") == "f32" else np.float64


def lm_from_checkpoint(ckpt: Checkpoint) -> LanguageModel:
    lm = _lm_from_meta(ckpt.meta["model"], _dtype(ckpt.config))
    lm.load_state_dict(ckpt.section("model"))
    lm.eval()
    return lm


def conv_from_checkpoint(ckpt: Checkpoint) -> ConversationModel:
    meta, dtype = ckpt.meta["model"], _dtype(ckpt.config)
    m = build_conversation_model(_lm_from_meta(meta["counselor"], dtype), _lm_from_meta(meta["client"], dtype),
                                 n_layers=meta["n_layers"], dropout=meta["dropout"])
    m.load_state_dict(ckpt.section("model"))
    m.eval()
    return m


def _placeholders(cfg: PipelineConfig, vocab_size: int) -> Pretrained:
    """Stand-ins with the right shapes; their values are overwritten by a checkpoint."""
    m = cfg.lm
    lms = [LanguageModel(vocab_size, cfg.embeddings.dim, m.n_layers, role, m.emb_dropout, m.out_dropout,
                         dtype=cfg.dtype) for role in ("counselor", "client")]
    cc = conv_config(cfg)
    conv = build_conversation_model(lms[0], lms[1], 0, cc.n_layers, cc.dropout)
    return Pretrained(np.zeros((vocab_size, cfg.embeddings.dim), dtype=cfg.dtype), lms[0], lms[1], conv)


def classifier_from_checkpoint(ckpt: Checkpoint, vocab: Vocab) -> tuple[Module, PipelineConfig]:
    cfg = from_dict(ckpt.config)
    meta = ckpt.meta["model"]
    model = build_model(cfg, vocab, _placeholders(cfg, len(vocab)), meta["seed"], meta["row"], meta["baseline"])
    model.load_state_dict(ckpt.section("model"))
    model.eval()
    return model, cfg


# -- stage runner -------------------------------------------------------------------------------

class StageWriter:
    """Writes a stage checkpoint after every epoch and appends the log as JSON lines."""

    def __init__(self, out: Path, stage: str, cfg: PipelineConfig, vocab_hash: str, model_meta: dict):
        self.path = _ckpt_path(out, stage)
        self.log_path = out / f"{stage}.log.jsonl"
        self.stage, self.cfg, self.vocab_hash, self.model_meta = stage, cfg, vocab_hash, model_meta
        self.logged = 0

    def save(self, model: Module | None, states: dict[str, TrainState], complete: bool,
             extra: dict[str, np.ndarray] | None = None, log: list[dict] | None = None) -> None:
        tensors = dict(extra or {})
        if model is not None:
            tensors.update({f"model/{k}": v for k, v in model.state_dict().items()})
        meta: dict[str, Any] = {"complete": complete, "model": self.model_meta, "states": {}}
        for name, st in states.items():
            if st is None:
                continue
            t, m = pack_train_state(st, prefix=f"state.{name}")
            tensors.update(t)
            meta["states"][name] = m
        log = log if log is not None else [r for st in states.values() if st is not None for r in st.log]
        save_checkpoint(self.path, Checkpoint(self.stage, self.cfg.to_dict(), self.cfg.content_hash(),
                                              self.vocab_hash, tensors, meta, log))
        write_effective_config(self.cfg, self.path)
        with open(self.log_path, "a", encoding="utf-8") as fh:
            for rec in log[self.logged:]:
                line = json.dumps(rec, sort_keys=True)
                fh.write(line + "\n")
                print(line, file=sys.stderr)
        self.logged = len(log)


def resume_states(path: str | None, stage: str, vocab_hash: str) -> tuple[dict[str, TrainState], Checkpoint | None]:
    if not path:
        return {}, None
    ckpt = load_checkpoint(path, stage=stage, vocab_hash=vocab_hash)
    states = {name: unpack_train_state(ckpt, m, prefix=f"state.{name}")
              for name, m in ckpt.meta.get("states", {}).items()}
    return states, ckpt


def _fresh_log(writer: StageWriter, resumed: Checkpoint | None, states: dict[str, TrainState]) -> None:
    """Start a new log, or skip the records a resumed run has already written."""
    if resumed is None:
        writer.log_path.unlink(missing_ok=True)
    else:
        writer.logged = sum(len(st.log) for st in states.values())


# -- commands -----------------------------------------------------------------------------------

def cmd_gen_data(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ds = build_dataset(cfg)
    write_dataset(ds, out / "data")
    write_effective_config(cfg, out / "data")
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(json.dumps({"dialogues": counts, "vocab": len(ds.vocab)}, sort_keys=True))
    return EXIT_OK


def cmd_train_embeddings(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ds = load_data(out)
    emb = train_embeddings_stage(cfg, ds)
    if not np.all(np.isfinite(emb.matrix)):
        raise NumericError("skip-gram produced non-finite vectors")
    writer = StageWriter(out, "embeddings", cfg, ds.vocab.content_hash(),
                         {"vocab_size": len(ds.vocab), "dim": emb.dim})
    _fresh_log(writer, None, {})
    log = [{"stage": "embeddings", "epoch": i + 1, "train_loss": v} for i, v in enumerate(emb.loss_log)]
    writer.save(None, {}, True, {"model/matrix": emb.matrix.astype(cfg.dtype)}, log)
    return EXIT_OK


def _word_vectors(out: Path, ds: Dataset, cfg: PipelineConfig, needed_by: str) -> np.ndarray:
    ckpt = load_stage(out, "embeddings", ds.vocab.content_hash(), needed_by)
    return ckpt.tensors["model/matrix"].astype(cfg.dtype)


def cmd_train_lm(args, cfg: PipelineConfig) -> int:
    out, role = Path(args.out), args.role
    stage = f"lm-{role}"
    ds = load_data(out)
    vh = ds.vocab.content_hash()
    wv = _word_vectors(out, ds, cfg, stage)
    states, resumed = resume_states(args.resume, stage, vh)
    st = LMStageState(states.get("pretrain"), states.get("finetune"))
    probe = LanguageModel(len(ds.vocab), cfg.embeddings.dim, cfg.lm.n_layers, role, cfg.lm.emb_dropout,
                          cfg.lm.out_dropout, dtype=cfg.dtype)
    writer = StageWriter(out, stage, cfg, vh, _lm_meta(probe))
    _fresh_log(writer, resumed, states)

    def hook(s: LMStageState) -> None:
        writer.save(None, {"pretrain": s.pretrain, "finetune": s.finetune}, False)

    lm, st = train_lm_stage(cfg, ds, role, wv, st, hook)
    writer.save(lm, {"pretrain": st.pretrain, "finetune": st.finetune}, True)
    return EXIT_OK


def cmd_train_conv(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ds = load_data(out)
    vh = ds.vocab.content_hash()
    lms = [lm_from_checkpoint(load_stage(out, f"lm-{r}", vh, "conv")) for r in ("counselor", "client")]
    states, resumed = resume_states(args.resume, "conv", vh)
    cc = conv_config(cfg)
    meta = {"counselor": _lm_meta(lms[0]), "client": _lm_meta(lms[1]), "n_layers": cc.n_layers,
            "dropout": cc.dropout}
    writer = StageWriter(out, "conv", cfg, vh, meta)
    _fresh_log(writer, resumed, states)
    model, st = train_conv_stage(cfg, ds, lms[0], lms[1], states.get("train"),
                                 hook=lambda s: writer.save(None, {"train": s}, False))
    writer.save(model, {"train": st}, True)
    return EXIT_OK


def gather_pretrained(out: Path, ds: Dataset, cfg: PipelineConfig, row: str | None, baseline: str | None,
                      ) -> Pretrained:
    """Load only the stages the row or baseline needs."""
    vh = ds.vocab.content_hash()
    need = f"baseline {baseline}" if baseline else f"ablation row {row}"
    pre = Pretrained()
    if baseline is not None:
        if baseline == "ULMFiT":
            pre.client_lm = lm_from_checkpoint(load_stage(out, "lm-client", vh, need))
        else:
            pre.word_vectors = _word_vectors(out, ds, cfg, need)
        return pre
    ab = ABLATION_ROWS[row]
    if ab.pretrained_conv_seq2seq:
        pre.conv = conv_from_checkpoint(load_stage(out, "conv", vh, need))
    elif ab.pretrained_lms:
        pre.counselor_lm = lm_from_checkpoint(load_stage(out, "lm-counselor", vh, need))
        pre.client_lm = lm_from_checkpoint(load_stage(out, "lm-client", vh, need))
    elif ab.pretrained_embeddings:
        pre.word_vectors = _word_vectors(out, ds, cfg, need)
    return pre


def cmd_train_classifier(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    if args.ablation:
        cfg = cfg.replace(classifier__ablation=args.ablation)
    row = None if args.baseline else cfg.classifier.ablation
    ds = load_data(out)
    vh = ds.vocab.content_hash()
    pre = gather_pretrained(out, ds, cfg, row, args.baseline)
    states, resumed = resume_states(args.resume, "classifier", vh)
    model = build_model(cfg, ds.vocab, pre, cfg.seed, row, args.baseline)
    meta = {"seed": cfg.seed, "row": row, "baseline": args.baseline}
    writer = StageWriter(out, "classifier", cfg, vh, meta)
    _fresh_log(writer, resumed, states)
    model, st = train_classifier_stage(cfg, ds, pre, cfg.seed, row, args.baseline, states.get("train"),
                                       hook=lambda s: writer.save(None, {"train": s}, False), model=model)
    writer.save(model, {"train": st}, True)
    return EXIT_OK


def _classifier(args, out: Path, ds: Dataset) -> tuple[Module, PipelineConfig]:
    path = Path(args.checkpoint) if args.checkpoint else _ckpt_path(out, "classifier")
    if not path.exists():
        raise DependencyError(f"needs the classifier stage; {path} not found")
    ckpt = load_checkpoint(path, stage="classifier", vocab_hash=ds.vocab.content_hash())
    if not ckpt.meta.get("complete"):
        raise DependencyError(f"{path} is unfinished (resume it)")
    return classifier_from_checkpoint(ckpt, ds.vocab)


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ds = load_data(out)
    model, _ = _classifier(args, out, ds)
    split = args.split or cfg.eval.split
    report, records = evaluate(model, ds.triples(split), ds.vocab, cfg.eval.threshold, cfg.corpus.max_len)
    table = format_metrics_table([(f"{split} (threshold {cfg.eval.threshold:g})", report)])
    artifact = out / f"metrics-{split}.txt"
    artifact.write_text(table, encoding="utf-8")
    (out / f"metrics-{split}.json").write_text(json.dumps(report.to_record(), indent=2) + "\n", encoding="utf-8")
    dump_records(out / f"predictions-{split}.jsonl", records)
    write_effective_config(cfg, artifact)
    print(table, end="")
    return EXIT_OK


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ds = load_data(out)
    vh = ds.vocab.content_hash()
    if args.seeds:
        cfg = cfg.replace(eval__seeds=[int(s) for s in args.seeds.split(",")])
    rows, bases = list(cfg.eval.rows), list(cfg.eval.baselines)
    pre = Pretrained()
    if rows or bases:
        pre.word_vectors = _word_vectors(out, ds, cfg, "ablate")
    if any(ABLATION_ROWS[r].pretrained_lms for r in rows) or "ULMFiT" in bases:
        pre.counselor_lm = lm_from_checkpoint(load_stage(out, "lm-counselor", vh, "ablate"))
        pre.client_lm = lm_from_checkpoint(load_stage(out, "lm-client", vh, "ablate"))
    if any(ABLATION_ROWS[r].pretrained_conv_seq2seq for r in rows):
        pre.conv = conv_from_checkpoint(load_stage(out, "conv", vh, "ablate"))
    result = run_ablation_suite(cfg, ds, pre, cfg.eval.seeds, rows, bases, cfg.eval.split,
                                progress=lambda line: print(line, file=sys.stderr))
    lines = [format_ablation_table(result), ""] + [c.line() for c in ordering_checks(result)]
    artifact = out / "ablation.txt"
    artifact.write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_effective_config(cfg, artifact)
    print("\n".join(lines))
    return EXIT_OK


def cmd_keyphrases(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    ds = load_data(out)
    model, _ = _classifier(args, out, ds)
    if getattr(model, "attention", None) is None:
        raise DependencyError("key phrases need an attention classifier (an ablation row, not a baseline)")
    split = args.split or cfg.eval.split
    _, records = evaluate(model, ds.triples(split), ds.vocab, cfg.eval.threshold, cfg.corpus.max_len)
    top_k = args.top_k or cfg.eval.top_k
    report = key_phrase_report(records, top_k, range(1, cfg.eval.max_n + 1), use_gold=cfg.eval.use_gold)
    text = format_key_phrase_report(report)
    artifact = out / f"keyphrases-{split}.txt"
    artifact.write_text(text, encoding="utf-8")
    write_effective_config(cfg, artifact)
    print(text, end="")
    return EXIT_OK


COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data, "train-embeddings": cmd_train_embeddings, "train-lm": cmd_train_lm,
    "train-conv": cmd_train_conv, "train-classifier": cmd_train_classifier, "evaluate": cmd_evaluate,
    "ablate": cmd_ablate, "keyphrases": cmd_keyphrases,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", default="run", help="run directory")
    parser = argparse.ArgumentParser(prog="convmfit", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("train-embeddings", parents=[common], help="skip-gram word vectors")
    for name, helptext in (("train-lm", "role language model"), ("train-conv", "conversation model"),
                           ("train-classifier", "fine-tune a classifier")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--resume", metavar="PATH", help="stage checkpoint to continue from")
        if name == "train-lm":
            p.add_argument("--role", choices=("counselor", "client"), required=True)
        if name == "train-classifier":
            p.add_argument("--ablation", choices=list(ABLATION_ROWS), help="ablation row")
            p.add_argument("--baseline", choices=list(VARIANTS), help="baseline variant instead of ConvMFiT")
            p.add_argument("--threshold", type=float)
    for name in ("evaluate", "keyphrases"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="classifier checkpoint (default: <out>/classifier.ckpt)")
        p.add_argument("--split", choices=("train", "valid", "test"))
        p.add_argument("--threshold", type=float)
        if name == "keyphrases":
            p.add_argument("--top-k", type=int)
    p = sub.add_parser("ablate", parents=[common], help="all ablation rows and baselines over seeds")
    p.add_argument("--seeds", help="comma-separated seeds (default: eval.seeds)")
    p.add_argument("--threshold", type=float)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, MissingStageError, MissingResourceError, CheckpointError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
