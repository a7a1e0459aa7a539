"""Stage checkpoints.

Layout: ``b"CMFT"``, format version (u32 LE), header length (u64 LE), UTF-8
JSON header, then raw little-endian tensor data.  The header holds the
stage tag, the effective config with its content hash, the vocabulary
hash, the tensor table (name, shape, dtype, offset, nbytes), metadata for
rebuilding the model, the training-state scalars and a tail of the log.
Tensors are stored at their training precision and read back bitwise.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .training import TrainState

MAGIC = b"CMFT"
VERSION = 1
STAGES = ("embeddings", "lm-counselor", "lm-client", "conv", "classifier")
LOG_TAIL = 200
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"<f4", "<f8", "<i8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: str
    config: dict
    config_hash: str
    vocab_hash: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors stored under ``prefix/``, keyed without the prefix."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        return arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if arr.dtype.kind in "iub":
        return arr.astype("<i8", copy=False)
    raise CheckpointError(f"cannot store dtype {arr.dtype}")


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # "inf" / "nan"; JSON has no literal
    return obj


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage tag {ckpt.stage!r}")
    table, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = _le(ckpt.tensors[name])
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "stage": ckpt.stage,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "vocab_hash": ckpt.vocab_hash,
        "tensors": table,
        "data_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": _jsonable(ckpt.meta),
        "log_tail": _jsonable(ckpt.log[-LOG_TAIL:]),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        fh.write(blob)
    tmp.replace(path)


def _config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def load_checkpoint(path: str | Path, stage: str | None = None, vocab_hash: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint; ``stage`` / ``vocab_hash`` are checked when given."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version > VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than supported version {VERSION}")
    if version < 1:
        raise CheckpointError(f"{path}: invalid format version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    blob = data[start + hlen:]
    if hashlib.sha256(blob).hexdigest() != header["data_sha256"]:
        raise CheckpointError(f"{path}: tensor data does not match its checksum")
    if _config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if stage is not None and header["stage"] != stage:
        raise CheckpointError(f"{path}: expected a {stage} checkpoint, found {header['stage']}")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise CheckpointError(f"{path}: vocabulary hash mismatch (checkpoint was built on another vocabulary)")
    tensors = {}
    for entry in header["tensors"]:
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']}")
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(header["stage"], header["config"], header["config_hash"], header["vocab_hash"],
                      tensors, header["meta"], header["log_tail"])


# -- training state <-> checkpoint sections ----------------------------------------------------

def _prefixed(prefix: str, sd: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in sd.items()}


def pack_train_state(state: TrainState, prefix: str = "state") -> tuple[dict[str, np.ndarray], dict]:
    """Split a TrainState into tensors and JSON metadata."""
    tensors = {}
    tensors.update(_prefixed(f"{prefix}.model", state.model))
    tensors.update(_prefixed(f"{prefix}.best", state.best_model))
    meta: dict[str, Any] = {
        "epoch": state.epoch, "best_epoch": state.best_epoch, "best_metric": state.best_metric,
        "bad_epochs": state.bad_epochs, "stopped": state.stopped, "log": state.log,
    }
    opt = state.optimizer
    if opt:
        tensors.update(_prefixed(f"{prefix}.adam_m", opt["m"]))
        tensors.update(_prefixed(f"{prefix}.adam_v", opt["v"]))
        meta["adam"] = {"hyper": opt["hyper"], "counts": opt["counts"]}
    return tensors, _jsonable(meta)


def unpack_train_state(ckpt: Checkpoint, meta: dict, prefix: str = "state") -> TrainState:
    best_metric = meta["best_metric"]
    if isinstance(best_metric, str):
        best_metric = float(best_metric)
    state = TrainState(epoch=int(meta["epoch"]), best_epoch=int(meta["best_epoch"]), best_metric=best_metric,
                       bad_epochs=int(meta["bad_epochs"]), stopped=bool(meta["stopped"]), log=list(meta["log"]),
                       model=ckpt.section(f"{prefix}.model"), best_model=ckpt.section(f"{prefix}.best"))
    if "adam" in meta:
        state.optimizer = {"hyper": meta["adam"]["hyper"], "counts": meta["adam"]["counts"],
                           "m": ckpt.section(f"{prefix}.adam_m"), "v": ckpt.section(f"{prefix}.adam_v")}
    return state
