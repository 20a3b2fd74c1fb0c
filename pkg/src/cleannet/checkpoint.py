"""Text checkpoints: named float64 tensors stored as hex floats, plus hyperparameters.

Layout::

    cleannet-checkpoint 1
    kind <kind>
    provenance <key> <json value>
    hparam <key> <json value>
    tensor <name> <comma-separated shape, or "scalar">
    <hex values, one line per trailing-axis row>
    ...
    end

Hex floats make the round trip bit-exact, and the line layout keeps two
checkpoints diff-able.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionError, FormatError

CHECKPOINT_VERSION = 1
_MAGIC = "cleannet-checkpoint"


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    hyperparams: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _check_name(name: str):
    if not name or any(ch.isspace() for ch in name):
        raise ValueError(f"invalid checkpoint key {name!r}")


def dumps(ckpt: Checkpoint) -> str:
    out = [f"{_MAGIC} {ckpt.version}", f"kind {ckpt.kind}"]
    for section, table in (("provenance", ckpt.provenance), ("hparam", ckpt.hyperparams)):
        for key in sorted(table):
            _check_name(key)
            out.append(f"{section} {key} {json.dumps(table[key], sort_keys=True)}")
    for name in sorted(ckpt.tensors):
        _check_name(name)
        arr = np.asarray(ckpt.tensors[name], dtype=np.float64)
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        out.append(f"tensor {name} {shape}")
        width = arr.shape[-1] if arr.ndim else 1
        flat = arr.reshape(-1)
        for start in range(0, flat.size, max(width, 1)):
            out.append(" ".join(float(x).hex() for x in flat[start:start + width]))
    out.append("end")
    return "\n".join(out) + "\n"


def loads(text: str, source="<checkpoint>") -> Checkpoint:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(f"{source}: empty checkpoint", offset=1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != _MAGIC:
        raise FormatError(f"{source}: not a cleannet checkpoint", offset=1)
    try:
        version = int(head[1])
    except ValueError:
        raise FormatError(f"{source}: bad version field", offset=1) from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{source}: checkpoint version {version} is incompatible with reader version {CHECKPOINT_VERSION}",
            offset=1)
    ckpt = Checkpoint(kind="", version=version)
    i, ended = 1, False
    while i < len(lines):
        lineno = i + 1
        parts = lines[i].split(" ", 2)
        tag = parts[0]
        i += 1
        if tag == "end":
            ended = True
            break
        if tag == "kind" and len(parts) == 2:
            ckpt.kind = parts[1]
        elif tag in ("provenance", "hparam") and len(parts) == 3:
            try:
                value = json.loads(parts[2])
            except json.JSONDecodeError:
                raise FormatError(f"{source}: bad {tag} value", offset=lineno) from None
            (ckpt.provenance if tag == "provenance" else ckpt.hyperparams)[parts[1]] = value
        elif tag == "tensor" and len(parts) == 3:
            name, shape_text = parts[1], parts[2]
            try:
                shape = () if shape_text == "scalar" else tuple(int(s) for s in shape_text.split(","))
            except ValueError:
                raise FormatError(f"{source}: bad shape for tensor {name}", offset=lineno) from None
            size = int(np.prod(shape)) if shape else 1
            values: list[float] = []
            while len(values) < size:
                if i >= len(lines) or lines[i].split(" ", 1)[0] in ("tensor", "end", "hparam", "provenance"):
                    raise FormatError(
                        f"{source}: tensor {name} has {len(values)} of {size} values", offset=i + 1)
                try:
                    values.extend(float.fromhex(tok) for tok in lines[i].split())
                except ValueError:
                    raise FormatError(f"{source}: bad value in tensor {name}", offset=i + 1) from None
                i += 1
            if len(values) != size:
                raise FormatError(f"{source}: tensor {name} has {len(values)} values, shape needs {size}",
                                  offset=i)
            if name in ckpt.tensors:
                raise FormatError(f"{source}: duplicate tensor {name}", offset=lineno)
            ckpt.tensors[name] = np.array(values, dtype=np.float64).reshape(shape)
        else:
            raise FormatError(f"{source}: unrecognised line", offset=lineno)
    if not ended:
        raise FormatError(f"{source}: missing end marker (truncated file?)", offset=len(lines))
    if i != len(lines):
        raise FormatError(f"{source}: content after end marker", offset=i + 1)
    if not ckpt.kind:
        raise FormatError(f"{source}: missing kind line", offset=2)
    return ckpt


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(dumps(ckpt), encoding="utf-8")


def read_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_text(encoding="utf-8"), source=str(path))


def save_checkpoint(model, path) -> None:
    """Save a CleanNet, Classifier, or ``{class_id: ReferenceSet}`` mapping."""
    write_checkpoint(to_checkpoint(model), path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; the returned type follows the stored ``kind``."""
    return from_checkpoint(read_checkpoint(path))


def to_checkpoint(model) -> Checkpoint:
    from .references import references_to_checkpoint

    if isinstance(model, dict):
        return references_to_checkpoint(model)
    return model.to_checkpoint()


def from_checkpoint(ckpt: Checkpoint):
    from .classifier import Classifier
    from .model import CleanNet
    from .references import references_from_checkpoint

    if ckpt.kind == "cleannet":
        return CleanNet.from_checkpoint(ckpt)
    if ckpt.kind == "classifier":
        return Classifier.from_checkpoint(ckpt)
    if ckpt.kind == "references":
        return references_from_checkpoint(ckpt)
    raise FormatError(f"unknown checkpoint kind {ckpt.kind!r}")
