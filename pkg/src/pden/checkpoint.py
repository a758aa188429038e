"""Binary checkpoint container for models.

Layout of a checkpoint file::

    b"PDEN-CKPT-1\\n"                      fixed header line
    uint32 little-endian                   manifest byte length
    manifest                               canonical JSON (utf-8, sorted keys)
    payload                                concatenated float64 little-endian
                                           arrays, row-major, in manifest order

The manifest records the model kind, its architecture, the training seed and
step, the loss weights in effect, and a name/shape table for every parameter
array.  Loading rebuilds the model from the architecture and copies arrays
in by name, so a checkpoint is self-describing: no pickle, no code objects,
stable across refactors that keep parameter names.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from . import nets
from .rng import Rng

HEADER = b"PDEN-CKPT-1\n"

_KINDS = {
    "task_model": (nets.TaskModel, nets.init_task_model),
    "generator": (nets.Generator, nets.init_generator),
    "cycle_generator": (nets.CycleGenerator, nets.init_cycle_generator),
}


class CheckpointError(ValueError):
    """The file is not a valid checkpoint of the expected shape."""


def _kind_of(model) -> str:
    for kind, (cls, _) in _KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(path, model, seed: int = 0, step: int = 0,
                    loss_weights: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    """Serialize ``model`` with its metadata; parent dirs are created."""
    path = Path(path)
    named = model.named_parameters()
    manifest = {
        "format": HEADER.decode().strip(),
        "kind": _kind_of(model),
        "arch": model.arch.to_dict(),
        "seed": int(seed),
        "step": int(step),
        "loss_weights": loss_weights or {},
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(p.data.shape)} for n, p in named],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in named:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild (model, manifest) from a checkpoint file.

    Raises CheckpointError naming the problem on a wrong header, corrupt
    manifest, unknown kind, or a payload whose length disagrees with the
    manifest's shape table.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(HEADER):
        raise CheckpointError(f"{path}: missing {HEADER!r} header")
    off = len(HEADER)
    if len(raw) < off + 4:
        raise CheckpointError(f"{path}: truncated before manifest length")
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + mlen:
        raise CheckpointError(f"{path}: truncated manifest ({mlen} bytes declared)")
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from None
    off += mlen

    kind = manifest.get("kind")
    if kind not in _KINDS:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")
    try:
        arch = nets.ArchConfig.from_dict(manifest["arch"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: bad arch record: {e}") from None

    _, init = _KINDS[kind]
    model = init(arch, Rng(0))
    expected = {name: tuple(p.data.shape) for name, p in model.named_parameters()}

    arrays = {}
    for entry in manifest.get("arrays", []):
        name, shape = entry["name"], tuple(int(d) for d in entry["shape"])
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected array {name!r}")
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: array {name!r} has shape {shape}, model wants {expected[name]}")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(raw) < off + nbytes:
            raise CheckpointError(f"{path}: payload truncated at array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                     offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after payload")
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        raise CheckpointError(f"{path}: arrays missing from manifest: {missing}")
    nets.load_state(model, arrays)
    return model, manifest
