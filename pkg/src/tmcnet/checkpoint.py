"""Checkpoint persistence: one flat little-endian blob plus a text manifest.

Layout of a checkpoint directory::

    manifest.txt   header lines, then one ``tensor`` line per array
    tensors.bin    the arrays back to back

A tensor line reads ``tensor <name> <dtype> <shape> <offset> <nbytes>
<crc32>`` with the shape written as ``d0xd1x...`` (``scalar`` for 0-d).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
MAGIC = "tmcnet-checkpoint"
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8"}


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    epoch: int = 0
    best_val_dice: float = float("nan")
    lr: float = 0.0
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC, f"format_version {ckpt.format_version}", f"epoch {ckpt.epoch}",
             f"best_val_dice {ckpt.best_val_dice!r}", f"lr {ckpt.lr!r}", f"adam_t {ckpt.adam_t}",
             "config " + json.dumps(ckpt.config, sort_keys=True),
             "rng " + json.dumps(ckpt.rng_state, sort_keys=True)]
    offset = 0
    with open(root / "tensors.bin", "wb") as blob:
        for group, arrays in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
            for name, arr in arrays.items():
                a = np.asarray(arr)
                code = a.dtype.str[1:]
                if code not in _DTYPES:
                    raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
                buf = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
                blob.write(buf)
                lines.append(f"tensor {group}/{name} {code} {_shape_str(a.shape)} {offset} "
                             f"{len(buf)} {zlib.crc32(buf):08x}")
                offset += len(buf)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    try:
        lines = (root / "manifest.txt").read_text(encoding="utf-8").splitlines()
        blob = (root / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {root}: {exc}") from exc
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{root}: not a checkpoint manifest")
    header: dict[str, str] = {}
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key != "tensor":
            header[key] = rest
            continue
        name, code, shape, off, nbytes, crc = rest.split(" ")
        off, nbytes = int(off), int(nbytes)
        buf = blob[off:off + nbytes]
        if len(buf) != nbytes or f"{zlib.crc32(buf):08x}" != crc:
            raise CheckpointError(f"checksum mismatch for {name}")
        group, _, pname = name.partition("/")
        arr = np.frombuffer(buf, dtype=_DTYPES[code]).reshape(_parse_shape(shape))
        groups[group][pname] = arr.astype(_DTYPES[code][1:], copy=True)
    version = int(header.get("format_version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported "
                              f"(expected {FORMAT_VERSION})")
    return Checkpoint(params=groups["param"], adam_m=groups["adam_m"], adam_v=groups["adam_v"],
                      adam_t=int(header["adam_t"]), epoch=int(header["epoch"]),
                      best_val_dice=float(header["best_val_dice"]), lr=float(header["lr"]),
                      rng_state=json.loads(header["rng"]), config=json.loads(header["config"]),
                      format_version=version)
