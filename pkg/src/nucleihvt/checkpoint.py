"""Binary checkpoint format.

Layout::

    b"NHVT" | version (1 byte) | header length (uint32 LE) | header | blobs

The header is UTF-8 text. Its first line is ``meta <json>`` (model config,
step, stream state, optimizer hyperparameters); every further line is
``tensor <name> <shape> <offset> <nbytes>`` with the shape written as
comma-separated extents (``-`` for a scalar). Blobs are little-endian
float32, concatenated in header order, offsets relative to the blob start.
Optimizer moments are stored as ``optim.m:<param>`` and ``optim.v:<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelConfig, init_params
from .params import ParamStore

MAGIC = b"NHVT"
VERSION = 1
_BLOB = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.001

    def hyper(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "weight_decay": self.weight_decay, "step": self.step}


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamStore
    optim: OptimState | None = None
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION


def _shape_text(shape: tuple) -> str:
    return ",".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple:
    return () if text == "-" else tuple(int(d) for d in text.split(","))


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in ckpt.params.items()]
    meta = {
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "optim": None,
    }
    if ckpt.optim is not None:
        meta["optim"] = ckpt.optim.hyper()
        for name in sorted(ckpt.optim.m):
            tensors.append((f"optim.m:{name}", ckpt.optim.m[name]))
            tensors.append((f"optim.v:{name}", ckpt.optim.v[name]))
    lines = ["meta " + json.dumps(meta, sort_keys=True, separators=(",", ":"))]
    blobs = []
    offset = 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype=_BLOB).tobytes()
        lines.append(f"tensor {name} {_shape_text(arr.shape)} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(header)) + header + b"".join(blobs)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def read_raw(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint file into (meta, name -> array) without validation."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 9:
        raise CheckpointError(f"{path}: truncated header")
    if buf[4] != VERSION:
        raise CheckpointError(f"{path}: unsupported version {buf[4]} (expected {VERSION})")
    (hlen,) = struct.unpack("<I", buf[5:9])
    header = buf[9 : 9 + hlen].decode("utf-8").splitlines()
    base = 9 + hlen
    if not header or not header[0].startswith("meta "):
        raise CheckpointError(f"{path}: missing meta line")
    meta = json.loads(header[0][5:])
    arrays = {}
    for line in header[1:]:
        kind, name, shape, off, nbytes = line.split(" ")
        if kind != "tensor":
            raise CheckpointError(f"{path}: unexpected header entry {line!r}")
        shape, off, nbytes = _parse_shape(shape), int(off), int(nbytes)
        if nbytes != int(np.prod(shape, dtype=np.int64)) * _BLOB.itemsize or base + off + nbytes > len(buf):
            raise CheckpointError(f"{path}: tensor {name} has an inconsistent or truncated blob")
        arrays[name] = np.frombuffer(buf, dtype=_BLOB, count=nbytes // 4, offset=base + off).reshape(shape).astype(np.float32)
    return meta, arrays


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Load and validate every tensor against the model described by ``config``
    (or by the config echoed in the file)."""
    meta, arrays = read_raw(path)
    file_cfg = ModelConfig.from_dict(meta["config"])
    cfg = config or file_cfg
    params = init_params(cfg)
    for name, t in params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: file {arrays[name].shape}, model {t.shape}")
        t.data[...] = arrays[name]
    optim = None
    if meta.get("optim") is not None:
        h = meta["optim"]
        optim = OptimState(step=h["step"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], weight_decay=h["weight_decay"])
        # moments are created lazily, so a state saved before the first
        # update legitimately has none
        for name, _ in params.trainable() if optim.step else ():
            try:
                optim.m[name] = arrays[f"optim.m:{name}"].copy()
                optim.v[name] = arrays[f"optim.v:{name}"].copy()
            except KeyError:
                raise CheckpointError(f"{path}: missing optimizer moments for {name}") from None
    return Checkpoint(cfg, params, optim, int(meta["step"]), meta.get("rng_state", {}), VERSION)


def load_mapped(params: ParamStore, path, prefix_map: dict[str, str]) -> list[str]:
    """Copy tensors whose names start with a key of ``prefix_map`` into
    ``params`` under the mapped prefix. Returns the destination names."""
    _, arrays = read_raw(path)
    loaded = []
    for name, arr in sorted(arrays.items()):
        if ":" in name:
            continue
        for src, dst in prefix_map.items():
            if name.startswith(src):
                target = dst + name[len(src) :]
                if target not in params:
                    raise CheckpointError(f"{path}: mapped tensor {name} -> {target} has no destination")
                if params[target].shape != arr.shape:
                    raise CheckpointError(f"{path}: shape mismatch mapping {name} -> {target}")
                params[target].data[...] = arr
                loaded.append(target)
                break
    if not loaded:
        raise CheckpointError(f"{path}: no tensors matched prefixes {sorted(prefix_map)}")
    return loaded
