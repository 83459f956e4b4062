"""Versioned binary checkpoints: magic bytes, an architecture fingerprint,
then length-prefixed named float64 arrays."""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .config import ExperimentConfig, config_to_dict
from .tensor import Tensor

MAGIC = b"PALCKPT1"


class CheckpointError(RuntimeError):
    pass


def config_fingerprint(cfg: ExperimentConfig) -> bytes:
    """Hash of the architecture-defining parts of a config. Seed, name, step
    counts and output paths do not change what a checkpoint can load into."""
    d = config_to_dict(cfg)
    arch = {k: d[k] for k in ("model", "fusion", "encoders", "connector")}
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


def save_checkpoint(params: dict[str, Tensor], cfg: ExperimentConfig,
                    path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(config_fingerprint(cfg))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())


def _read(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path, cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError("bad magic bytes: not a PALCKPT1 checkpoint")
        fp = _read(fh, 32, "fingerprint")
        if fp != config_fingerprint(cfg):
            raise CheckpointError("config fingerprint mismatch: checkpoint was "
                                  "written for a different architecture")
        (count,) = struct.unpack("<I", _read(fh, 4, "array count"))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, nlen, "name").decode()
            (ndim,) = struct.unpack("<B", _read(fh, 1, "ndim"))
            shape = struct.unpack(f"<{ndim}I", _read(fh, 4 * ndim, "shape"))
            (size,) = struct.unpack("<Q", _read(fh, 8, "size"))
            data = np.frombuffer(_read(fh, 8 * size, f"array {name!r}"),
                                 dtype="<f8").reshape(shape)
            out[name] = np.ascontiguousarray(data)
        return out


def restore_into(model_params: dict[str, Tensor],
                 arrays: dict[str, np.ndarray]) -> None:
    missing = set(model_params) - set(arrays)
    extra = set(arrays) - set(model_params)
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing "
                              f"{sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in model_params.items():
        if p.data.shape != arrays[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: "
                                  f"{p.data.shape} vs {arrays[name].shape}")
        p.data[...] = arrays[name]
