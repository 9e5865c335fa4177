"""Versioned binary checkpoints.

Layout (all little-endian):

    magic   4 bytes  "DATN"
    u32     format version (1)
    u32 x11 n_layers n_heads d_model d_k d_v d_ff src_vocab tgt_vocab
            grid_len d_feat max_len
    f64 x2  p_drop_visual p_drop_residual
    u32     parameter count
    then per parameter, in sorted-name order:
    u32     name length, name bytes (utf-8)
    u32     rank, u32 x rank extents
    raw     float64 values, row-major

Round trips are bit-exact: values are written as raw float64 bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import DTYPE, ModelConfig, ModelParams, parameter_shapes

MAGIC = b"DATN"
VERSION = 1

_CFG_INTS = (
    "n_layers",
    "n_heads",
    "d_model",
    "d_k",
    "d_v",
    "d_ff",
    "src_vocab",
    "tgt_vocab",
    "grid_len",
    "d_feat",
    "max_len",
)


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<11I", *(getattr(cfg, k) for k in _CFG_INTS)))
        f.write(struct.pack("<2d", cfg.p_drop_visual, cfg.p_drop_residual))
        names = sorted(params.arrays)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(params[name], dtype=DTYPE)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8", copy=False).tobytes())


def _read(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (ModelConfig, ModelParams); validates names and shapes."""
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        ints = struct.unpack("<11I", _read(f, 44, "config"))
        pv, pr = struct.unpack("<2d", _read(f, 16, "config"))
        cfg = ModelConfig(**dict(zip(_CFG_INTS, ints)), p_drop_visual=pv, p_drop_residual=pr)
        (count,) = struct.unpack("<I", _read(f, 4, "parameter count"))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(f, 4, "name length"))
            name = _read(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read(f, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read(f, 4 * rank, "extents"))
            n = int(np.prod(shape)) if rank else 1
            raw = _read(f, 8 * n, f"values of {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(DTYPE)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last parameter")

    expected = parameter_shapes(cfg)
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointError(
            f"{path}: parameter set mismatch (missing {missing[:3]}, extra {extra[:3]})"
        )
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arrays[name].shape}, config implies {shape}"
            )
    return cfg, ModelParams(arrays)
