"""Bit-exact binary checkpoints.

Layout (all integers little-endian):

    magic "IDCN" | u16 format version | u32 config length | config JSON (UTF-8)
    | u32 entry count | entries...

Each entry: u16 name length | UTF-8 name | u8 rank | rank * u32 dims
| float32 raw data. Entries cover every trainable parameter and every
batch-norm running statistic, so a loaded checkpoint predicts bit-for-bit
identically to the model that saved it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, build_model

MAGIC = b"IDCN"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file or a checkpoint/architecture mismatch."""


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"entry name too long: {name!r}")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, model: Model) -> None:
    state = {name: t.data for name, t in model.named_params().items()}
    state.update(model.named_buffers())
    config_blob = json.dumps(model.config.to_json_dict(), sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            _write_entry(fh, name, arr)
    tmp.replace(path)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def read_entries(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint file into its config and named float32 arrays."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(fh, 2))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (config_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = ModelConfig.from_json_dict(json.loads(_read_exact(fh, config_len)))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            data = np.frombuffer(_read_exact(fh, 4 * int(np.prod(dims))), dtype="<f4")
            entries[name] = data.reshape(dims).astype(np.float32)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last entry")
    return config, entries


def load_checkpoint(path) -> Model:
    """Rebuild the architecture from the stored config and fill in weights."""
    config, entries = read_entries(path)
    model = build_model(config, seed=0)
    expected = set(model.named_params()) | set(model.named_buffers())
    missing = sorted(expected - set(entries))
    extra = sorted(set(entries) - expected)
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing {missing[:5]}")
        if extra:
            parts.append(f"unexpected {extra[:5]}")
        raise CheckpointError(
            f"{path}: entries do not match the stored architecture ({'; '.join(parts)})"
        )
    try:
        model.load_state(entries)
    except Exception as e:  # shape conflicts from a hand-edited file
        raise CheckpointError(f"{path}: {e}") from e
    return model
