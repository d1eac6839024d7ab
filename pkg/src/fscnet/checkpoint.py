"""Versioned binary checkpoints.

Layout (all integers little-endian):

    magic b"FSCN" | u32 version | f64 best_val_loss
    u32 config length | UTF-8 config INI text
    u32 tensor count | tensor records in model state order
    u8 has_optimizer | optional optimizer block

Tensor record: u16 name length | name | u8 ndim | u32*ndim shape |
little-endian float32 payload. Values round-trip bit-exactly. Loads of a
different magic or version fail loudly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FSCN"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    version: int
    config_text: str
    best_val_loss: float
    tensors: dict[str, np.ndarray]  # insertion-ordered
    optimizer: dict | None = None


def _write_tensor_table(out: list[bytes], tensors: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        payload = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        out.append(struct.pack("<H", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<B", payload.ndim))
        out.append(struct.pack(f"<{payload.ndim}I", *payload.shape))
        out.append(payload.tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        chunk = self.blob[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values if len(values) > 1 else values[0]


def _read_tensor_table(r: _Reader) -> dict[str, np.ndarray]:
    count = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        ndim = r.unpack("<B")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        n_values = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n_values), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)  # writable native copy
    return tensors


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], config_text: str,
                    best_val_loss: float, optimizer: dict | None = None) -> None:
    out: list[bytes] = [MAGIC, struct.pack("<I", VERSION), struct.pack("<d", best_val_loss)]
    encoded_cfg = config_text.encode("utf-8")
    out.append(struct.pack("<I", len(encoded_cfg)))
    out.append(encoded_cfg)
    _write_tensor_table(out, tensors)
    if optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", optimizer["step_count"]))
        out.append(struct.pack("<4d", optimizer["lr"], optimizer["beta1"],
                               optimizer["beta2"], optimizer["eps"]))
        moments = {f"m:{k}": v for k, v in optimizer["m"].items()}
        moments.update({f"v:{k}": v for k, v in optimizer["v"].items()})
        _write_tensor_table(out, moments)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint '{path}': {e}") from None
    r = _Reader(blob)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic {magic!r})")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    best_val_loss = r.unpack("<d")
    cfg_len = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    tensors = _read_tensor_table(r)
    optimizer = None
    if r.unpack("<B"):
        step_count = r.unpack("<Q")
        lr, beta1, beta2, eps = r.unpack("<4d")
        table = _read_tensor_table(r)
        optimizer = {
            "step_count": step_count, "lr": lr, "beta1": beta1, "beta2": beta2, "eps": eps,
            "m": {k[2:]: v for k, v in table.items() if k.startswith("m:")},
            "v": {k[2:]: v for k, v in table.items() if k.startswith("v:")},
        }
    return Checkpoint(version=version, config_text=config_text,
                      best_val_loss=best_val_loss, tensors=tensors, optimizer=optimizer)
