"""Binary checkpoint format.

Layout::

    offset 0   4 bytes   magic b"DHFM"
    offset 4   u32 LE    format version
    offset 8   u32 LE    header length L
    offset 12  L bytes   UTF-8 JSON header (sorted keys, compact)
    offset 12+L          little-endian float32 payload

The header records both configs, the training-config digest, the epoch, the
best validation loss, and for every tensor its name, kind (``param`` or
``buffer``), shape and byte offset into the payload.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import EncoderConfig, init_model
from .backbone import ArchConfig
from .errors import CheckpointMismatch, ConfigError, FormatError
from .nn import ModelParams

MAGIC = b"DHFM"
VERSION = 1
PREFIX = struct.Struct("<4sII")
F32 = np.dtype("<f4")


@dataclass(frozen=True)
class CheckpointMeta:
    arch: ArchConfig
    encoder: EncoderConfig
    ablation: str = "full"
    train_digest: str = ""
    epoch: int = 0
    best_val_loss: Optional[float] = None


@dataclass
class Checkpoint:
    meta: CheckpointMeta
    params: ModelParams
    version: int = VERSION


def _header(params: ModelParams, meta: CheckpointMeta) -> tuple[dict, list]:
    entries, arrays, offset = [], [], 0
    tables = [("param", {n: t.data for n, t in params.params.items()}), ("buffer", params.buffers)]
    for kind, table in tables:
        for name, arr in table.items():
            a = np.ascontiguousarray(arr, dtype=F32)
            entries.append({"name": name, "kind": kind, "shape": list(a.shape), "offset": offset})
            arrays.append(a)
            offset += a.nbytes
    best = meta.best_val_loss
    header = {
        "arch": meta.arch.to_dict(),
        "encoder": meta.encoder.to_dict(),
        "ablation": meta.ablation,
        "train_digest": meta.train_digest,
        "epoch": meta.epoch,
        "best_val_loss": best if best is not None and math.isfinite(best) else None,
        "tensors": entries,
        "payload_bytes": offset,
    }
    return header, arrays


def checkpoint_bytes(params: ModelParams, meta: CheckpointMeta) -> bytes:
    header, arrays = _header(params, meta)
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREFIX.pack(MAGIC, VERSION, len(text)) + text + b"".join(a.tobytes() for a in arrays)


def save_checkpoint(params: ModelParams, meta: CheckpointMeta, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def _validate_entries(entries: list, payload_bytes: int, base: int) -> None:
    expected = 0
    for e in entries:
        shape = e.get("shape")
        if not isinstance(shape, list) or any(not isinstance(s, int) or s < 0 for s in shape):
            raise FormatError(f"tensor {e.get('name')!r}: invalid shape {shape!r} (header at byte {PREFIX.size})")
        if e.get("offset") != expected:
            raise FormatError(
                f"tensor {e['name']!r}: shape mismatch, shape {shape} implies offset {expected} "
                f"but header says {e.get('offset')} (payload byte {base + expected})"
            )
        expected += int(np.prod(shape, dtype=np.int64)) * F32.itemsize
    if expected != payload_bytes:
        raise FormatError(
            f"shape mismatch: tensor shapes imply {expected} payload bytes, header declares {payload_bytes}"
        )


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < PREFIX.size:
        raise FormatError(f"{source}: truncated at byte {len(blob)}, expected a {PREFIX.size}-byte prefix")
    magic, version, hlen = PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version} at byte 4, expected {VERSION}")
    base = PREFIX.size + hlen
    if len(blob) < base:
        raise FormatError(f"{source}: truncated header, expected {hlen} bytes from byte {PREFIX.size}, file ends at {len(blob)}")
    try:
        header = json.loads(blob[PREFIX.size : base].decode("utf-8"))
        entries = header["tensors"]
        payload_bytes = int(header["payload_bytes"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed header at byte {PREFIX.size}: {exc}") from exc
    _validate_entries(entries, payload_bytes, base)
    actual = len(blob) - base
    if actual != payload_bytes:
        raise FormatError(
            f"{source}: payload length mismatch at byte {base}: expected {payload_bytes} bytes, found {actual}"
        )
    try:
        meta = CheckpointMeta(
            ArchConfig(**header["arch"]),
            EncoderConfig(**header["encoder"]),
            header.get("ablation", "full"),
            header.get("train_digest", ""),
            int(header.get("epoch", 0)),
            header.get("best_val_loss"),
        )
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"{source}: invalid config in header at byte {PREFIX.size}: {exc}") from exc

    payload = np.frombuffer(blob, dtype=F32, offset=base)
    params = ModelParams()
    for e in entries:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = e["offset"] // F32.itemsize
        arr = payload[start : start + count].reshape(e["shape"]).astype(np.float32)
        if e["kind"] == "param":
            params.add(e["name"], arr)
        else:
            params.buffers[e["name"]] = arr.copy()
    return Checkpoint(meta, params.eval(), version)


def load_checkpoint(path, expect_arch: Optional[ArchConfig] = None, expect_encoder: Optional[EncoderConfig] = None) -> Checkpoint:
    """Read and validate a checkpoint.

    Raises ``FormatError`` for structural problems and ``CheckpointMismatch``
    when the stored configs disagree with the expected ones or the tensor set
    does not match the architecture.
    """
    path = Path(path)
    ckpt = parse_checkpoint(path.read_bytes(), str(path))
    if expect_arch is not None and expect_arch != ckpt.meta.arch:
        raise CheckpointMismatch(f"{path}: checkpoint architecture {ckpt.meta.arch} differs from {expect_arch}")
    if expect_encoder is not None and ckpt.meta.ablation == "full" and expect_encoder != ckpt.meta.encoder:
        raise CheckpointMismatch(f"{path}: checkpoint encoder {ckpt.meta.encoder} differs from {expect_encoder}")
    check_compatible(ckpt, str(path))
    return ckpt


def check_compatible(ckpt: Checkpoint, source: str = "<checkpoint>") -> None:
    """Compare the stored tensors with a freshly built model of the same configs."""
    try:
        ref = init_model(ckpt.meta.arch, ckpt.meta.encoder, 0, ckpt.meta.ablation)
    except ConfigError as exc:
        raise CheckpointMismatch(f"{source}: {exc}") from exc
    want = {n: t.shape for n, t in ref.params.items()} | {n: b.shape for n, b in ref.buffers.items()}
    have = {n: t.shape for n, t in ckpt.params.params.items()} | {n: b.shape for n, b in ckpt.params.buffers.items()}
    if want != have:
        missing = sorted(set(want) - set(have))
        extra = sorted(set(have) - set(want))
        wrong = sorted(n for n in set(want) & set(have) if want[n] != have[n])
        raise CheckpointMismatch(f"{source}: tensors do not match the architecture (missing {missing[:3]}, extra {extra[:3]}, reshaped {wrong[:3]})")
