"""Binary checkpoint format.

Layout (little-endian)::

    b"TRTR"                     magic
    uint32                      format version
    8 x uint32, 2 x uint8,      d_model, n_heads, n_enc, n_dec, d_ff, max_slots,
    float32                     hist_len, pred_len, paper_cross_wiring,
                                residual_output, dropout
    uint32 + bytes              UTF-8 JSON metadata (run config echo)
    uint64                      total parameter count
    float32 x count             parameters in inventory order
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Optional, Tuple

import numpy as np
import torch

from .config import DataError, ModelConfig
from .io import atomic_write_bytes
from .net import FrameTransformer, param_count

MAGIC = b"TRTR"
VERSION = 1
_CFG_STRUCT = struct.Struct("<8IBBf")
_CFG_FIELDS = ("d_model", "n_heads", "n_enc", "n_dec", "d_ff", "max_slots", "hist_len", "pred_len", "paper_cross_wiring", "residual_output", "dropout")


class CheckpointError(DataError):
    pass


def to_bytes(model: FrameTransformer, meta: Optional[dict] = None) -> bytes:
    cfg = model.cfg
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(_CFG_STRUCT.pack(
        cfg.d_model, cfg.n_heads, cfg.n_enc, cfg.n_dec, cfg.d_ff, cfg.max_slots,
        cfg.hist_len, cfg.pred_len, int(cfg.paper_cross_wiring), int(cfg.residual_output), cfg.dropout,
    ))
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    flat = [p.detach().to(torch.float32).reshape(-1).numpy() for p in model.parameters()]
    data = np.concatenate(flat).astype("<f4") if flat else np.zeros(0, "<f4")
    parts.append(struct.pack("<Q", data.size))
    parts.append(data.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, expected: Optional[ModelConfig] = None) -> Tuple[FrameTransformer, dict]:
    head = 8 + _CFG_STRUCT.size
    if len(buf) < head or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    raw = _CFG_STRUCT.unpack_from(buf, 8)
    values = dict(zip(_CFG_FIELDS, raw))
    values["paper_cross_wiring"] = bool(values["paper_cross_wiring"])
    values["residual_output"] = bool(values["residual_output"])
    try:
        cfg = ModelConfig(**values)
    except ValueError as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from None
    if expected is not None:
        for name in _CFG_FIELDS:
            have, want = getattr(cfg, name), getattr(expected, name)
            if have != want:
                raise CheckpointError(f"checkpoint config mismatch: {name}={have}, expected {want}")
    pos = head
    if len(buf) < pos + 4:
        raise CheckpointError("truncated checkpoint (metadata length)")
    (meta_len,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + meta_len + 8:
        raise CheckpointError("truncated checkpoint (metadata)")
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    pos += meta_len
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if count != param_count(cfg):
        raise CheckpointError(f"checkpoint holds {count} parameters, config implies {param_count(cfg)}")
    if len(buf) != pos + 4 * count:
        raise CheckpointError(f"checkpoint payload is {len(buf) - pos} bytes, expected {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    model = FrameTransformer(cfg)
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(data[offset:offset + n].astype(np.float32)).view_as(p))
            offset += n
    model.eval()
    return model, meta


def save(model: FrameTransformer, path: str, meta: Optional[dict] = None) -> str:
    buf = to_bytes(model, meta)
    atomic_write_bytes(path, buf)
    return checkpoint_id(buf)


def load(path: str, expected: Optional[ModelConfig] = None) -> Tuple[FrameTransformer, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    model, meta = from_bytes(buf, expected)
    meta = dict(meta)
    meta.setdefault("checkpoint_id", checkpoint_id(buf))
    return model, meta


def checkpoint_id(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()[:16]


def model_id(model: FrameTransformer) -> str:
    return checkpoint_id(to_bytes(model))
