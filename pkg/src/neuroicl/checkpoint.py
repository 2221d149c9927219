"""Binary weight checkpoints.

Layout: 8-byte magic, little-endian ``uint32`` header length, a UTF-8 JSON
header, then every tensor as little-endian float32 followed by its INT8 view.
The header lists each tensor's name, shape, byte offsets and the symmetric
per-tensor scale (``max|w| / 127``) of the INT8 view, plus the model config
and free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .transformer import ICLTransformer, ModelConfig, build_model

MAGIC = b"NICLCKP1"

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "int8_view", "content_hash", "CheckpointError"]


class CheckpointError(ValueError):
    pass


def int8_view(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric INT8 quantization with one scale per tensor."""
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.round(w / scale), -127, 127).astype(np.int8)
    return q, scale


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    int8: dict[str, tuple[np.ndarray, float]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def build(self) -> ICLTransformer:
        model = build_model(self.config, seed=None)
        state = {k: torch.from_numpy(v.copy()) for k, v in self.tensors.items()}
        model.load_state_dict(state, strict=True)
        model.eval()
        return model


def content_hash(path: str | Path) -> str:
    """Git-style blob hash of a file (sha1 over ``blob <len>\\0`` + bytes)."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def save_checkpoint(path: str | Path, model: ICLTransformer, metadata: dict | None = None) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        w = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        q, scale = int8_view(w)
        fb, qb = w.tobytes(), q.tobytes()
        entries.append({"name": name, "shape": list(w.shape), "offset": offset, "int8_offset": offset + len(fb),
                        "scale": scale})
        blobs += [fb, qb]
        offset += len(fb) + len(qb)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries, "metadata": metadata or {}},
                        sort_keys=True).encode()
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC or len(raw) < 12:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
    body = raw[12 + n:]
    tensors, int8 = {}, {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["int8_offset"] + count > len(body):
            raise CheckpointError(f"truncated checkpoint {path}")
        tensors[e["name"]] = np.frombuffer(body, "<f4", count, e["offset"]).reshape(e["shape"]).astype(np.float32)
        q = np.frombuffer(body, np.int8, count, e["int8_offset"]).reshape(e["shape"])
        int8[e["name"]] = (q.copy(), float(e["scale"]))
    return Checkpoint(ModelConfig.from_dict(header["config"]), tensors, int8, header.get("metadata", {}))
