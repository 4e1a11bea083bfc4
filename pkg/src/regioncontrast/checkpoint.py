"""Binary checkpoint format and model (de)serialization glue.

Layout (all header integers little-endian):

    magic   4 bytes  b"LRCK"
    version u32      currently 1
    count   u32      number of named tensors
    per tensor:
        name_len u16, name utf-8, ndim u8, dims u32 each,
        payload  float32 little-endian, C order
    trailing: utf-8 JSON config echo (to end of file)

Tensors are written sorted by name, so save -> load -> save is
byte-identical.  Weights downcast to float32 on write and upcast to
float64 on read.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .networks import FusionSegmenter, GlobalEncoder, LocalUNet

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "save_model_checkpoint",
    "load_model_checkpoint",
]

MAGIC = b"LRCK"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config: Mapping) -> None:
    """Write named float tensors + a JSON config echo; see module docstring."""
    names = sorted(tensors)
    parts = [MAGIC, struct.pack("<II", VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 65535:
            raise ValueError(f"save_checkpoint: tensor name too long ({len(raw)} bytes)")
        if arr.ndim > 255:
            raise ValueError(f"save_checkpoint: tensor '{name}' has {arr.ndim} dims")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f4").tobytes())
    parts.append(json.dumps(dict(config), sort_keys=True).encode("utf-8"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint -> (dict of float64 arrays, config dict)."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * n_items)
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)
        tensors[name] = arr
    trailer = data[r.pos:]
    try:
        config = json.loads(trailer.decode("utf-8")) if trailer else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: corrupt config echo: {e}") from e
    if not isinstance(config, dict):
        raise ValueError(f"{path}: config echo must be a JSON object")
    return tensors, config


def save_model_checkpoint(path, kind: str, model, config: Mapping,
                          optimizer=None) -> None:
    """Persist a model (and optionally optimizer buffers) with metadata.

    ``kind`` is one of 'global', 'local', 'fusion' and is echoed into the
    config so :func:`load_model_checkpoint` can rebuild the right class.
    """
    if kind not in ("global", "local", "fusion"):
        raise ValueError(f"save_model_checkpoint: unknown kind '{kind}'")
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"opt.{k}": v for k, v in optimizer.state_dict().items()})
    meta = dict(config)
    meta["model_kind"] = kind
    if kind == "local":
        meta["local_arch"] = {"feature_dim": model.feature_dim,
                              "widths": list(model.widths),
                              "in_channels": model.in_channels}
    elif kind == "global":
        meta["global_arch"] = {"embed_dim": model.embed_dim,
                               "widths": list(model.widths),
                               "in_channels": model.in_channels}
    else:
        meta["fusion_arch"] = {
            "n_classes": model.n_classes,
            "local_arch": {"feature_dim": model.local.feature_dim,
                           "widths": list(model.local.widths),
                           "in_channels": model.local.in_channels},
            "global_arch": {"embed_dim": model.genc.embed_dim,
                            "widths": list(model.genc.widths),
                            "in_channels": model.genc.in_channels},
        }
    save_checkpoint(path, tensors, meta)


def _split_model_state(tensors: Mapping[str, np.ndarray]) -> dict:
    return {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}


def load_model_checkpoint(path):
    """Rebuild the model stored at ``path`` -> (model, config dict)."""
    tensors, config = load_checkpoint(path)
    kind = config.get("model_kind")
    state = _split_model_state(tensors)
    if kind == "local":
        arch = config.get("local_arch", {})
        model = LocalUNet(feature_dim=int(arch.get("feature_dim", 64)),
                          widths=tuple(arch.get("widths", (8, 16, 32))),
                          in_channels=int(arch.get("in_channels", 1)))
        model.load_state_dict(state)
    elif kind == "global":
        arch = config.get("global_arch", {})
        model = GlobalEncoder(embed_dim=int(arch.get("embed_dim", 128)),
                              widths=tuple(arch.get("widths", (8, 16, 32))),
                              in_channels=int(arch.get("in_channels", 1)))
        model.load_state_dict(state)
    elif kind == "fusion":
        arch = config.get("fusion_arch", {})
        la = arch.get("local_arch", {})
        ga = arch.get("global_arch", {})
        local = LocalUNet(feature_dim=int(la.get("feature_dim", 64)),
                          widths=tuple(la.get("widths", (8, 16, 32))),
                          in_channels=int(la.get("in_channels", 1)))
        genc = GlobalEncoder(embed_dim=int(ga.get("embed_dim", 128)),
                             widths=tuple(ga.get("widths", (8, 16, 32))),
                             in_channels=int(ga.get("in_channels", 1)))
        model = FusionSegmenter(genc, local, n_classes=int(arch.get("n_classes", 6)))
        model.load_state_dict(state)
    else:
        raise ValueError(f"{path}: missing or unknown model_kind {kind!r}")
    return model, config
