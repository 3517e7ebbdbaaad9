"""Versioned binary persistence for trained models.

File layout (all integers little-endian):

    bytes 0..7    magic b"FGANCKP\\x00"
    bytes 8..11   u32 format version (currently 1)
    bytes 12..15  u32 header length H
    bytes 16..    H bytes of UTF-8 JSON header
    ...           u32 tensor count, then per tensor:
                      u16 name length, name bytes,
                      u8 ndim, u32 dims[ndim],
                      float64 little-endian payload
    last 4 bytes  u32 CRC-32 of everything before it

The JSON header stores mode, condition labels, per-condition active
sizes, the codec scale (as a hex float for exactness), the training
step, per-parameter Adam step counters, and the training RNG state.
Tensors cover parameters, Adam moments, and batchnorm running
statistics, so loading a checkpoint reproduces the subsequent training
trajectory bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFile, ModeMismatch, VersionMismatch
from .model import ConditionVocab, GanModel

MAGIC = b"FGANCKP\x00"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    mode: str
    labels: tuple[str, ...]
    active_sizes: dict[str, int]
    scale: float
    step: int
    rng_state: dict
    adam_t: dict[str, int]
    tensors: dict[str, np.ndarray]
    version: int = FORMAT_VERSION


def snapshot(model: GanModel) -> ModelCheckpoint:
    """Deep-copied checkpoint of the model's full training state."""
    tensors: dict[str, np.ndarray] = {}
    adam_t: dict[str, int] = {}
    for net in (model.gen, model.disc):
        for name, p in net.params.items():
            full = f"{net.prefix}.{name}"
            tensors[f"param:{full}"] = p.data.copy()
            tensors[f"adam_m:{full}"] = p.adam_m.copy()
            tensors[f"adam_v:{full}"] = p.adam_v.copy()
            adam_t[full] = p.adam_t
        for sname, st in net.states.items():
            tensors[f"buf:{net.prefix}.{sname}.mean"] = st.mean.copy()
            tensors[f"buf:{net.prefix}.{sname}.var"] = st.var.copy()
    state = model.rng.bit_generator.state
    return ModelCheckpoint(mode=model.mode, labels=model.vocab.labels,
                           active_sizes=dict(model.active_sizes),
                           scale=model.scale, step=model.step,
                           rng_state=json.loads(json.dumps(state)),
                           adam_t=adam_t, tensors=tensors)


def restore_model(ckpt: ModelCheckpoint) -> GanModel:
    """Rebuild a live model; inverse of snapshot."""
    vocab = ConditionVocab(tuple(ckpt.labels))
    model = GanModel.fresh(ckpt.mode, vocab, ckpt.scale, ckpt.active_sizes, seed=0)
    for net in (model.gen, model.disc):
        for name, p in net.params.items():
            full = f"{net.prefix}.{name}"
            try:
                data = ckpt.tensors[f"param:{full}"]
                m = ckpt.tensors[f"adam_m:{full}"]
                v = ckpt.tensors[f"adam_v:{full}"]
            except KeyError as exc:
                raise CorruptFile(f"checkpoint is missing tensor for {full}") from exc
            if data.shape != p.data.shape:
                raise CorruptFile(
                    f"tensor {full} has shape {data.shape}, expected {p.data.shape}")
            p.data = data.copy()
            p.adam_m = m.copy()
            p.adam_v = v.copy()
            p.adam_t = int(ckpt.adam_t.get(full, 0))
        for sname, st in net.states.items():
            st.mean = ckpt.tensors[f"buf:{net.prefix}.{sname}.mean"].copy()
            st.var = ckpt.tensors[f"buf:{net.prefix}.{sname}.var"].copy()
    model.rng.bit_generator.state = ckpt.rng_state
    model.step = ckpt.step
    return model


def _header_dict(ckpt: ModelCheckpoint) -> dict:
    return {
        "mode": ckpt.mode,
        "labels": list(ckpt.labels),
        "active_sizes": ckpt.active_sizes,
        "scale_hex": float(ckpt.scale).hex(),
        "step": ckpt.step,
        "adam_t": ckpt.adam_t,
        "rng_state": ckpt.rng_state,
    }


def serialize(ckpt: ModelCheckpoint) -> bytes:
    header = json.dumps(_header_dict(ckpt), sort_keys=True,
                        separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION),
             struct.pack("<I", len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> ModelCheckpoint:
    if len(data) < 20 or data[:8] != MAGIC:
        raise CorruptFile("not a flowgan checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptFile("checkpoint CRC mismatch (truncated or corrupted)")
    try:
        (hlen,) = struct.unpack_from("<I", data, 12)
        header = json.loads(data[16:16 + hlen])
        off = 16 + hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            end = off + 8 * size
            if end > len(data) - 4:
                raise CorruptFile("checkpoint tensor payload truncated")
            tensors[name] = np.frombuffer(data[off:end], dtype="<f8").reshape(dims).copy()
            off = end
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"malformed checkpoint: {exc}") from exc
    return ModelCheckpoint(
        mode=header["mode"], labels=tuple(header["labels"]),
        active_sizes={k: int(v) for k, v in header["active_sizes"].items()},
        scale=float.fromhex(header["scale_hex"]), step=int(header["step"]),
        rng_state=header["rng_state"],
        adam_t={k: int(v) for k, v in header["adam_t"].items()},
        tensors=tensors, version=version)


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    data = serialize(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected_mode: str | None = None) -> ModelCheckpoint:
    """Load and verify; `expected_mode` guards conditional/unconditional use."""
    with open(path, "rb") as fh:
        ckpt = deserialize(fh.read())
    if expected_mode is not None and ckpt.mode != expected_mode:
        raise ModeMismatch(f"checkpoint is {ckpt.mode}, expected {expected_mode}")
    return ckpt
