"""Checkpoint container.

Layout::

    8 bytes   magic  b"LDCSFCK\\x01"
    8 bytes   header length, unsigned little-endian
    n bytes   UTF-8 JSON header: format_version, config, meta, entries
    ...       raw little-endian tensor data at the offsets listed in entries

Each entry is ``{"name", "kind", "shape", "dtype", "offset", "nbytes"}`` with
``kind`` one of ``param`` / ``buffer`` / ``velocity``.  Floating data is
stored as ``<f4``; integer counters as ``<i8``.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LDCSFCK\x01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    meta: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    velocities: dict = field(default_factory=dict)


def _storage_dtype(arr):
    return np.dtype("<i8") if np.issubdtype(np.asarray(arr).dtype, np.integer) else np.dtype("<f4")


def save_checkpoint(path, config, params, buffers=None, velocities=None, meta=None):
    """Write a checkpoint; ``params``/``buffers``/``velocities`` map name -> array."""
    entries, blobs, offset = [], [], 0
    for kind, group in (("param", params), ("buffer", buffers or {}), ("velocity", velocities or {})):
        for name, value in group.items():
            arr = np.asarray(value)
            dtype = _storage_dtype(arr)
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            entries.append({
                "name": name, "kind": kind, "shape": list(arr.shape),
                "dtype": dtype.str, "offset": offset, "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "meta": meta or {},
        "entries": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_header(path):
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path} is not an LDCSF checkpoint")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, len(MAGIC) + 8 + length


def load_checkpoint(path):
    header, start = read_header(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    ckpt = Checkpoint(config=header["config"], meta=header["meta"])
    groups = {"param": ckpt.params, "buffer": ckpt.buffers, "velocity": ckpt.velocities}
    for e in header["entries"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"truncated checkpoint: entry {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        groups[e["kind"]][e["name"]] = arr.copy()
    return ckpt


def model_state(model):
    params = {name: p.data for name, p in model.named_parameters()}
    buffers = {name: np.asarray(b) for name, b in model.named_buffers()}
    return params, buffers


def load_model_state(model, ckpt):
    """Copy checkpoint tensors into ``model``; all names and shapes are
    validated before anything is written, so a failure leaves ``model`` intact."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    missing = (set(params) - set(ckpt.params)) | (set(buffers) - set(ckpt.buffers))
    extra = (set(ckpt.params) - set(params)) | (set(ckpt.buffers) - set(buffers))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match model: missing {sorted(missing)[:4]}, unexpected {sorted(extra)[:4]}"
        )
    for name, p in params.items():
        if ckpt.params[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: {ckpt.params[name].shape} vs {p.shape}")
    for name, b in buffers.items():
        if ckpt.buffers[name].shape != np.shape(b):
            raise CheckpointError(f"shape mismatch for buffer {name}")
    for name, p in params.items():
        p.data[...] = ckpt.params[name]
    for name in buffers:
        model.load_buffer(name, ckpt.buffers[name])
    return model
