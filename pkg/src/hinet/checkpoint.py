"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HNCK"                       4-byte magic
    uint32 format_version
    uint64 header_length
    header                        UTF-8 JSON, ``header_length`` bytes
    payload                       concatenated tensor bytes

The JSON header holds ``format_version``, ``model_config``, free-form
``meta`` (epoch, step, train config, RNG state ...) and a ``tensors``
list of ``{name, dtype, shape, offset, nbytes, crc32}``.  Tensor names
are dotted: ``model.<param>`` for parameters and batch-norm buffers,
``optim.<group>.<param>.<slot>`` for optimizer moments.  Parameters
are float32 (``"<f4"``); step counters are int64 (``"<i8"``).
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"HNCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_DTYPES = {torch.float32: "<f4", torch.int64: "<i8", torch.uint8: "|u1", torch.float64: "<f8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


def save_tensors(path, tensors, model_config=None, meta=None):
    """Write an ordered ``{name: tensor}`` mapping to ``path`` atomically."""
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise FormatError(f"{name}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape), "offset": offset,
                        "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"format_version": FORMAT_VERSION, "model_config": model_config, "meta": meta or {},
                         "tensors": entries}).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)
    return path


def load_tensors(path):
    """Inverse of :func:`save_tensors`; returns ``(tensors, model_config, meta)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: corrupt payload, file shorter than its prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: field 'magic' is {magic!r}, not a hinet checkpoint")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: field 'format_version' is {version}, this build reads {FORMAT_VERSION} "
                          "(version mismatch)")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: corrupt payload, header truncated")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from exc
    payload = memoryview(raw)[start:]
    tensors = {}
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise FormatError(f"{path}: corrupt payload, tensor '{e['name']}' truncated")
        chunk = bytes(payload[lo:hi])
        if zlib.crc32(chunk) != e["crc32"]:
            raise FormatError(f"{path}: corrupt payload, tensor '{e['name']}' fails its checksum")
        arr = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(_TORCH[e["dtype"]])
    if len(payload) != sum(e["nbytes"] for e in header["tensors"]):
        raise FormatError(f"{path}: corrupt payload, trailing bytes")
    return tensors, header.get("model_config"), header.get("meta", {})


def model_tensors(model):
    return {f"model.{k}": v for k, v in model.state_dict().items()}


def optimizer_tensors(group, optimizer, model):
    """Adam moments keyed by parameter name rather than by position."""
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in optimizer.state.items():
        for slot, val in st.items():
            t = val if torch.is_tensor(val) else torch.tensor(val)
            out[f"optim.{group}.{names[id(p)]}.{slot}"] = t.reshape(-1) if t.dim() == 0 else t
    return out


def restore_optimizer(group, optimizer, model, tensors):
    prefix = f"optim.{group}."
    by_name = dict(model.named_parameters())
    state = {}
    for key, val in tensors.items():
        if not key.startswith(prefix):
            continue
        pname, slot = key[len(prefix):].rsplit(".", 1)
        if pname not in by_name:
            raise FormatError(f"checkpoint field '{key}' names an unknown parameter")
        p = by_name[pname]
        state.setdefault(p, {})[slot] = val.reshape(()) if slot == "step" else val.clone()
    for p, st in state.items():
        if "step" in st:
            st["step"] = st["step"].to(torch.float32)
        optimizer.state[p] = st
