"""Versioned tensor-container files for model weights and optimizer state.

Layout::

    b"MACSCKPT"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON
    payload                     concatenated little-endian raw tensor data

The header holds ``tensors``: a list of ``{name, dtype, shape, offset, nbytes}``
with offsets relative to the payload start, plus free-form metadata (model
kind and config, normalization constants, training state).
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .exceptions import FormatError
from .models import MacsSwin, VidMacsSwin, build_model

MAGIC = b"MACSCKPT"
FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def write_tensor_file(path, tensors: "dict[str, np.ndarray]", meta: dict | None = None) -> None:
    directory, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise FormatError(f"cannot store {name!r} with dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        directory.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta or {})
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = directory
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_tensor_file(path) -> "tuple[dict, OrderedDict[str, np.ndarray]]":
    """Parse and fully validate a tensor file; never returns partial data."""
    buf = Path(path).read_bytes()
    if len(buf) < 20 or buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version not in SUPPORTED_VERSIONS:
        raise FormatError(f"{path}: unsupported format version {version}")
    if 20 + hlen > len(buf):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(buf[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e
    payload = memoryview(buf)[20 + hlen :]
    entries = header.get("tensors")
    if not isinstance(entries, list):
        raise FormatError(f"{path}: header has no tensor directory")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    expected = 0
    for ent in sorted(entries, key=lambda e: e.get("offset", -1)):
        try:
            name, dtype, shape = ent["name"], ent["dtype"], tuple(int(s) for s in ent["shape"])
            offset, nbytes = int(ent["offset"]), int(ent["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: malformed tensor entry {ent!r}") from e
        if dtype not in _DTYPES:
            raise FormatError(f"{path}: {name!r} has unknown dtype {dtype!r}")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name!r}")
        if offset != expected:
            raise FormatError(f"{path}: byte range of {name!r} starts at {offset}, expected {expected} (gap or overlap)")
        itemsize = np.dtype(_DTYPES[dtype]).itemsize
        if nbytes != itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: {name!r} declares {nbytes} bytes for shape {shape}")
        if offset + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload at {name!r}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype=_DTYPES[dtype]).reshape(shape)
        tensors[name] = arr.astype(dtype, copy=True)
        expected = offset + nbytes
    if expected != len(payload):
        raise FormatError(f"{path}: {len(payload) - expected} trailing payload bytes not covered by the directory")
    return header, tensors


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    meta = {
        "model": {"kind": model.kind, "config": model.cfg.to_dict()},
        "normalization": {"mean": list(model.cfg.mean), "std": list(model.cfg.std)},
        "extra": extra or {},
    }
    write_tensor_file(path, model.state_dict(), meta)


def _is_head(name: str) -> bool:
    return name.startswith("head.")


def load_checkpoint(path, model: MacsSwin | VidMacsSwin | None = None, partial: bool = False, seed: int = 0):
    """Load weights, building the model from the header if none is given.

    With ``partial=True`` only backbone tensors are restored and the
    classification head keeps its fresh initialization (transfer learning).
    The model is untouched unless every check passes.
    """
    header, tensors = read_tensor_file(path)
    info = header.get("model", {})
    if model is None:
        try:
            model = build_model(info["kind"], info["config"], seed=seed)
        except (KeyError, TypeError) as e:
            raise FormatError(f"{path}: header lacks a usable model config") from e
    elif info.get("kind") not in (None, model.kind):
        raise FormatError(f"{path}: checkpoint holds a {info.get('kind')} model, not {model.kind}")
    if partial:
        tensors = OrderedDict((k, v) for k, v in tensors.items() if not _is_head(k))
        params = dict(model.named_parameters())
        missing = [n for n in params if not _is_head(n) and n not in tensors]
        if missing:
            raise FormatError(f"{path}: backbone tensors missing: {missing}")
        model.load_state_dict(tensors, strict=False)
    else:
        model.load_state_dict(tensors, strict=True)
    model.checkpoint_header = header
    return model
