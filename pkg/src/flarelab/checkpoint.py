"""Binary checkpoint format: JSON header followed by little-endian float32 arrays.

Layout::

    b"FLCK" | uint32 LE header length | UTF-8 JSON header | payload

The header lists every array with its shape, byte offset and byte count
relative to the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerEncoder, parameter_shapes

MAGIC = b"FLCK"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    entries, offset = [], 0
    blobs = []
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = dict(header, format_version=FORMAT_VERSION, dtype="float32-le",
                  parameters=entries, payload_bytes=offset)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_header(path) -> tuple[dict, int]:
    """Parse the header; returns it with the payload's absolute start offset."""
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8 or prefix[:4] != MAGIC:
            raise CorruptHeaderError(f"{path}: not a checkpoint (bad magic)")
        (n,) = struct.unpack("<I", prefix[4:])
        raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} of {n} bytes)")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or "parameters" not in header:
        raise CorruptHeaderError(f"{path}: header lacks a parameter table")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
    return header, 8 + n


def read_arrays(path, expected_shapes: dict[str, tuple[int, ...]] | None = None):
    header, start = read_header(path)
    entries = header["parameters"]
    try:
        table = {e["name"]: e for e in entries}
        for e in entries:
            if int(np.prod(e["shape"])) * _DTYPE.itemsize != e["nbytes"]:
                raise ShapeMismatchError(
                    f"{path}: parameter {e['name']!r} shape {e['shape']} disagrees with {e['nbytes']} bytes")
    except (KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"{path}: malformed parameter entry ({exc})") from None
    if expected_shapes is not None:
        missing = [k for k in expected_shapes if k not in table]
        extra = [k for k in table if k not in expected_shapes]
        if missing or extra:
            raise ShapeMismatchError(f"{path}: parameter set differs (missing {missing}, unexpected {extra})")
        for name, shape in expected_shapes.items():
            if tuple(table[name]["shape"]) != tuple(shape):
                raise ShapeMismatchError(
                    f"{path}: parameter {name!r} has shape {tuple(table[name]['shape'])}, expected {tuple(shape)}")
    size = os.path.getsize(path)
    if size < start + header["payload_bytes"]:
        raise TruncatedPayloadError(
            f"{path}: payload truncated ({size - start} of {header['payload_bytes']} bytes)")
    arrays = {}
    with open(path, "rb") as fh:
        for e in entries:
            fh.seek(start + e["offset"])
            buf = fh.read(e["nbytes"])
            if len(buf) != e["nbytes"]:
                raise TruncatedPayloadError(f"{path}: parameter {e['name']!r} truncated")
            arrays[e["name"]] = np.frombuffer(buf, dtype=_DTYPE).reshape(e["shape"]).astype(np.float32)
    return header, arrays


def save_checkpoint(model: TransformerEncoder, path, **meta) -> None:
    header = {"kind": "model", "config": model.config.to_dict(), "task": model.task,
              "seed": model.seed, "meta": meta}
    write_arrays(path, {k: v.data for k, v in model.params.items()}, header)


def load_checkpoint(path) -> TransformerEncoder:
    header, _ = read_header(path)
    if header.get("kind") != "model":
        raise CorruptHeaderError(f"{path}: expected a model checkpoint, found {header.get('kind')!r}")
    try:
        config = ModelConfig(**header["config"])
        task = header["task"]
        shapes = parameter_shapes(config, task)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptHeaderError(f"{path}: bad model description ({exc})") from None
    _, arrays = read_arrays(path, shapes)
    model = TransformerEncoder(config, task, seed=header.get("seed", 0))
    for name, arr in arrays.items():
        model.params[name].data = arr
    return model
