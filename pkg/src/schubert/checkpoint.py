"""Binary checkpoint format.

Layout: the magic ``SCHU1``, a newline, one line of JSON (config, ordered
tensor manifest, optional metadata), then each tensor's values as raw
little-endian float32 in manifest order.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .config import ArchConfig, ConfigError
from .model import expected_shapes, from_arrays

MAGIC = b"SCHU1"


class CheckpointFormatError(ValueError):
    pass


def _header(weights, config, metadata):
    manifest = [{"name": n, "shape": list(t.shape)} for n, t in weights.named_tensors()]
    header = {"config": config.to_dict(), "tensors": manifest}
    if metadata:
        header["metadata"] = metadata
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(weights, config, path, metadata=None):
    path = Path(path)
    chunks = [MAGIC, b"\n", _header(weights, config, metadata), b"\n"]
    for _, t in weights.named_tensors():
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    # write-then-rename so readers never observe a half-written file
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.writelines(chunks)
        # mkstemp creates 0600; give the file the permissions open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse(raw)[0]


def _parse(raw):
    if not raw.startswith(MAGIC + b"\n"):
        raise CheckpointFormatError("missing SCHU1 magic")
    end = raw.find(b"\n", len(MAGIC) + 1)
    if end < 0:
        raise CheckpointFormatError("unterminated header")
    try:
        header = json.loads(raw[len(MAGIC) + 1 : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}") from None
    if not isinstance(header, dict) or "config" not in header or "tensors" not in header:
        raise CheckpointFormatError("header lacks config or tensor manifest")
    return header, end + 1


def load_checkpoint(path, requires_grad=True):
    """Return ``(weights, config)``; raises :class:`CheckpointFormatError` on any mismatch."""
    raw = Path(path).read_bytes()
    header, offset = _parse(raw)
    try:
        config = ArchConfig.from_dict(header["config"])
    except ConfigError as exc:
        raise CheckpointFormatError(f"invalid config in header: {exc}") from None
    shapes = expected_shapes(config)
    manifest = header["tensors"]
    names = [m.get("name") for m in manifest]
    if names != list(shapes):
        extra = sorted(set(names) - set(shapes))
        missing = sorted(set(shapes) - set(names))
        raise CheckpointFormatError(
            f"tensor manifest does not match config (unexpected {extra}, missing {missing})"
        )
    arrays = {}
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != shapes[name]:
            raise CheckpointFormatError(f"{name}: manifest shape {shape} != config shape {shapes[name]}")
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(raw):
            raise CheckpointFormatError(f"{name}: file truncated ({len(raw) - offset} of {nbytes} bytes left)")
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise CheckpointFormatError(f"{len(raw) - offset} trailing bytes after last tensor")
    for name, arr in arrays.items():
        if not np.isfinite(arr).all():
            raise CheckpointFormatError(f"{name}: non-finite values")
    return from_arrays(config, arrays, requires_grad=requires_grad), config
