"""Versioned binary checkpoints.

A checkpoint directory holds ``manifest.json`` (format version, config
snapshot and hash, per-tensor name/shape/dtype/byte-offset in write order)
and ``params.bin`` (the raw little-endian buffers concatenated in manifest
order). Loading restores every parameter bit-exactly.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import ValidationError
from .model import Forecaster

FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, model: Forecaster, config_dict: dict, config_hash: str) -> None:
    """Write manifest.json + params.bin under the directory ``path``."""
    os.makedirs(path, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name, p in model.parameters().items():
        dtype_name = p.data.dtype.name
        if dtype_name not in _DTYPES:
            raise ValidationError(f"cannot checkpoint dtype {dtype_name}")
        raw = np.ascontiguousarray(p.data).astype(_DTYPES[dtype_name]).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(p.shape),
                "dtype": dtype_name,
                "offset": offset,
            }
        )
        blobs.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "config": config_dict,
        "adjacency": None if model.adjacency is None else np.asarray(model.adjacency, dtype=np.float64).tolist(),
        "tensors": tensors,
        "total_bytes": offset,
    }
    _atomic_write(
        os.path.join(path, "manifest.json"),
        json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"),
    )
    _atomic_write(os.path.join(path, "params.bin"), b"".join(blobs))


def read_manifest(path: str) -> dict:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValidationError(
            f"unsupported checkpoint format version {manifest.get('format_version')}"
        )
    return manifest


def load_checkpoint(
    path: str,
    model: Forecaster,
    expected_hash: str | None = None,
    force: bool = False,
) -> dict:
    """Restore parameters into ``model``; returns the manifest.

    A config-hash mismatch against ``expected_hash`` is refused unless
    ``force`` is set.
    """
    manifest = read_manifest(path)
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        if not force:
            raise ValidationError(
                f"checkpoint config hash {manifest['config_hash']} does not match "
                f"expected {expected_hash}; pass force to load anyway"
            )
    with open(os.path.join(path, "params.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["total_bytes"]:
        raise ValidationError(
            f"checkpoint blob is {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )

    params = model.parameters()
    names_in_file = {t["name"] for t in manifest["tensors"]}
    if names_in_file != set(params):
        missing = sorted(set(params) - names_in_file)
        extra = sorted(names_in_file - set(params))
        raise ValidationError(
            f"checkpoint/model parameter mismatch; missing: {missing or 'none'}, "
            f"unexpected: {extra or 'none'}"
        )
    for entry in manifest["tensors"]:
        p = params[entry["name"]]
        shape = tuple(entry["shape"])
        if p.shape != shape:
            raise ValidationError(
                f"tensor {entry['name']} has shape {shape} in checkpoint, "
                f"model expects {p.shape}"
            )
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(shape)
        p.data = arr.astype(entry["dtype"], copy=True)
    return manifest
