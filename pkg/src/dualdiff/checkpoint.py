"""Checkpoint container: a text ``manifest`` plus raw little-endian float32 ``weights.bin``."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, PathError

FORMAT_VERSION = 1
MANIFEST = "manifest"
WEIGHTS = "weights.bin"
_LE_F32 = np.dtype("<f4")


def save_tensors(directory, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    tmp = directory / (WEIGHTS + ".tmp")
    with open(tmp, "wb") as fh:
        for name, tensor in tensors.items():
            arr = tensor.detach().cpu().numpy().astype(_LE_F32, copy=False)
            data = np.ascontiguousarray(arr).tobytes()
            fh.write(data)
            table.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                          "offset": offset, "nbytes": len(data)})
            offset += len(data)
    tmp.replace(directory / WEIGHTS)
    manifest = {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": table,
                "total_bytes": offset}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise PathError(f"checkpoint directory {directory} does not exist")
    path = directory / MANIFEST
    if not path.exists():
        raise FormatError(f"{directory}: missing {MANIFEST}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("format_version", "meta", "tensors"):
        if key not in manifest:
            raise FormatError(f"{path}: missing key {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {manifest['format_version']}")
    return manifest


def load_tensors(directory) -> tuple[dict, dict[str, torch.Tensor]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    wpath = directory / WEIGHTS
    if not wpath.exists():
        raise FormatError(f"{directory}: missing {WEIGHTS}")
    blob = wpath.read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if entry.get("dtype") != "float32" or start + n > len(blob):
            raise FormatError(f"{directory}: tensor {entry['name']} is truncated or has a bad dtype")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=n // 4, offset=start)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))
    return manifest["meta"], tensors
