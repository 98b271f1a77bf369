"""Checkpoint files: a JSON manifest line followed by a little-endian f32 payload.

Layout::

    {"format": "remote-fusion-ckpt/1", "meta": {...}, "params": [{"name", "shape", "offset"}, ...]}\\n
    <payload bytes>

Offsets are relative to the first payload byte.
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

FORMAT = "remote-fusion-ckpt/1"


class CheckpointError(ValueError):
    pass


def dumps(params: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in params:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "meta": meta or {}, "params": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + b"\n" + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError("missing manifest terminator")
    manifest = json.loads(blob[:nl].decode("utf-8"))
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    payload = memoryview(blob)[nl + 1 :]
    params = {}
    for e in manifest["params"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return params, manifest["meta"]


def save(path: str | os.PathLike, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(params, meta))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
