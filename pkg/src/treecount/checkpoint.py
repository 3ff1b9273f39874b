"""Binary checkpoint format.

Layout: magic ``TCKPT1\\0\\0``, uint64 LE header length, UTF-8 JSON header,
then tensor payloads. The header lists every tensor as
``{"name", "shape", "dtype", "offset", "nbytes"}`` (offsets relative to the
payload start) plus the model configuration and its per-phase settings.
Floating tensors are stored as little-endian float32; integer buffers
(BatchNorm step counters, optimizer step) as little-endian int64.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TCKPT1\0\0"


def _encode(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu()
    if t.is_floating_point():
        return "<f4", t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
    return "<i8", t.to(torch.int64).contiguous().numpy().astype("<i8").tobytes()


def save(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    """Atomically write ``tensors`` and JSON-serializable ``meta`` to ``path``."""
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        dtype, blob = _encode(t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for b in blobs:
                f.write(b)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a treecount checkpoint")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        payload = f.read()
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"])
        t = torch.from_numpy(arr.copy())
        tensors[e["name"]] = t.float() if e["dtype"] == "<f4" else t
    return tensors, header["meta"]


def phase_header(model_config) -> list[dict]:
    return [asdict(p) for p in model_config.phases]
