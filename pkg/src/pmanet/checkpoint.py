"""Self-describing checkpoint files.

Layout::

    pma-v1
    meta <json>
    tensor <name> <dtype> <dim,dim,...> <offset> <nbytes>
    ...
    end
    <raw little-endian array bytes>

Offsets count from the first byte after the ``end`` line. Tensors are written
in sorted-name order so identical parameters give identical bytes.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from .exceptions import BadCheckpoint

MAGIC = "pma-v1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict | None = None) -> Path:
    path = Path(path)
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True, separators=(",", ":"))]
    blobs, offset = [], 0
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        t = tensors[name].detach().cpu()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for {name}")
        blob = np.ascontiguousarray(t.numpy()).astype(_DTYPES[dtype], copy=False).tobytes()
        shape = ",".join(str(d) for d in t.shape)
        lines.append(f"tensor {name} {dtype} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise BadCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise BadCheckpoint(f"{path} is not a {MAGIC} checkpoint")
    header = raw[: end].decode("utf-8").split("\n")
    data = memoryview(raw)[end + len(b"\nend\n"):]
    meta: dict = {}
    tensors: dict[str, torch.Tensor] = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, dtype, shape, offset, nbytes = rest.split(" ")
            dims = tuple(int(d) for d in shape.split(",") if d)
            offset, nbytes = int(offset), int(nbytes)
            if offset + nbytes > len(data):
                raise BadCheckpoint(f"{path}: tensor {name} overruns the file")
            arr = np.frombuffer(data[offset: offset + nbytes], dtype=_DTYPES[dtype]).reshape(dims)
            tensors[name] = torch.from_numpy(arr.copy())
        else:
            raise BadCheckpoint(f"{path}: unexpected header line {line!r}")
    return tensors, meta
