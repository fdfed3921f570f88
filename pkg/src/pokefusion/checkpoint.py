"""Checkpoint file format.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"PKFUSION"
    8       4     uint32 format version (currently 1)
    12      8     uint64 header length H
    20      H     UTF-8 JSON header (sorted keys, no whitespace)
    20+H    ...   tensor payload, tensors concatenated in header order

The JSON header holds ``meta`` (free-form JSON: denoiser config, train
config, partition, step counter, ...) and ``tensors``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` records whose ``offset``
is relative to the start of the payload. Tensor bytes are the raw
C-contiguous little-endian buffer, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PKFUSION"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_NP = {v: np.dtype(v).newbyteorder("<") for v in _DTYPES.values()}


class CheckpointError(RuntimeError):
    pass


def save_tensors(path: Path, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    records, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        dt = _DTYPES[t.dtype]
        buf = t.numpy().astype(_NP[dt], copy=False).tobytes(order="C")
        records.append({"name": name, "dtype": dt, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta, "tensors": records}, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_tensors(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    out = {}
    for rec in header["tensors"]:
        start = base + rec["offset"]
        arr = np.frombuffer(data, dtype=_NP[rec["dtype"]], count=int(np.prod(rec["shape"], dtype=np.int64)),
                            offset=start).reshape(rec["shape"])
        out[rec["name"]] = torch.from_numpy(arr.copy())
    return out, header["meta"]


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
