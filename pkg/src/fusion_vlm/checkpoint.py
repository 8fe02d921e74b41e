"""Flat named-tensor container: an 8-byte header length, a JSON header, raw data.

Header layout::

    {"tensors": {name: {"dtype": "float64", "shape": [...], "offset": int, "nbytes": int}},
     "metadata": {...}}

Offsets are relative to the first byte after the header.  Data is
little-endian and row-major, so a round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FVLMTEN1"
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


def save_tensors(path: str | Path, tensors: dict, metadata: dict | None = None) -> None:
    header = {"tensors": {}, "metadata": metadata or {}}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        kind = str(arr.dtype)
        if kind not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {kind}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        header["tensors"][name] = {"dtype": kind, "shape": list(arr.shape), "offset": offset,
                                   "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)


def load_tensors(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out = {}
    for name, info in header["tensors"].items():
        start = base + info["offset"]
        buf = data[start:start + info["nbytes"]]
        arr = np.frombuffer(buf, dtype=_DTYPES[info["dtype"]]).reshape(info["shape"]).copy()
        out[name] = torch.from_numpy(arr)
    return out, header.get("metadata", {})


def save_model(path, model, optimizer=None, metadata: dict | None = None) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            n = names[id(p)]
            tensors[f"optim/{n}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optim/{n}/step"] = torch.as_tensor(st["step"]).reshape(1)
    save_tensors(path, tensors, metadata)


def load_model(path, model, optimizer=None) -> dict:
    tensors, meta = load_tensors(path)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    if optimizer is not None:
        params = dict(model.named_parameters())
        for n, p in params.items():
            key = f"optim/{n}/exp_avg"
            if key in tensors:
                optimizer.state[p] = {
                    "step": tensors[f"optim/{n}/step"].reshape(()).clone(),
                    "exp_avg": tensors[key].clone(),
                    "exp_avg_sq": tensors[f"optim/{n}/exp_avg_sq"].clone(),
                }
    return meta
