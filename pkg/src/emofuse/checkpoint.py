"""Binary checkpoints.

Layout: ``b"DRKF1"``, a 4-byte little-endian header length, a UTF-8 JSON
header, then the raw payload of little-endian float64 values. Each header
tensor entry names a parameter (``param/...``) or an optimizer moment
(``adam_m/...``, ``adam_v/...``) with its shape and byte offset.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import CheckpointError
from .layers import Module
from .optim import AdamW

MAGIC = b"DRKF1"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def _entries(model: Module, optim: AdamW | None):
    for name, p in model.named_parameters():
        yield f"param/{name}", p.value
    if optim is not None:
        for name, m, v in zip(optim.names, optim.state.m, optim.state.v):
            yield f"adam_m/{name}", m
            yield f"adam_v/{name}", v


def to_bytes(model: Module, optim: AdamW | None = None, cfg: RunConfig | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for name, arr in _entries(model, optim):
        raw = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "config": cfg.to_dict() if cfg is not None else None,
        "optimizer": None if optim is None else {
            "step": optim.state.step, "lr": optim.state.lr, "beta1": optim.state.beta1,
            "beta2": optim.state.beta2, "eps": optim.state.eps, "weight_decay": optim.state.weight_decay,
        },
        "payload_bytes": offset,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)


def save(path: str | os.PathLike, model: Module, optim: AdamW | None = None, cfg: RunConfig | None = None) -> Path:
    path = Path(path)
    data = to_bytes(model, optim, cfg)
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(data: bytes) -> tuple[dict, memoryview]:
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise CheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}, expected {FORMAT_VERSION}")
    payload = memoryview(data)[start + hlen:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(
            f"checkpoint payload is {len(payload)} bytes, header declares {header.get('payload_bytes')} (truncated?)"
        )
    return header, payload


def load(path: str | os.PathLike, model: Module, optim: AdamW | None = None) -> dict:
    """Restore parameters (and optimizer state) in place; returns the header.

    Everything is validated before the first assignment, so a failed load
    leaves ``model`` and ``optim`` untouched.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, payload = read_header(data)
    stored = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = t["offset"]
        hi = lo + 8 * count
        if hi > len(payload):
            raise CheckpointError(f"tensor '{t['name']}' extends past the end of the payload")
        stored[t["name"]] = np.frombuffer(payload[lo:hi], dtype=_LE_F64).reshape(shape).astype(np.float64)

    expected = list(_entries(model, optim))
    if optim is not None and header.get("optimizer") is None:
        raise CheckpointError("checkpoint has no optimizer state")
    for name, arr in expected:
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing '{name}'")
        if stored[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for '{name}': checkpoint {stored[name].shape}, model {arr.shape}")
    unexpected = sorted(set(stored) - {n for n, _ in expected})
    unexpected = [n for n in unexpected if n.startswith("param/") or optim is not None]
    if unexpected:
        raise CheckpointError(f"checkpoint holds tensors the model does not have: {', '.join(unexpected[:5])}")

    for name, p in model.named_parameters():
        p.value = stored[f"param/{name}"]
        p.zero_grad()
    if optim is not None:
        st = optim.state
        for k, name in enumerate(optim.names):
            st.m[k] = stored[f"adam_m/{name}"]
            st.v[k] = stored[f"adam_v/{name}"]
        opt = header["optimizer"]
        st.step = int(opt["step"])
        st.lr, st.beta1, st.beta2 = opt["lr"], opt["beta1"], opt["beta2"]
        st.eps, st.weight_decay = opt["eps"], opt["weight_decay"]
    return header
