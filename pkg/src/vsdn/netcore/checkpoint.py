"""Checkpoint container: a magic line, one JSON header line, then raw little-endian arrays.

The header lists name, shape, dtype and byte offset (relative to the end of
the header line) for every array, and echoes the model config and RNG state.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"VSDN-CHECKPOINT 1\n"
_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    rng_state: bytes | None = None

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("optim/")}

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        return {k[len("optim/"):]: v for k, v in self.arrays.items() if k.startswith("optim/")}


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        if t.is_floating_point():
            return t.to(torch.float32).numpy().astype("<f4")
        return t.to(torch.int64).numpy().astype("<i8")
    a = np.asarray(t)
    return a.astype("<f4") if np.issubdtype(a.dtype, np.floating) else a.astype("<i8")


def model_state_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: _as_array(v) for k, v in model.state_dict().items()}


def optimizer_state_arrays(optimizer: torch.optim.Optimizer, model: torch.nn.Module) -> dict:
    """Optimizer per-parameter state keyed by parameter name, under the 'optim/' prefix."""
    ids = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for key, value in optimizer.state.get(p, {}).items():
                out[f"optim/{ids[id(p)]}/{key}"] = _as_array(torch.as_tensor(value))
    return out


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict | None = None,
                    meta: dict | None = None, rng_state: bytes | None = None) -> str:
    """Write arrays in sorted-name order; returns the sha256 of the file bytes."""
    import hashlib

    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = "<f4" if np.issubdtype(a.dtype, np.floating) else "<i8"
        blob = a.astype(dt).tobytes(order="C")
        entries.append({"name": name, "shape": list(a.shape), "dtype": dt, "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "arrays": entries,
        "config": config or {},
        "meta": meta or {},
        "rng_state": base64.b64encode(rng_state).decode() if rng_state is not None else None,
    }
    data = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    end = raw.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(MAGIC):end])
        entries = header["arrays"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from exc
    body = memoryview(raw)[end + 1:]
    arrays = {}
    for e in entries:
        try:
            dt = _DTYPES[e["dtype"]]
            shape = tuple(int(s) for s in e["shape"])
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            start = int(e["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad array entry {e!r}") from exc
        if n != e.get("nbytes", n) or start < 0 or start + n > len(body):
            raise CheckpointError(f"{path}: array {e.get('name')!r} exceeds the data section")
        arrays[e["name"]] = np.frombuffer(body[start:start + n], dtype=dt).reshape(shape).copy()
    rng = header.get("rng_state")
    return Checkpoint(arrays, header.get("config", {}), header.get("meta", {}),
                      base64.b64decode(rng) if rng else None)


def apply_to_model(ckpt: Checkpoint, model: torch.nn.Module, prefixes=None) -> list[str]:
    """Copy checkpoint arrays into `model`.

    With `prefixes` only names starting with one of them are touched. Every
    selected array is validated before anything is copied, so a mismatch
    leaves the model unchanged. Returns the names loaded.
    """
    state = model.state_dict()
    wanted = [k for k in state if prefixes is None or k.startswith(tuple(prefixes))]
    arrays = ckpt.model_arrays()
    for k in wanted:
        if k not in arrays:
            raise CheckpointError(f"checkpoint lacks array {k!r}")
        if tuple(arrays[k].shape) != tuple(state[k].shape):
            raise CheckpointError(
                f"shape mismatch for {k!r}: checkpoint {arrays[k].shape}, model {tuple(state[k].shape)}")
    with torch.no_grad():
        for k in wanted:
            state[k].copy_(torch.from_numpy(arrays[k]).to(state[k].dtype))
    return wanted


def load_optimizer_state(ckpt: Checkpoint, optimizer: torch.optim.Optimizer,
                         model: torch.nn.Module) -> None:
    arrays = ckpt.optimizer_arrays()
    if not arrays:
        return
    params = dict(model.named_parameters())
    for key, value in arrays.items():
        name, _, field_ = key.rpartition("/")
        p = params.get(name)
        if p is None:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        t = torch.from_numpy(value)
        if field_ == "step":
            t = t.to(torch.float32)
        else:
            t = t.to(p.dtype)
        optimizer.state[p][field_] = t
