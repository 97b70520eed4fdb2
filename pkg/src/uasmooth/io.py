"""Binary containers for spectrogram tensors and training checkpoints.

Both share one layout: 8-byte magic, little-endian uint32 format version,
uint32 header length, a UTF-8 JSON header, then raw little-endian C-order
array bytes at the offsets listed in the header.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

SPEC_MAGIC = b"UASPEC\x00\x00"
CKPT_MAGIC = b"UASCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class ContainerError(ValueError):
    pass


def _write(path, magic: bytes, header: dict, arrays: list[np.ndarray]) -> None:
    entries, offset = [], 0
    blobs = []
    for a in arrays:
        a = np.asarray(a, dtype=a.dtype.newbyteorder("<")).copy(order="C")  # keeps 0-d shapes
        blobs.append(a.tobytes())
        entries.append({"dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        offset += a.nbytes
    header = dict(header, arrays=entries)
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def _read(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{path}: truncated header")
    m, version, n = _PREFIX.unpack_from(data)
    if m != magic:
        raise ContainerError(f"{path}: bad magic {m!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    header = json.loads(data[_PREFIX.size: _PREFIX.size + n])
    body = memoryview(data)[_PREFIX.size + n:]
    arrays = []
    for e in header["arrays"]:
        if e["offset"] + e["nbytes"] > len(body):
            raise ContainerError(f"{path}: truncated array data")
        buf = body[e["offset"]: e["offset"] + e["nbytes"]]
        arrays.append(np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy())
    return header, arrays


def save_tensor(path, x: np.ndarray, meta: dict | None = None) -> None:
    x = np.asarray(x)
    _write(path, SPEC_MAGIC, {"shape": list(x.shape), "dtype": x.dtype.str, "meta": meta or {}}, [x])


def load_tensor(path) -> tuple[np.ndarray, dict]:
    header, (x,) = _read(path, SPEC_MAGIC)
    return x, header.get("meta", {})


@dataclass
class Checkpoint:
    model_state: dict  # name -> tensor
    config: dict
    epoch: int = 0
    best_metric: float | None = None
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names, arrays = [], []
    for k, v in ckpt.model_state.items():
        names.append(k)
        arrays.append(_np(v))
    optim = None
    if ckpt.optimizer_state is not None:
        state = {}
        slots_by_id = ckpt.optimizer_state["state"]
        for pid in sorted(slots_by_id, key=int):  # canonical order: bytes survive a load/save cycle
            state[str(pid)] = {}
            for slot, v in sorted(slots_by_id[pid].items()):
                if torch.is_tensor(v):
                    state[str(pid)][slot] = len(arrays)
                    arrays.append(_np(v))
                else:
                    state[str(pid)][slot] = {"value": v}
        optim = {"state": state, "param_groups": ckpt.optimizer_state["param_groups"]}
    header = {"model": names, "config": ckpt.config, "epoch": ckpt.epoch,
              "best_metric": ckpt.best_metric, "optimizer": optim, "extra": ckpt.extra}
    _write(path, CKPT_MAGIC, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = _read(path, CKPT_MAGIC)
    model_state = {k: torch.from_numpy(arrays[i]) for i, k in enumerate(header["model"])}
    optim = header.get("optimizer")
    if optim is not None:
        state = {}
        for pid, slots in optim["state"].items():
            state[int(pid)] = {s: torch.from_numpy(arrays[v]) if isinstance(v, int) else v["value"]
                               for s, v in slots.items()}
        optim = {"state": state, "param_groups": optim["param_groups"]}
    return Checkpoint(model_state, header["config"], header["epoch"], header["best_metric"],
                      optim, header.get("extra", {}))


def write_history(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_labels(path, y: np.ndarray, recording_ids, task_names) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "recording_id", *task_names])
        for i, (row, rec) in enumerate(zip(np.asarray(y), recording_ids)):
            w.writerow([i, rec, *(int(v) for v in row)])


def read_labels(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    y = np.array([[int(v) for v in r[2:]] for r in rows], dtype=np.int64).reshape(len(rows), len(header) - 2)
    return y, [r[1] for r in rows], header[2:]
