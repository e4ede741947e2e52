"""Training-state persistence.

A checkpoint is a directory: a text manifest (format version, step, the full
flat run config, and per-array shape/sha256 entries) plus one raw
little-endian float32 blob per named array. Every piece of mutable training
state rides along (student, teacher, both optimizer moments, both centers),
so save -> load -> save reproduces identical bytes and resumed runs continue
bit-exactly. Writes go to a temp directory first, then rename.
"""

from __future__ import annotations

import hashlib
import os
import shutil

import numpy as np

from .config import RunConfig, from_flat, parse_kv_text, to_flat
from .errors import CheckpointError, MigrationError
from .trainer import TrainState
from .vit import ModelParams

CHECKPOINT_VERSION = 1


def _state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, t in state.student.items():
        out[f"student.{name}"] = t.data
    for name, t in state.teacher.items():
        out[f"teacher.{name}"] = t.data
    for name, a in state.opt_m.items():
        out[f"opt_m.{name}"] = a
    for name, a in state.opt_v.items():
        out[f"opt_v.{name}"] = a
    out["center.dino"] = state.dino_center
    out["center.ibot"] = state.ibot_center
    return out


def _blob_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def checkpoint_save(state: TrainState, cfg: RunConfig, path) -> None:
    """Write the checkpoint directory atomically (temp dir, then rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "blobs"))

    arrays = _state_arrays(state)
    lines = [f"format_version = {CHECKPOINT_VERSION}", f"step = {state.step}"]
    lines += [f"{k} = {v}" for k, v in to_flat(cfg).items()]
    for name, a in arrays.items():
        blob = _blob_bytes(a)
        with open(os.path.join(tmp, "blobs", f"{name}.bin"), "wb") as f:
            f.write(blob)
        shape = ",".join(str(d) for d in a.shape)
        lines.append(f"array.{name}.shape = {shape}")
        lines.append(f"array.{name}.sha256 = {hashlib.sha256(blob).hexdigest()}")
    with open(os.path.join(tmp, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")

    if os.path.exists(path):
        shutil.rmtree(path)
    os.rename(tmp, path)


def _read_array(path: str, name: str, shape: tuple[int, ...], sha: str) -> np.ndarray:
    blob_path = os.path.join(path, "blobs", f"{name}.bin")
    if not os.path.exists(blob_path):
        raise CheckpointError(f"missing blob for {name}")
    with open(blob_path, "rb") as f:
        blob = f.read()
    if hashlib.sha256(blob).hexdigest() != sha:
        raise CheckpointError(f"checksum mismatch for {name}; blob corrupt or truncated")
    arr = np.frombuffer(blob, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(
            f"blob for {name} holds {arr.size} values, expected shape {shape}"
        )
    return arr.reshape(shape).astype(np.float32)


def checkpoint_load(path) -> tuple[TrainState, RunConfig]:
    path = os.fspath(path)
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        kv = parse_kv_text(f.read())

    version = int(kv.pop("format_version", "-1"))
    if version != CHECKPOINT_VERSION:
        raise MigrationError(
            f"checkpoint format version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    step = int(kv.pop("step"))

    array_meta: dict[str, dict[str, str]] = {}
    cfg_kv: dict[str, str] = {}
    for k, v in kv.items():
        if k.startswith("array."):
            name, attr = k[len("array.") :].rsplit(".", 1)
            array_meta.setdefault(name, {})[attr] = v
        else:
            cfg_kv[k] = v
    cfg = from_flat(cfg_kv)

    def load(name: str) -> np.ndarray:
        if name not in array_meta:
            raise CheckpointError(f"manifest lacks array entry for {name}")
        meta = array_meta[name]
        shape = tuple(int(d) for d in meta["shape"].split(",") if d != "")
        return _read_array(path, name, shape, meta["sha256"])

    def load_group(prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix) + 1
        names = [n[plen:] for n in array_meta if n.startswith(prefix + ".")]
        return {n: load(f"{prefix}.{n}") for n in names}

    student = ModelParams.from_arrays(cfg.model, load_group("student"), requires_grad=True)
    teacher = ModelParams.from_arrays(cfg.model, load_group("teacher"), requires_grad=False)
    state = TrainState(
        student=student,
        teacher=teacher,
        dino_center=load("center.dino"),
        ibot_center=load("center.ibot"),
        opt_m=load_group("opt_m"),
        opt_v=load_group("opt_v"),
        step=step,
    )
    return state, cfg
