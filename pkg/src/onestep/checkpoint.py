"""JSON checkpoints: one document with a header and named float64 tensors.

Floats are written with ``repr`` precision, which round-trips every
float64 exactly, and keys are emitted in a fixed order so that identical
runs produce identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import EpsNet, NoiseSchedule
from .nn import Mlp, ValidationError
from .policy import Normalizer

FORMAT = "ODP"
VERSION = 1
ROLES = ("teacher", "generator", "psi")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    role: str
    net: EpsNet
    normalizer: Normalizer
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)   # task layout, generator settings, ...

    @property
    def schedule(self) -> NoiseSchedule:
        return self.net.schedule

    @property
    def regime(self) -> str:
        return self.net.schedule.regime


def _tensor(name: str, arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise CheckpointError(f"tensor {name} holds non-finite values")
    return {"name": name, "shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}


def to_document(ck: Checkpoint) -> dict:
    if ck.role not in ROLES:
        raise CheckpointError(f"unknown role {ck.role!r}")
    header = {
        "format": FORMAT,
        "version": VERSION,
        "role": ck.role,
        "regime": ck.regime,
        "schedule": ck.schedule.to_dict(),
        "normalizer": ck.normalizer.to_dict(),
        "net": ck.net.descriptor(),
        "seed": int(ck.seed),
        "step": int(ck.step),
        "extra": ck.extra,
    }
    names = [f"{'W' if i % 2 == 0 else 'b'}{i // 2}" for i in range(len(ck.net.params))]
    return {"header": header, "tensors": [_tensor(n, p) for n, p in zip(names, ck.net.params)]}


def dumps(ck: Checkpoint) -> str:
    return json.dumps(to_document(ck), separators=(",", ":"), allow_nan=False) + "\n"


def save(ck: Checkpoint, path) -> None:
    Path(path).write_text(dumps(ck))


def from_document(doc: dict) -> Checkpoint:
    try:
        header, tensors = doc["header"], doc["tensors"]
    except (KeyError, TypeError):
        raise CheckpointError("checkpoint must hold 'header' and 'tensors'") from None
    if header.get("format") != FORMAT:
        raise CheckpointError(f"not an {FORMAT} checkpoint (format={header.get('format')!r})")
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}, "
                              f"this build reads version {VERSION}")
    if header.get("role") not in ROLES:
        raise CheckpointError(f"unknown role {header.get('role')!r}")
    desc = header["net"]
    sizes, acts = desc["sizes"], desc["acts"]
    arrays = {}
    for t in tensors:
        data = np.array(t["data"], dtype=np.float64)
        shape = tuple(t["shape"])
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"tensor {t['name']}: {data.size} values for shape {shape}")
        arrays[t["name"]] = data.reshape(shape)
    n_layers = len(sizes) - 1
    try:
        weights = [arrays[f"W{i}"] for i in range(n_layers)]
        biases = [arrays[f"b{i}"] for i in range(n_layers)]
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc.args[0]}") from None
    try:
        mlp = Mlp(weights, biases, list(acts))
    except ValidationError as exc:
        raise CheckpointError(str(exc)) from None
    if mlp.sizes != list(sizes):
        raise CheckpointError(f"tensor shapes give sizes {mlp.sizes}, header says {sizes}")
    schedule = NoiseSchedule.from_dict(header["schedule"])
    if schedule.regime != header.get("regime"):
        raise CheckpointError("header regime disagrees with its schedule")
    net = EpsNet(mlp, schedule, desc["action_dim"], desc["obs_dim"], desc["temb_dim"])
    return Checkpoint(header["role"], net, Normalizer.from_dict(header["normalizer"]),
                      header.get("seed", 0), header.get("step", 0), header.get("extra", {}))


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    return from_document(doc)
