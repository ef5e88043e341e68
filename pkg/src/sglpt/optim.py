"""Parameter containers, Adam, EMA target updates and the checkpoint format."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .autodiff import Tensor

ROLES = ("online", "target", "decoder", "online_projector", "target_projector",
         "prototypes", "classifier", "mask_token", "buffers")


class ContractViolation(RuntimeError):
    """A caller broke a documented precondition between components."""


class ParameterSet(Mapping[str, Tensor]):
    """Ordered name -> Tensor map tagged with a role."""

    def __init__(self, tensors: Mapping[str, Tensor] | None = None, role: str = "online"):
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        self.role = role
        self._t: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._t[name] = t

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._t.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._t.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self._t[k].shape != v.shape:
                raise ContractViolation(f"{k}: shape {v.shape} != {self._t[k].shape}")
            self._t[k].data[...] = v

    def congruent(self, other: "ParameterSet") -> bool:
        return self.shapes() == other.shapes()


@dataclass
class EMAConfig:
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"EMA momentum must lie in [0, 1), got {self.momentum}")


def ema_update(target: Mapping[str, Tensor], online: Mapping[str, Tensor], momentum: float):
    """In place: target <- momentum * target + (1 - momentum) * online."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1), got {momentum}")
    if list(target) != list(online):
        raise ContractViolation("EMA target and online sets hold different names")
    for name, t in target.items():
        o = online[name]
        if t.shape != o.shape:
            raise ContractViolation(f"EMA shape mismatch on {name}: {t.shape} vs {o.shape}")
        t.data *= momentum
        t.data += (1.0 - momentum) * o.data
    return target


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        adam_step(params, grads, self.lr, self.beta1, self.beta2, self.eps, self.t,
                  self.m, self.v, self.weight_decay)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, t: int = 1,
              m: dict | None = None, v: dict | None = None, weight_decay: float = 0.0):
    """One bias-corrected Adam update applied in place.

    ``m`` and ``v`` hold the moment estimates across calls; pass fresh dicts
    (or ``None``) for a single isolated step.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m = {} if m is None else m
    v = {} if v is None else v
    for name, p in params.items():
        if name not in grads:
            raise ContractViolation(f"missing gradient for {name}")
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if weight_decay:
            g = g + weight_decay * p.data
        mt = m.get(name)
        if mt is None:
            mt = m[name] = np.zeros_like(p.data)
            v[name] = np.zeros_like(p.data)
        vt = v[name]
        mt *= beta1
        mt += (1 - beta1) * g
        vt *= beta2
        vt += (1 - beta2) * g * g
        m_hat = mt / (1 - beta1 ** t)
        v_hat = vt / (1 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


# -- checkpoint container --------------------------------------------------
#
# layout: b"SGLCKPT1" | u64 header length | header JSON (utf-8) | payloads
# header = {"meta": {...}, "tensors": [{"name", "shape", "dtype", "offset", "nbytes"}]}
# payloads are little-endian, C order, offsets relative to the payload start.

MAGIC = b"SGLCKPT1"


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.array(tensors[name], order="C", copy=True)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        out[e["name"]] = arr.reshape(e["shape"]).astype(arr.dtype.newbyteorder("="))
    return out, header["meta"]


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.array(tensors[name], order="C", copy=True)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
