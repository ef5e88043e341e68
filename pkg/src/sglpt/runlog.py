"""Model checkpoints and line-delimited metric logs."""
from __future__ import annotations

import json
import os
import time
from pathlib import Path
from typing import Iterable

from .gnn import ModelState
from .optim import ContractViolation, load_checkpoint, save_checkpoint

MODEL_KEYS = ("in_dim", "hidden", "num_layers", "activation", "norm", "readout_kind")


def save_model(path: str | Path, model: ModelState, meta: dict | None = None) -> None:
    info = {k: getattr(model, k) for k in MODEL_KEYS}
    save_checkpoint(path, model.state_dict(), {"model": info, **(meta or {})})


def load_model(path: str | Path) -> tuple[ModelState, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    tensors, meta = load_checkpoint(path)
    info = meta["model"]
    model = ModelState(info["in_dim"], info["hidden"], info["num_layers"], seed=0,
                       activation=info["activation"], norm=info["norm"], readout=info["readout_kind"])
    model.load_state_dict(tensors)
    return model, meta


def check_compatible(model: ModelState, feature_dim: int) -> None:
    if model.in_dim != feature_dim:
        raise ContractViolation(
            f"checkpoint expects feature dim {model.in_dim}, dataset provides {feature_dim}")


def timestamp() -> float:
    # SOURCE_DATE_EPOCH pins timestamps so repeated runs write identical logs
    fixed = os.environ.get("SOURCE_DATE_EPOCH")
    return float(fixed) if fixed is not None else round(time.time(), 3)


class MetricLog:
    """Append-only JSON-lines log: one {stage, epoch, metric, value, timestamp, config_hash} per line."""

    def __init__(self, path: str | Path, stage: str, config_hash: str):
        self.path = Path(path)
        self.stage, self.config_hash = stage, config_hash
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def write(self, epoch: int, metrics: dict[str, float]) -> None:
        ts = timestamp()
        with open(self.path, "a") as fh:
            for name in sorted(metrics):
                fh.write(json.dumps({"stage": self.stage, "epoch": epoch, "metric": name,
                                     "value": float(metrics[name]), "timestamp": ts,
                                     "config_hash": self.config_hash}, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
