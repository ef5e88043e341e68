"""Run configuration: dataclasses, per-dataset presets and a sectioned key=value file format."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .graph import AugmentSpec


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class ModelConfig:
    hidden: int = 32
    num_layers: int = 5
    activation: str = "prelu"
    norm: str = "bn"
    readout: str = "mean"


@dataclass
class LocalLossConfig:
    gamma: float = 2.0
    masking_rate: float = 0.75
    replace_rate: float = 0.1

    def __post_init__(self):
        if self.gamma < 1:
            raise ConfigError(f"gamma must be >= 1, got {self.gamma}", "local.gamma")


@dataclass
class GlobalLossConfig:
    temperature: float = 2.0
    queue_size: int = 1024

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive", "global.temperature")
        if self.queue_size < 0:
            raise ConfigError("queue size must be nonnegative", "global.queue_size")


@dataclass
class PretrainConfig:
    lambda_pre: float = 0.5
    batch_size: int = 64
    epochs: int = 22
    lr: float = 5e-4
    weight_decay: float = 0.0
    scheduler: bool = False
    momentum: float = 0.999
    local: LocalLossConfig = field(default_factory=LocalLossConfig)
    global_: GlobalLossConfig = field(default_factory=GlobalLossConfig)
    aug1: AugmentSpec = field(default_factory=AugmentSpec)
    aug2: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.lambda_pre <= 1:
            raise ConfigError("lambda_pre must lie in [0, 1]", "pretrain.lambda_pre")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1", "pretrain.batch_size")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)", "pretrain.momentum")


@dataclass
class PromptConfig:
    lambda_prompt: float = 0.1
    masking_rate: float = 0.1
    replace_rate: float = 0.0
    gamma: float = 2.0
    temperature: float = 2.0
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    mode: str = "full"
    fresh_head: bool = False
    class_scaled_sums: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.lambda_prompt <= 1:
            raise ConfigError("lambda_prompt must lie in [0, 1]", "prompt.lambda_prompt")
        if not 0 <= self.masking_rate <= 1:
            raise ConfigError("masking rate must lie in [0, 1]", "prompt.masking_rate")
        if self.mode not in ("full", "frozen"):
            raise ConfigError(f"mode must be full or frozen, got {self.mode!r}", "prompt.mode")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive", "prompt.temperature")


@dataclass
class EvalConfig:
    protocols: tuple[str, ...] = ("unsupervised-probe",)
    folds: int = 10
    runs: int = 5
    probe_epochs: int = 300
    probe_lr: float = 0.01
    probe_weight_decay: float = 1e-4
    label_rate: float = 0.1
    shots: int = 1
    episodes: int = 20
    finetune_epochs: int = 50
    finetune_lr: float = 1e-3
    seed: int = 0


@dataclass
class RunConfig:
    dataset: str = "MUTAG"
    root: str = "data"
    out: str = "runs"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that affects results; input/output locations are left out."""
        d = self.to_dict()
        d.pop("out"), d.pop("root")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- presets ------------------------------------------------------------------
# Pre-training columns: (hidden, layers, act, norm, gamma, mask, replace, Q, momentum,
# tau, feat_mask1, feat_mask2, drop_edge1, drop_edge2, batch, epochs, lr, wd, scheduler, lambda_pre)

_PRETRAIN_TABLE = {
    "proteins": (512, 3, "prelu", "bn", 1, 0.5, 0.0, 1024, 0.995, 2, 0.4, 0.1, 0.0, 0.1, 32, 100, 0.00015, 0.0, False, 0.5),
    "dd": (512, 2, "prelu", "bn", 1, 0.1, 0.1, 1024, 0.999, 2, 0.1, 0.2, 0.0, 0.0, 32, 80, 0.001, 0.0, True, 0.5),
    "nci1": (512, 2, "prelu", "bn", 2, 0.25, 0.1, 1024, 0.999, 2, 0.0, 0.0, 0.0, 0.0, 16, 300, 0.001, 0.0, True, 0.9),
    "mutag": (32, 5, "prelu", "bn", 2, 0.75, 0.1, 1024, 0.999, 2, 0.2, 0.5, 0.0, 0.3, 64, 22, 0.0005, 0.0, False, 0.5),
    # the printed IMDB-B masking rate is "20"; read as 0.2
    "imdb-binary": (512, 2, "prelu", "bn", 1, 0.2, 0.001, 1024, 0.999, 2, 0.2, 0.5, 0.1, 0.2, 32, 60, 0.00015, 0.0, False, 0.5),
    "imdb-multi": (512, 3, "prelu", "bn", 1, 0.5, 0.0, 1024, 0.995, 2, 0.0, 0.2, 0.0, 0.4, 32, 50, 0.00015, 0.0, False, 0.5),
    "collab": (256, 2, "relu", "bn", 1, 0.75, 0.0, 1024, 0.999, 2, 0.2, 0.3, 0.0, 0.2, 32, 20, 0.00015, 0.0, True, 0.9),
    "reddit-binary": (512, 2, "prelu", "ln", 1, 0.75, 0.1, 1024, 0.999, 0.08, 0.3, 0.3, 0.0, 0.0, 8, 120, 0.00015, 0.0, False, 0.5),
    "nci-h23": (128, 3, "prelu", "bn", 2, 0.25, 0.1, 1024, 0.999, 2, 0.0, 0.2, 0.0, 0.0, 16, 100, 0.0001, 5e-4, True, 0.5),
    "molt-4": (128, 3, "prelu", "bn", 2, 0.25, 0.1, 1024, 0.999, 2, 0.1, 0.1, 0.0, 0.0, 32, 100, 0.0001, 5e-4, True, 0.5),
    "p388": (512, 2, "prelu", "bn", 2, 0.25, 0.1, 1024, 0.999, 2, 0.2, 0.2, 0.0, 0.0, 16, 100, 0.0001, 5e-4, True, 0.5),
    "reddit-multi-12k": (32, 5, "prelu", "bn", 2, 0.75, 0.1, 1024, 0.999, 2, 0.2, 0.4, 0.0, 0.4, 32, 100, 0.00015, 0.0, True, 0.5),
}

# prompt tuning: (mask rate, epochs, lr, batch)
_PROMPT_TABLE = {
    "proteins": (0.1, 30, 0.01, 32),
    "dd": (0.1, 50, 0.0001, 32),
    "nci1": (0.1, 50, 0.001, 16),
    "mutag": (0.1, 50, 0.001, 64),
    "nci-h23": (0.1, 10, 0.001, 32),
    "molt-4": (0.1, 10, 0.01, 32),
    "p388": (0.1, 10, 0.001, 32),
    "imdb-binary": (0.1, 20, 0.001, 32),
    "imdb-multi": (0.1, 20, 0.001, 32),
}

DATASET_NAMES = {
    "proteins": "PROTEINS", "dd": "DD", "nci1": "NCI1", "mutag": "MUTAG",
    "imdb-binary": "IMDB-BINARY", "imdb-multi": "IMDB-MULTI", "collab": "COLLAB",
    "reddit-binary": "REDDIT-BINARY", "nci-h23": "NCI-H23", "molt-4": "MOLT-4",
    "p388": "P388", "reddit-multi-12k": "REDDIT-MULTI-12K",
}

# the large sets are evaluated with 5 folds, the rest with 10
_FIVE_FOLD = {"nci-h23", "molt-4", "p388", "reddit-multi-12k"}


def preset_names() -> list[str]:
    return sorted(set(_PRETRAIN_TABLE) | {f"{k}-prompt" for k in _PROMPT_TABLE})


def preset(name: str) -> RunConfig:
    """Build a RunConfig from a named preset, e.g. ``mutag`` or ``mutag-prompt``."""
    key = name.lower()
    base = key[:-len("-prompt")] if key.endswith("-prompt") else key
    if base not in _PRETRAIN_TABLE:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(preset_names())}", "preset")
    (hidden, layers, act, norm, gamma, mask, replace, q, mom, tau, fm1, fm2, de1, de2,
     bs, epochs, lr, wd, sched, lam) = _PRETRAIN_TABLE[base]
    gamma, tau = float(gamma), float(tau)
    cfg = RunConfig(dataset=DATASET_NAMES[base])
    cfg.model = ModelConfig(hidden=hidden, num_layers=layers, activation=act, norm=norm)
    cfg.pretrain = PretrainConfig(
        lambda_pre=lam, batch_size=bs, epochs=epochs, lr=lr, weight_decay=wd, scheduler=sched,
        momentum=mom, local=LocalLossConfig(gamma, mask, replace),
        global_=GlobalLossConfig(tau, q), aug1=AugmentSpec(fm1, de1), aug2=AugmentSpec(fm2, de2))
    p_mask, p_epochs, p_lr, p_bs = _PROMPT_TABLE.get(base, (0.1, 50, 0.001, bs))
    cfg.prompt = PromptConfig(masking_rate=p_mask, epochs=p_epochs, lr=p_lr, batch_size=p_bs,
                              gamma=gamma, temperature=tau)
    cfg.eval = EvalConfig(folds=5 if base in _FIVE_FOLD else 10)
    return cfg


# -- file format ------------------------------------------------------------------
# [run] / [model] / [pretrain] / [pretrain.local] / [pretrain.global] / [pretrain.aug1] /
# [pretrain.aug2] / [prompt] / [eval]; one ``key = value`` per line.

_SECTIONS = {
    "model": ("model",),
    "pretrain": ("pretrain",),
    "pretrain.local": ("pretrain", "local"),
    "pretrain.global": ("pretrain", "global_"),
    "pretrain.aug1": ("pretrain", "aug1"),
    "pretrain.aug2": ("pretrain", "aug2"),
    "prompt": ("prompt",),
    "eval": ("eval",),
}


def _coerce(raw: str, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(current).__name__}", key) from None


def _scalar_fields(obj) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)
            if not dataclasses.is_dataclass(getattr(obj, f.name))}


def _rebuild(obj, updates: dict[str, Any], section: str):
    try:
        return dataclasses.replace(obj, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), section) from None


def apply_overrides(cfg: RunConfig, parser: configparser.ConfigParser) -> RunConfig:
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            for k, v in items.items():
                if k == "preset":
                    continue
                if k not in ("dataset", "root", "out", "seed"):
                    raise ConfigError("unknown key", f"run.{k}")
                setattr(cfg, k, _coerce(v, getattr(cfg, k), f"run.{k}"))
            continue
        if section not in _SECTIONS:
            raise ConfigError("unknown section", section)
        path = _SECTIONS[section]
        parent = cfg
        for attr in path[:-1]:
            parent = getattr(parent, attr)
        target = getattr(parent, path[-1])
        known = _scalar_fields(target)
        updates = {}
        for k, v in items.items():
            if k not in known:
                raise ConfigError("unknown key", f"{section}.{k}")
            updates[k] = _coerce(v, known[k], f"{section}.{k}")
        setattr(parent, path[-1], _rebuild(target, updates, section))
    return cfg


def load_config(path: str | Path | None = None, preset_name: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}", "config")
        try:
            parser.read_string(p.read_text())
        except configparser.Error as e:
            raise ConfigError(str(e).splitlines()[0], "config") from None
        if preset_name is None and parser.has_option("run", "preset"):
            preset_name = parser.get("run", "preset")
    cfg = preset(preset_name) if preset_name else RunConfig()
    return apply_overrides(cfg, parser)


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {k: str(getattr(cfg, k)) for k in ("dataset", "root", "out", "seed")}
    for section, path in _SECTIONS.items():
        obj = cfg
        for attr in path:
            obj = getattr(obj, attr)
        parser[section] = {k: (",".join(v) if isinstance(v, tuple) else str(v))
                           for k, v in _scalar_fields(obj).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
