"""Training configuration and its ``key = value`` file format."""
from __future__ import annotations

import ast
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path


@dataclass
class PretrainConfig:
    epochs: int = 900
    lr: float = 0.001
    milestones: tuple = (400, 600, 800)
    factors: tuple = (0.1, 0.1, 0.1)
    warmup: int = 100
    batch_size: int = 4


@dataclass
class SSLConfig:
    epochs: int = 1000
    lr: float = 0.002
    milestones: tuple = (400, 600, 800, 900)
    factors: tuple = (0.3, 0.3, 0.1, 0.1)
    labeled_per_batch: int = 2
    unlabeled_per_batch: int = 4


@dataclass
class FilterConfig:
    objectness: float = 0.9
    cls: float = 0.9
    iou: float = 0.25


@dataclass
class TrainConfig:
    """Every tunable of both training stages.

    ``use_augmentor`` switches the learned augmentor off entirely (plain
    detector pre-training); ``aug_labeled``/``aug_unlabeled`` and
    ``objectness_rho`` are the ablation axes of the SSL stage.
    """

    lam: float = 0.1
    m: int = 3
    s: int = 1024
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    ema_decay: float = 0.999
    filter: FilterConfig = field(default_factory=FilterConfig)
    top_k: int = 6
    pick: int = 3
    seed: int = 0
    use_augmentor: bool = True
    aug_labeled: bool = True
    aug_unlabeled: bool = True
    objectness_rho: bool = True
    nms_iou: float = 0.25
    nms_objectness: float = 0.05
    eval_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.pick > self.top_k:
            raise ValueError(f"pick ({self.pick}) must not exceed top_k ({self.top_k})")
        for name in ("objectness", "cls", "iou"):
            v = getattr(self.filter, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"filter.{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.pretrain.epochs <= self.pretrain.warmup:
            raise ValueError("pretrain.epochs must exceed pretrain.warmup")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        for sec in (self.pretrain, self.ssl):
            if len(sec.milestones) != len(sec.factors):
                raise ValueError("milestones and factors must have equal length")
        if self.m < 1 or self.s < 1:
            raise ValueError("m and s must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in flatten(self).items())


ALIASES = {"lambda": "lam", "M": "m", "S": "s"}


def flatten(cfg, prefix="") -> dict:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if is_dataclass(value):
            out.update(flatten(value, key + "."))
        else:
            out[key] = value
    return out


def _coerce(raw: str, current, key: str):
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        if raw.lower() in ("true", "false"):
            value = raw.lower() == "true"
        else:
            raise ValueError(f"{key}: cannot parse value {raw!r}") from None
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{key}: expected true/false, got {raw!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{key}: expected an integer, got {raw!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key}: expected a number, got {raw!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            value = (value,)
        return tuple(value)
    return value


def set_value(cfg: TrainConfig, key: str, raw: str) -> TrainConfig:
    parts = key.split(".")
    parts[0] = ALIASES.get(parts[0], parts[0])
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p) or not is_dataclass(getattr(target, p)):
            raise ValueError(f"unknown config key {key!r}")
        target = getattr(target, p)
    name = parts[-1]
    if not hasattr(target, name) or is_dataclass(getattr(target, name)):
        raise ValueError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(raw, getattr(target, name), key))
    return cfg


def parse_config(text: str, base: TrainConfig | None = None, source="<config>") -> TrainConfig:
    """Read ``key = value`` lines (``#`` comments allowed) over ``base``."""
    cfg = base if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            set_value(cfg, key, raw)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return cfg.validate()


def load_config(path=None, env=None) -> TrainConfig:
    """Config from file (defaults when ``path`` is None); ``OPA_SEED`` overrides the seed."""
    cfg = TrainConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = parse_config(path.read_text(), cfg, str(path))
    env = os.environ if env is None else env
    if env.get("OPA_SEED"):
        cfg.seed = int(env["OPA_SEED"])
    return cfg.validate()


def scaled_schedule(cfg: TrainConfig, pretrain_epochs: int, ssl_epochs: int) -> TrainConfig:
    """Shrink both schedules keeping milestone and warm-up positions proportional."""
    def scale(sec, epochs):
        ratio = epochs / sec.epochs
        return replace(sec, epochs=epochs, milestones=tuple(max(1, round(m * ratio)) for m in sec.milestones))

    pre = scale(cfg.pretrain, pretrain_epochs)
    pre = replace(pre, warmup=max(1, round(cfg.pretrain.warmup * pretrain_epochs / cfg.pretrain.epochs)))
    return replace(cfg, pretrain=pre, ssl=scale(cfg.ssl, ssl_epochs)).validate()
