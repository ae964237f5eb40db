"""Canonical ``key=value`` configuration text.

One key per line, keys sorted, values rendered deterministically so that the
same configuration always produces the same bytes (checkpoints embed it).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

from .attention import LSSSAConfig
from .neuron import LIFParams
from .pooling import SPoolingConfig
from .tensor import ConfigError


class UnknownKeyError(ConfigError):
    pass


def render_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(render_value(x) for x in v)
    return str(v)


def parse_value(text: str, like: Any) -> Any:
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from None
    return text


def dumps(kv: dict[str, Any]) -> str:
    return "".join(f"{k}={render_value(kv[k])}\n" for k in sorted(kv))


def loads(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def _flatten(prefix: str, obj) -> dict[str, Any]:
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj)}


def _apply(prefix: str, obj, kv: dict[str, str], used: set[str], skip=()):
    changes = {}
    for f in fields(obj):
        key = f"{prefix}.{f.name}"
        if key in kv and f.name not in skip:
            changes[f.name] = parse_value(kv[key], getattr(obj, f.name))
            used.add(key)
    return dataclasses.replace(obj, **changes) if changes else obj


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    height: int = 16
    width: int = 16
    embed_dim: int = 64
    num_blocks: int = 2
    num_classes: int = 4
    timesteps: int = 2
    num_pool_stages: int = 2
    mlp_ratio: float = 4.0
    pooling: str = "spool"  # or "max"
    head_average: str = "features"  # or "logits"
    seed: int = 0
    spool: SPoolingConfig = field(default_factory=SPoolingConfig)
    attn: LSSSAConfig = field(default_factory=lambda: LSSSAConfig(embed_dim=64, groups=2, dilation_rates=(1, 2), heads=2))
    lif: LIFParams = field(default_factory=LIFParams)

    def __post_init__(self):
        if self.attn.embed_dim != self.embed_dim:
            raise ConfigError(f"attention width {self.attn.embed_dim} != embed_dim {self.embed_dim}")
        if self.embed_dim % 8:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by 8")
        if not 0 <= self.num_pool_stages <= 4:
            raise ConfigError(f"num_pool_stages must lie in 0..4, got {self.num_pool_stages}")
        f = 2**self.num_pool_stages
        if self.height % f or self.width % f:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by 2^{self.num_pool_stages}")
        for name in ("in_channels", "num_blocks", "num_classes", "timesteps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.mlp_ratio <= 0 or int(self.embed_dim * self.mlp_ratio) < 1:
            raise ConfigError(f"invalid mlp_ratio {self.mlp_ratio}")
        if self.pooling not in ("spool", "max"):
            raise ConfigError(f"pooling must be 'spool' or 'max', got {self.pooling!r}")
        if self.head_average not in ("features", "logits"):
            raise ConfigError(f"head_average must be 'features' or 'logits', got {self.head_average!r}")

    @property
    def token_grid(self) -> tuple[int, int]:
        f = 2**self.num_pool_stages
        return self.height // f, self.width // f

    def to_kv(self) -> dict[str, Any]:
        kv = {f"model.{f.name}": getattr(self, f.name) for f in fields(self) if f.name not in ("spool", "attn", "lif")}
        kv.update(_flatten("spool", self.spool))
        attn = _flatten("attn", self.attn)
        del attn["attn.embed_dim"]
        kv.update(attn)
        kv.update(_flatten("lif", self.lif))
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str], base: "ModelConfig | None" = None, used: set | None = None) -> "ModelConfig":
        base = base or cls()
        used = set() if used is None else used
        top = {}
        for f in fields(cls):
            if f.name in ("spool", "attn", "lif"):
                continue
            key = f"model.{f.name}"
            if key in kv:
                top[f.name] = parse_value(kv[key], getattr(base, f.name))
                used.add(key)
        dim = top.get("embed_dim", base.embed_dim)
        spool = _apply("spool", base.spool, kv, used)
        attn = _apply("attn", dataclasses.replace(base.attn, embed_dim=dim), kv, used, skip=("embed_dim",))
        lif = _apply("lif", base.lif, kv, used)
        return dataclasses.replace(base, spool=spool, attn=attn, lif=lif, **top)

    def dumps(self) -> str:
        return dumps(self.to_kv())


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.005
    min_lr: float = 1e-5
    weight_decay: float = 0.06
    epochs: int = 50
    warmup: int = 2
    batch_size: int = 32


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    threads: int = 1
    train_data: str = ""
    val_data: str = ""
    out_dir: str = "runs/toy"

    def to_kv(self) -> dict[str, Any]:
        kv = self.model.to_kv()
        kv.update(_flatten("optim", self.optim))
        for name in ("seed", "threads", "train_data", "val_data", "out_dir"):
            kv[f"run.{name}"] = getattr(self, name)
        return kv

    def dumps(self) -> str:
        return dumps(self.to_kv())

    @classmethod
    def from_kv(cls, kv: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        used: set[str] = set()
        model = ModelConfig.from_kv(kv, base.model, used)
        optim = _apply("optim", base.optim, kv, used)
        top = {}
        for name in ("seed", "threads", "train_data", "val_data", "out_dir"):
            key = f"run.{name}"
            if key in kv:
                top[name] = parse_value(kv[key], getattr(base, name))
                used.add(key)
        unknown = sorted(set(kv) - used)
        if unknown:
            raise UnknownKeyError(f"unknown config keys: {', '.join(unknown)}")
        return dataclasses.replace(base, model=model, optim=optim, **top)

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_kv(loads(text), base)


def parse_overrides(items: list[str]) -> dict[str, str]:
    return loads("\n".join(items))
