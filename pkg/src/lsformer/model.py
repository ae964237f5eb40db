"""Model assembly: spiking tokenizer, encoder blocks, pooled classification head."""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .attention import LSSSA, ConvBN, LSSSAConfig
from .config import ModelConfig, loads as loads_config, dumps as dumps_config
from .neuron import LIFParams
from .nn import Conv2d, BatchNorm2d, LIFNode, Linear, Module, ModuleList
from .pooling import MaxPool, SPooling, SPoolingConfig
from .tensor import ConfigError, ShapeError, Tensor


class TokenizerStage(Module):
    """Conv3x3 -> BN -> [pool] -> spike. Pooling acts on the real-valued BN output."""

    def __init__(self, c_in: int, c_out: int, rng, pool: Module | None, lif: LIFParams):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.bn = BatchNorm2d(c_out)
        self.pool = pool
        self.lif = LIFNode(lif)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        if self.pool is not None:
            y = self.pool(y)
        return self.lif(y)


class Tokenizer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        d = cfg.embed_dim
        widths = [d // 8, d // 4, d // 2, d]
        pooled = [i >= 4 - cfg.num_pool_stages for i in range(4)]
        stages = []
        c_in = cfg.in_channels
        for w, p in zip(widths, pooled):
            pool = None
            if p:
                pool = SPooling(cfg.spool) if cfg.pooling == "spool" else MaxPool(cfg.spool)
            stages.append(TokenizerStage(c_in, w, rng, pool, cfg.lif))
            c_in = w
        self.stages = ModuleList(stages)

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


class MLP(Module):
    """Spike -> Conv1x1 -> BN -> spike -> Conv1x1 -> BN."""

    def __init__(self, dim: int, hidden: int, rng, lif: LIFParams):
        super().__init__()
        self.lif1 = LIFNode(lif)
        self.fc1 = ConvBN(dim, hidden, 1, rng)
        self.lif2 = LIFNode(lif)
        self.fc2 = ConvBN(hidden, dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.lif2(self.fc1(self.lif1(x))))


class EncoderBlock(Module):
    """``u = attn(x) + x``, ``s = mlp(u) + u`` on real-valued membrane streams.

    The first block reads the tokenizer's spikes directly, so its attention
    skips the entry spike layer.
    """

    def __init__(self, cfg: ModelConfig, rng, first: bool):
        super().__init__()
        self.attn = LSSSA(cfg.attn, rng, cfg.lif, entry_spike=not first)
        self.mlp = MLP(cfg.embed_dim, int(cfg.embed_dim * cfg.mlp_ratio), rng, cfg.lif)

    def forward(self, x: Tensor) -> Tensor:
        u = tt.add(self.attn(x), x)
        return tt.add(self.mlp(u), u)


class LSFormer(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.tokenizer = Tokenizer(cfg, rng)
        self.blocks = ModuleList(EncoderBlock(cfg, rng, first=(i == 0)) for i in range(cfg.num_blocks))
        self.head = Linear(cfg.embed_dim, cfg.num_classes, rng)
        self.assign_scopes()

    def features(self, images: Tensor) -> Tensor:
        """Encoder output S_L for time-major input [T, B, C, H, W]."""
        cfg = self.cfg
        if images.ndim != 5 or images.shape[2:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ShapeError(
                f"expected [T,B,{cfg.in_channels},{cfg.height},{cfg.width}], got {images.shape}"
            )
        x = self.tokenizer(images)
        for block in self.blocks:
            x = block(x)
        return x

    def classify(self, feats: Tensor) -> Tensor:
        pooled = feats.mean(axis=(3, 4))  # [T, B, D]
        if self.cfg.head_average == "features":
            return self.head(pooled.mean(axis=0))
        return self.head(pooled).mean(axis=0)

    def forward(self, images: Tensor) -> Tensor:
        return self.classify(self.features(images))

    def neuron_layers(self) -> list[LIFNode]:
        return [m for _, m in self.named_modules() if isinstance(m, LIFNode)]

    def set_neuron_mode(self, mode: str) -> "LSFormer":
        for m in self.neuron_layers():
            m.params = m.params.with_mode(mode)
        self.cfg = dataclasses.replace(self.cfg, lif=self.cfg.lif.with_mode(mode))
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": p.data for k, p in self.named_parameters()}
        out.update({f"buffer/{k}": b for k, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {k: (mod, key) for k, mod, key in _buffer_slots(self)}
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(state)
        if missing:
            raise ShapeError(f"state is missing {len(missing)} entries, e.g. {sorted(missing)[0]}")
        for name, p in params.items():
            arr = state[f"param/{name}"]
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).reshape(p.shape)
        for name, (mod, key) in buffers.items():
            arr = state[f"buffer/{name}"]
            if arr.shape != mod._buffers[key].shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model shape {mod._buffers[key].shape}")
            mod._buffers[key] = arr.astype(mod._buffers[key].dtype).copy()


def _buffer_slots(model: Module):
    for prefix, mod in model.named_modules():
        for key in mod._buffers:
            name = f"{prefix}.{key}" if prefix else key
            yield name, mod, key


def count_parameters(model: Module) -> int:
    return model.num_parameters()


def parameter_breakdown(model: Module) -> dict[str, int]:
    """Parameter counts grouped by top-level part (tokenizer, each block, head)."""
    out: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        out[key] = out.get(key, 0) + p.size
    return out


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def toy_config(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def lsformer_4_384(num_classes: int = 10) -> ModelConfig:
    """Static-image preset: 32x32 RGB, four blocks of width 384, T=4."""
    return ModelConfig(
        in_channels=3,
        height=32,
        width=32,
        embed_dim=384,
        num_blocks=4,
        num_classes=num_classes,
        timesteps=4,
        num_pool_stages=2,
        attn=LSSSAConfig(embed_dim=384, groups=3, dilation_rates=(1, 2, 3), heads=8),
    )


def lsformer_2_256(num_classes: int = 10) -> ModelConfig:
    """Event-data preset: 128x128 two-polarity frames, two blocks of width 256."""
    return ModelConfig(
        in_channels=2,
        height=128,
        width=128,
        embed_dim=256,
        num_blocks=2,
        num_classes=num_classes,
        timesteps=16,
        num_pool_stages=4,
        attn=LSSSAConfig(embed_dim=256, groups=2, dilation_rates=(1, 2), heads=8),
    )


PRESETS = {"toy": toy_config, "lsformer-4-384": lsformer_4_384, "lsformer-2-256": lsformer_2_256}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LSFK"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class ConfigConflictError(ConfigError):
    pass


@dataclass
class Checkpoint:
    config: dict[str, str]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        kv = {k: v for k, v in self.config.items() if k.split(".", 1)[0] in ("model", "spool", "attn", "lif")}
        return ModelConfig.from_kv(kv)


def encode_checkpoint(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    text = config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint: {what} needs {n} bytes at offset {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != CKPT_MAGIC:
        raise CheckpointFormatError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    (n,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = loads_config(bytes(take(n, "config")).decode("utf-8"))
    except UnicodeDecodeError:
        raise CheckpointFormatError("config block is not valid UTF-8") from None
    tensors: dict[str, np.ndarray] = {}
    while pos < len(view):
        (ln,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(ln, "name")).decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 8:
            raise CheckpointFormatError(f"record {name!r}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name!r}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    return Checkpoint(config, tensors)


def save_checkpoint(model: LSFormer, path, extra: dict | None = None, optimizer_state: dict | None = None) -> None:
    kv = model.cfg.to_kv()
    kv.update(extra or {})
    tensors = dict(model.state_dict())
    for k, v in (optimizer_state or {}).items():
        tensors[f"optim/{k}"] = v
    Path(path).write_bytes(encode_checkpoint(dumps_config(kv), tensors))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def check_same_architecture(stored: ModelConfig, expect: ModelConfig) -> None:
    want, got = expect.to_kv(), stored.to_kv()
    diffs = [k for k in sorted(want) if k != "model.seed" and want[k] != got.get(k)]
    if diffs:
        detail = ", ".join(f"{k}: checkpoint={got.get(k)!r} requested={want[k]!r}" for k in diffs[:4])
        raise ConfigConflictError(f"checkpoint config conflicts with requested config ({detail})")


def load_checkpoint(path, expect: ModelConfig | None = None) -> LSFormer:
    """Rebuild a model from a checkpoint.

    ``expect`` (if given) must agree with the embedded configuration in every
    architectural field; a difference raises :class:`ConfigConflictError`.
    """
    ckpt = read_checkpoint(path)
    cfg = ckpt.model_config
    if expect is not None:
        check_same_architecture(cfg, expect)
    model = LSFormer(cfg)
    try:
        model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("optim/")})
    except ShapeError as exc:
        raise CheckpointFormatError(f"tensors do not fit the embedded config: {exc}") from None
    return model
