"""Local structure-aware spiking self-attention.

Binary Q/K/V maps are split into channel groups. Each group runs two
branches on the same slices:

* spatial dilated attention: every query attends to keys/values sampled
  along its row and its column at spacing ``r_m`` (zero outside the map),
  plus a depthwise-conv complement on the values;
* channel recalibration attention: linear multi-head attention over the
  flattened spatial tokens, evaluated as ``Q (K^T V)``.

The branches are weighted by learnable per-group scalars, concatenated,
spiked, and projected back to ``D`` channels. Neither branch uses softmax.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .neuron import LIFParams
from .nn import BatchNorm2d, Conv2d, LIFNode, Module, ModuleList, Scale
from .tensor import ConfigError, ShapeError, Tensor

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True)
class LSSSAConfig:
    embed_dim: int = 384
    groups: int = 3
    dilation_rates: tuple = (1, 2, 3)
    window_h: int = 3
    window_v: int = 3
    heads: int = 8
    dwc_kernel: int = 3
    alpha_init: float = 0.5
    beta_init: float = 0.5
    # ablation switches
    use_sda: bool = True
    use_cra: bool = True
    use_scdf: bool = True
    use_dwc: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.groups < 1 or self.embed_dim % self.groups:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by groups {self.groups}")
        if self.heads < 1 or self.group_dim % self.heads:
            raise ConfigError(f"group width {self.group_dim} not divisible by heads {self.heads}")
        if len(self.dilation_rates) != self.groups:
            raise ConfigError(f"{len(self.dilation_rates)} dilation rates for {self.groups} groups")
        if any(r < 1 for r in self.dilation_rates):
            raise ConfigError(f"dilation rates must be positive: {self.dilation_rates}")
        for name in ("window_h", "window_v", "dwc_kernel"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {v}")
        if max(self.dilation_rates) > 3:
            warnings.warn(
                f"dilation rates above 3 sample very sparsely on small maps: {self.dilation_rates}",
                stacklevel=3,
            )

    @property
    def group_dim(self) -> int:
        return self.embed_dim // self.groups

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.group_dim)


def window_offsets(window: int) -> list[int]:
    half = window // 2
    return list(range(-half, half + 1))


def dilated_sample(m: Tensor, axis: str, rate: int, window: int) -> Tensor:
    """Gather ``m[..., i, j + o*rate]`` (horizontal) or ``m[..., i + o*rate, j]`` (vertical).

    Output gains a trailing axis of length ``window``; out-of-map reads are 0.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"window must be a positive odd integer, got {window}")
    if rate < 1:
        raise ConfigError(f"rate must be >= 1, got {rate}")
    if axis not in (HORIZONTAL, VERTICAL):
        raise ConfigError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}")
    ax = m.ndim - 1 if axis == HORIZONTAL else m.ndim - 2
    length = m.shape[ax]
    half = window // 2
    pad = half * rate
    md = m.data
    widths = [(0, 0)] * md.ndim
    widths[ax] = (pad, pad)
    padded = np.pad(md, widths)
    idx = [slice(None)] * md.ndim
    parts = []
    for k in range(window):
        idx[ax] = slice(k * rate, k * rate + length)
        parts.append(padded[tuple(idx)])
    out = np.stack(parts, axis=-1)

    def bw(g):
        gp = np.zeros(padded.shape, dtype=md.dtype)
        for k in range(window):
            idx[ax] = slice(k * rate, k * rate + length)
            gp[tuple(idx)] += g[..., k]
        idx[ax] = slice(pad, pad + length)
        return (gp[tuple(idx)],)

    return tt.make_op(out, (m,), bw, "dilated_sample")


def sda_attention(q: Tensor, k: Tensor, v: Tensor, rate: int, window_h: int, window_v: int, scale: float) -> Tensor:
    """Directional dilated attention for one group; q, k, v are [N, d, H, W]."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"q/k/v must share a [N,d,H,W] shape: {q.shape}, {k.shape}, {v.shape}")
    out = None
    for axis, window in ((HORIZONTAL, window_h), (VERTICAL, window_v)):
        kg = dilated_sample(k, axis, rate, window)
        vg = dilated_sample(v, axis, rate, window)
        scores = tt.einsum("ndhw,ndhwk->nhwk", q, kg)
        branch = tt.mul(tt.einsum("nhwk,ndhwk->ndhw", scores, vg), scale)
        out = branch if out is None else tt.add(out, branch)
    return out


def cra_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, scale: float) -> Tensor:
    """Multi-head linear attention over flattened positions; q, k, v are [N, d, H, W]."""
    if not (q.shape == k.shape == v.shape) or q.ndim != 4:
        raise ShapeError(f"q/k/v must share a [N,d,H,W] shape: {q.shape}, {k.shape}, {v.shape}")
    n, d, h, w = q.shape
    if d % heads:
        raise ConfigError(f"{d} channels not divisible by {heads} heads")
    shape = (n, heads, d // heads, h * w)
    qh, kh, vh = q.reshape(shape), k.reshape(shape), v.reshape(shape)
    kv = tt.einsum("nhcp,nhep->nhce", kh, vh)
    out = tt.einsum("nhcp,nhce->nhep", qh, kv)
    return tt.mul(out, scale).reshape(n, d, h, w)


def global_ssa_reference(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Global spiking self-attention ``(Q K^T) V * scale`` over all positions.

    Quadratic in the number of positions; kept as the complexity baseline.
    """
    n, d, h, w = q.shape
    qf, kf, vf = q.reshape(n, d, h * w), k.reshape(n, d, h * w), v.reshape(n, d, h * w)
    attn = tt.einsum("ncp,ncq->npq", qf, kf)
    out = tt.einsum("npq,ncq->ncp", attn, vf)
    return tt.mul(out, scale).reshape(n, d, h, w)


class ConvBN(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, padding: int = 0, groups: int = 1):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng, padding=padding, groups=groups)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class LSSSA(Module):
    """The attention sub-block. Input and output are [T, B, D, H, W]."""

    def __init__(self, cfg: LSSSAConfig, rng: np.random.Generator, lif: LIFParams | None = None, entry_spike: bool = True):
        super().__init__()
        lif = lif or LIFParams()
        self.cfg = cfg
        dim, d = cfg.embed_dim, cfg.group_dim
        self.entry_lif = LIFNode(lif) if entry_spike else None
        self.q = ConvBN(dim, dim, 1, rng)
        self.k = ConvBN(dim, dim, 1, rng)
        self.v = ConvBN(dim, dim, 1, rng)
        self.q_lif, self.k_lif, self.v_lif = LIFNode(lif), LIFNode(lif), LIFNode(lif)
        if cfg.use_dwc and cfg.use_sda:
            pad = cfg.dwc_kernel // 2
            self.dwc = ModuleList(ConvBN(d, d, cfg.dwc_kernel, rng, padding=pad, groups=d) for _ in range(cfg.groups))
        else:
            self.dwc = None
        if cfg.use_scdf:
            self.alpha = ModuleList(Scale(cfg.alpha_init) for _ in range(cfg.groups))
            self.beta = ModuleList(Scale(cfg.beta_init) for _ in range(cfg.groups))
            fused = 2 * dim
        else:
            self.alpha = self.beta = None
            fused = dim
        self.att_lif = LIFNode(lif)
        self.proj = ConvBN(fused, dim, 1, rng)

    # -- pieces -------------------------------------------------------------
    def qkv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if x.shape[2] != self.cfg.embed_dim:
            raise ShapeError(f"expected {self.cfg.embed_dim} channels, got {x.shape[2]}")
        return self.q_lif(self.q(x)), self.k_lif(self.k(x)), self.v_lif(self.v(x))

    def group_branches(self, q: Tensor, k: Tensor, v: Tensor, m: int) -> tuple[Tensor | None, Tensor | None]:
        """Spatial (s^m) and channel (c^m) outputs for group m on folded [N, D, H, W] maps."""
        cfg = self.cfg
        qm, km, vm = (tt.slice_channels(t, m, cfg.groups) for t in (q, k, v))
        s = c = None
        if cfg.use_sda:
            with tt.scope(f"sda{m}"):
                s = sda_attention(qm, km, vm, cfg.dilation_rates[m], cfg.window_h, cfg.window_v, cfg.scale)
            if self.dwc is not None:
                s = tt.add(s, self.dwc[m](vm))
        if cfg.use_cra:
            with tt.scope(f"cra{m}"):
                c = cra_attention(qm, km, vm, cfg.heads, cfg.scale)
        return s, c

    def fuse(self, branches: list[tuple[Tensor | None, Tensor | None]], like: Tensor) -> Tensor:
        """Group-wise weighting and concatenation of the branch outputs (folded layout)."""
        cfg = self.cfg
        n, _, h, w = like.shape
        zeros = Tensor(np.zeros((n, cfg.group_dim, h, w), dtype=like.dtype))
        parts = []
        for m, (s, c) in enumerate(branches):
            if cfg.use_scdf:
                a = self.alpha[m](s) if s is not None else zeros
                b = self.beta[m](c) if c is not None else zeros
                parts.extend((a, b))
            else:
                if s is None and c is None:
                    parts.append(zeros)
                elif s is None or c is None:
                    parts.append(s if c is None else c)
                else:
                    parts.append(tt.add(s, c))
        return tt.concat_channels(parts)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise ShapeError(f"LSSSA expects [T,B,D,H,W], got {x.shape}")
        t, b = x.shape[:2]
        if self.entry_lif is not None:
            x = self.entry_lif(x)
        q, k, v = self.qkv(x)
        fold = (t * b, *q.shape[2:])
        qf, kf, vf = q.reshape(fold), k.reshape(fold), v.reshape(fold)
        branches = [self.group_branches(qf, kf, vf, m) for m in range(self.cfg.groups)]
        att = self.fuse(branches, qf)
        att = att.reshape(t, b, *att.shape[1:])
        return self.proj(self.att_lif(att))
