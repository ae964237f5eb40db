"""Max, average and spiking-response pooling.

Spiking-response pooling keeps the window maximum and adds the window mean,
gated by ``sigmoid(theta)``, wherever that mean reaches the threshold
``lam``::

    avg_kept = avg if avg >= lam else 0
    out = max + sigmoid(theta) * avg_kept

The keep/drop mask is a constant in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .nn import Module, _fold, _unfold, parameter
from .tensor import ConfigError, ShapeError, Tensor

max_pool2d = tt.max_pool2d
avg_pool2d = tt.avg_pool2d


@dataclass(frozen=True)
class SPoolingConfig:
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    lam: float = 0.3
    theta_init: float = 0.0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"kernel and stride must be >= 1 (got k={self.kernel}, s={self.stride})")
        if not 0 <= self.padding <= self.kernel - 1:
            raise ConfigError(f"padding must lie in [0, k-1], got {self.padding} for k={self.kernel}")
        if not 0.0 <= self.lam <= 1.5:
            raise ConfigError(f"lam must lie in [0, 1.5], got {self.lam}")


def pool_output_shape(h: int, w: int, k: int, s: int, p: int) -> tuple[int, int]:
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"window {k} larger than padded input {h}x{w} (padding {p})")
    return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def spool(x: Tensor, theta: Tensor, cfg: SPoolingConfig) -> Tensor:
    """Spiking-response pooling of x [N, C, H, W]."""
    xmax = tt.max_pool2d(x, cfg.kernel, cfg.stride, cfg.padding)
    xavg = tt.avg_pool2d(x, cfg.kernel, cfg.stride, cfg.padding)
    keep = Tensor((xavg.data >= cfg.lam).astype(xavg.dtype))
    gated = tt.mul(tt.sigmoid(theta), tt.mul(xavg, keep))
    return tt.add(xmax, gated)


class SPooling(Module):
    def __init__(self, cfg: SPoolingConfig | None = None):
        super().__init__()
        self.cfg = cfg or SPoolingConfig()
        self.theta = parameter(np.asarray(self.cfg.theta_init))

    def forward(self, x: Tensor) -> Tensor:
        x4, tb = _fold(x)
        return _unfold(spool(x4, self.theta, self.cfg), tb)


class MaxPool(Module):
    """Plain max pooling, for baselines that swap out the spiking-response variant."""

    def __init__(self, cfg: SPoolingConfig | None = None):
        super().__init__()
        self.cfg = cfg or SPoolingConfig()

    def forward(self, x: Tensor) -> Tensor:
        x4, tb = _fold(x)
        return _unfold(tt.max_pool2d(x4, self.cfg.kernel, self.cfg.stride, self.cfg.padding), tb)
