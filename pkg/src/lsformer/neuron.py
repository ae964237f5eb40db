"""Leaky integrate-and-fire neurons with an arctangent surrogate gradient.

Per timestep, with membrane potential ``u`` before charging::

    v = u + (I - (u - u_reset)) / tau        # charge
    s = H(v - u_th)                           # fire, H(0) = 1
    u_next = s * u_reset + (1 - s) * v        # hard reset

``spiking`` mode emits exact {0, 1} spikes and back-propagates the surrogate
``g(x) = (a/2) / (1 + (pi a x / 2)^2)``.  ``relaxed`` mode replaces the step
by its smooth primitive ``atan(pi a x / 2) / pi + 1/2`` so that the whole
network is differentiable and can be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import ConfigError, ShapeError, Tensor, _report, make_op, mul, sub, add

SPIKING = "spiking"
RELAXED = "relaxed"


@dataclass(frozen=True)
class LIFParams:
    tau: float = 2.0
    u_th: float = 1.0
    u_reset: float = 0.0
    surrogate_width: float = 2.0
    mode: str = SPIKING
    # Reset term uses the spike value without its surrogate path (spiking mode only).
    detach_reset: bool = True

    def __post_init__(self):
        if not self.tau > 1:
            raise ConfigError(f"tau must exceed 1, got {self.tau}")
        if not self.u_th > self.u_reset:
            raise ConfigError(f"u_th ({self.u_th}) must exceed u_reset ({self.u_reset})")
        if not self.surrogate_width > 0:
            raise ConfigError(f"surrogate_width must be positive, got {self.surrogate_width}")
        if self.mode not in (SPIKING, RELAXED):
            raise ConfigError(f"unknown neuron mode {self.mode!r}")

    def with_mode(self, mode: str) -> "LIFParams":
        return replace(self, mode=mode)

    @property
    def detaches_reset(self) -> bool:
        return self.detach_reset and self.mode == SPIKING


@dataclass
class LIFState:
    u: Tensor

    @classmethod
    def resting(cls, shape, p: LIFParams) -> "LIFState":
        return cls(Tensor(np.full(shape, p.u_reset)))


def surrogate_grad(x: np.ndarray, width: float) -> np.ndarray:
    return (width / 2.0) / (1.0 + (math.pi * width * x / 2.0) ** 2)


def relaxed_spike(x: np.ndarray, width: float) -> np.ndarray:
    return np.arctan(math.pi * width * x / 2.0) / math.pi + 0.5


def _fire(x: np.ndarray, width: float, mode: str) -> np.ndarray:
    if mode == SPIKING:
        return (x >= 0).astype(x.dtype)
    return relaxed_spike(x, width).astype(x.dtype, copy=False)


def heaviside_spike(x, width: float = 2.0, mode: str = SPIKING) -> Tensor:
    """Step function with a surrogate derivative (spiking) or its smooth stand-in (relaxed)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    xd = x.data
    out = _fire(xd, width, mode)
    return make_op(out, (x,), lambda g: ((g * surrogate_grad(xd, width)).astype(xd.dtype, copy=False),), "heaviside")


def lif_step(current: Tensor, state: LIFState, p: LIFParams) -> tuple[Tensor, LIFState]:
    """One charge/fire/reset update, built from taped primitives."""
    current = current if isinstance(current, Tensor) else Tensor(current)
    if current.shape != state.u.shape:
        raise ShapeError(f"input {current.shape} does not match membrane state {state.u.shape}")
    u = state.u
    v = add(u, mul(sub(current, sub(u, p.u_reset)), 1.0 / p.tau))
    s = heaviside_spike(sub(v, p.u_th), p.surrogate_width, p.mode)
    s_reset = s.detach() if p.detaches_reset else s
    u_next = add(mul(s_reset, p.u_reset), mul(sub(1.0, s_reset), v))
    return s, LIFState(u_next)


def lif_sequence(current: Tensor, p: LIFParams) -> Tensor:
    """Run the neuron over the leading time axis of ``current`` [T, ...].

    State starts at ``u_reset`` on every call. Fused forward and
    back-propagation-through-time in a single tape node.
    """
    current = current if isinstance(current, Tensor) else Tensor(current)
    if current.ndim < 1 or current.shape[0] == 0:
        raise ShapeError("lif_sequence needs at least one timestep")
    xd = current.data
    steps = xd.shape[0]
    inv_tau = 1.0 / p.tau
    u = np.full(xd.shape[1:], p.u_reset, dtype=xd.dtype)
    out = np.empty_like(xd)
    vs = np.empty_like(xd)
    for t in range(steps):
        v = u + (xd[t] - (u - p.u_reset)) * inv_tau
        s = _fire(v - p.u_th, p.surrogate_width, p.mode)
        u = s * p.u_reset + (1.0 - s) * v
        vs[t] = v
        out[t] = s
    _report("elementwise", 4 * xd.size)
    detach = p.detaches_reset

    def bw(g):
        gi = np.empty_like(xd)
        gu = np.zeros(xd.shape[1:], dtype=xd.dtype)
        for t in reversed(range(steps)):
            v, s = vs[t], out[t]
            sg = surrogate_grad(v - p.u_th, p.surrogate_width)
            through_reset = 1.0 - s
            if not detach:
                through_reset = through_reset + (p.u_reset - v) * sg
            dv = g[t] * sg + gu * through_reset
            gi[t] = dv * inv_tau
            gu = dv * (1.0 - inv_tau)
        return (gi,)

    return make_op(out, (current,), bw, "lif")
