"""Central finite-difference checks of the taped gradients.

Checks run in float64 with the neurons in relaxed mode, where the network is
a smooth function of its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tt
from .model import LSFormer
from .neuron import RELAXED
from .tensor import Tensor


@dataclass
class GroupCheck:
    name: str
    size: int
    checked: int
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute discrepancy, relative to the largest gradient magnitude in the group."""
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3, indices=None) -> np.ndarray:
    """d f / d arr at ``indices`` (flat positions; all by default), by central differences."""
    flat = arr.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def micro_model_config(embed_dim: int = 16, groups: int = 2, timesteps: int = 2, grid: int = 4):
    """A one-block model on ``grid x grid`` inputs; tokens keep the full grid.

    Pooling is left out (max and threshold selections are not differentiable
    at ties, which finite differences straddle) and the relaxed neurons use
    width 1, which keeps third derivatives small enough for h = 1e-3.
    """
    from .attention import LSSSAConfig
    from .config import ModelConfig
    from .neuron import LIFParams

    return ModelConfig(
        in_channels=1,
        height=grid,
        width=grid,
        embed_dim=embed_dim,
        num_blocks=1,
        num_classes=3,
        timesteps=timesteps,
        num_pool_stages=0,
        mlp_ratio=2.0,
        attn=LSSSAConfig(embed_dim=embed_dim, groups=groups, dilation_rates=tuple(range(1, groups + 1)), heads=2),
        lif=LIFParams(mode=RELAXED, surrogate_width=1.0),
    )


def gradcheck_model(
    model: LSFormer,
    images: np.ndarray,
    labels: np.ndarray,
    h: float = 1e-3,
    tol: float = 1e-3,
    max_entries: int | None = 24,
    seed: int = 0,
) -> list[GroupCheck]:
    """Compare backprop against central differences for every parameter group.

    The model is cast to float64 and switched to relaxed neurons in place.
    Groups larger than ``max_entries`` are checked on a random subset.
    """
    model.set_neuron_mode(RELAXED)
    rng = np.random.default_rng(seed)
    with tt.default_dtype(np.float64):
        model.astype(np.float64)
        x = Tensor(np.asarray(images, dtype=np.float64))

        def loss_value() -> float:
            return tt.cross_entropy(model(x), labels).item()

        model.train()
        model.zero_grad()
        loss = tt.cross_entropy(model(x), labels)
        tt.backward(loss, model.parameters())
        results = []
        for name, p in model.named_parameters():
            analytic = p.grad.reshape(-1).copy()
            n = p.size
            if max_entries is None or n <= max_entries:
                idx = np.arange(n)
            else:
                idx = np.sort(rng.choice(n, size=max_entries, replace=False))
            numeric = numeric_grad(loss_value, p.data, h, idx)
            results.append(GroupCheck(name, n, len(idx), relative_error(analytic[idx], numeric), tol))
    return results


def format_report(results: list[GroupCheck]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'parameter':<{width}}  {'size':>6}  {'checked':>7}  {'max rel err':>11}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.size:>6}  {r.checked:>7}  {r.max_rel_error:>11.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
