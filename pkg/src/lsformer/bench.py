"""Counted-FLOP and wall-time scaling of the local attention against global attention.

Both mechanisms are timed from the same binary Q/K/V maps, so the counts
compare the attention cores. The full LS-SSA block (projections, norms,
neurons, fusion) is counted as well; everything in it is linear in the
number of tokens.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .attention import LSSSA, LSSSAConfig, global_ssa_reference
from .metrics import FlopCounter
from .tensor import Tensor

TOKEN_GRID = (16, 64, 256, 1024)


@dataclass
class BenchRow:
    tokens: int
    dim: int
    lsssa_core_flops: float
    lsssa_block_flops: float
    global_flops: float
    lsssa_seconds: float
    global_seconds: float


@dataclass
class BenchResult:
    rows: list[BenchRow] = field(default_factory=list)

    def slope(self, column: str) -> float:
        """Least-squares slope of log(column) against log(tokens)."""
        x = np.log([r.tokens for r in self.rows])
        y = np.log([getattr(r, column) for r in self.rows])
        return float(np.polyfit(x, y, 1)[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(BenchRow.__dataclass_fields__)
        w.writerow(cols)
        for r in self.rows:
            w.writerow([getattr(r, c) if isinstance(getattr(r, c), int) else f"{getattr(r, c):.6g}" for c in cols])
        return buf.getvalue()


def bench_config(dim: int = 64, groups: int = 2, head_dim: int = 16) -> LSSSAConfig:
    """Attention config whose head width stays fixed as ``dim`` grows."""
    group_dim = dim // groups
    return LSSSAConfig(
        embed_dim=dim,
        groups=groups,
        dilation_rates=tuple(range(1, groups + 1)),
        heads=max(group_dim // head_dim, 1),
    )


def _binary_maps(rng, n: int, dim: int, side: int, rate: float = 0.2):
    return [Tensor((rng.random((n, dim, side, side)) < rate).astype(np.float32)) for _ in range(3)]


def measure(tokens: int, cfg: LSSSAConfig, seed: int = 0, batch: int = 1) -> BenchRow:
    side = math.isqrt(tokens)
    if side * side != tokens:
        raise ValueError(f"token count {tokens} is not a square")
    rng = np.random.default_rng(seed)
    attn = LSSSA(cfg, rng)
    attn.eval()
    q, k, v = _binary_maps(rng, batch, cfg.embed_dim, side)
    with tt.no_grad():
        with FlopCounter() as core:
            start = time.perf_counter()
            branches = [attn.group_branches(q, k, v, m) for m in range(cfg.groups)]
            attn.fuse(branches, q)
            t_local = time.perf_counter() - start
        with FlopCounter() as glob:
            start = time.perf_counter()
            global_ssa_reference(q, k, v, cfg.scale)
            t_global = time.perf_counter() - start
        x = Tensor(rng.standard_normal((1, batch, cfg.embed_dim, side, side)).astype(np.float32))
        with FlopCounter() as block:
            attn(x)
    return BenchRow(tokens, cfg.embed_dim, core.total(), block.total(), glob.total(), t_local, t_global)


def run_bench(tokens=TOKEN_GRID, dim: int = 64, groups: int = 2, head_dim: int = 16, seed: int = 0) -> BenchResult:
    cfg = bench_config(dim, groups, head_dim)
    return BenchResult([measure(n, cfg, seed) for n in tokens])
