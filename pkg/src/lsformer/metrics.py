"""Operation counting, firing rates, synaptic operations and energy.

Conventions: one multiply-accumulate is 2 FLOPs; ``SOPs = fr * T * FLOPs``
where ``fr`` is the firing rate of the spike input of a synaptic layer
(conv / matmul) and ``FLOPs`` is its count for one sample at one timestep.
Batch-norm, pooling and elementwise work is counted on the FLOP side only.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor

ENERGY_PER_SOP = 77e-15  # J
ENERGY_PER_FLOP = 12.5e-12  # J

SYNAPTIC_KINDS = ("conv", "matmul", "linear")
FLOP_KINDS = ("conv", "matmul", "linear", "bn", "pool", "elementwise")


class NotBinaryError(ValueError):
    pass


class ProfileModeError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerDesc:
    """Geometry of one layer application (per sample unless ``batch`` is set)."""

    kind: str
    c_in: int = 0
    c_out: int = 0
    kernel: int = 1
    groups: int = 1
    h_out: int = 1
    w_out: int = 1
    m: int = 0
    k: int = 0
    p: int = 0
    n: int = 0
    batch: int = 1


def count_flops(desc: LayerDesc) -> int:
    if desc.kind == "conv":
        per = 2 * desc.c_out * (desc.c_in // desc.groups) * desc.kernel**2 * desc.h_out * desc.w_out
    elif desc.kind in ("matmul", "linear"):
        per = 2 * desc.m * desc.k * desc.p
    elif desc.kind == "elementwise":
        per = desc.n
    elif desc.kind == "bn":
        per = 2 * desc.n
    elif desc.kind == "pool":
        per = desc.n * desc.kernel**2
    else:
        raise ValueError(f"unknown layer kind {desc.kind!r}")
    return per * desc.batch


def firing_rate(x) -> float:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.size == 0:
        raise NotBinaryError("firing rate of an empty tensor is undefined")
    if not np.all((arr == 0) | (arr == 1)):
        raise NotBinaryError("firing_rate needs a binary spike tensor")
    return float(np.count_nonzero(arr)) / arr.size


def sops(fr: float, timesteps: int, flops: float) -> float:
    return fr * timesteps * flops


def energy_snn(n_sops: float) -> float:
    return ENERGY_PER_SOP * n_sops


def energy_ann(flops: float) -> float:
    return ENERGY_PER_FLOP * flops


# ---------------------------------------------------------------------------
# recording
# ---------------------------------------------------------------------------


@dataclass
class _ScopeTally:
    flops: dict = field(default_factory=dict)
    spike_ones: float = 0.0  # weighted by flops: sum(fr_op * flops_op)
    dense_flops: float = 0.0  # synaptic flops whose input was not binary
    out_ones: int = 0
    out_size: int = 0


class OpRecorder:
    """Collects per-scope FLOPs and spike statistics reported by tensor ops."""

    def __init__(self):
        self.scopes: dict[str, _ScopeTally] = {}

    def add(self, scope: str, kind: str, flops: float, operand) -> None:
        tally = self.scopes.setdefault(scope, _ScopeTally())
        if kind == "spikes":
            tally.out_ones += int(np.count_nonzero(operand))
            tally.out_size += operand.size
            return
        tally.flops[kind] = tally.flops.get(kind, 0.0) + flops
        if kind in SYNAPTIC_KINDS:
            if operand is not None and np.all((operand == 0) | (operand == 1)):
                tally.spike_ones += flops * (np.count_nonzero(operand) / max(operand.size, 1))
            else:
                tally.dense_flops += flops

    def total(self, kinds=FLOP_KINDS) -> float:
        return sum(t.flops.get(k, 0.0) for t in self.scopes.values() for k in kinds)


class FlopCounter(OpRecorder):
    """Context manager counting FLOPs of everything run inside it."""

    def __enter__(self):
        self._cm = tt.recording(self)
        self._cm.__enter__()
        return self

    def __exit__(self, *exc):
        self._cm.__exit__(*exc)


# ---------------------------------------------------------------------------
# energy report
# ---------------------------------------------------------------------------


@dataclass
class BlockEnergy:
    block: str
    flops: float
    fr: float
    timesteps: int
    sops: float
    energy_j: float
    dense: bool = False  # input was real-valued; fr is taken as 1


@dataclass
class EnergyReport:
    entries: list[BlockEnergy] = field(default_factory=list)
    firing_rates: dict[str, float] = field(default_factory=dict)
    nonsynaptic_flops: float = 0.0

    @property
    def total_flops(self) -> float:
        return sum(e.flops for e in self.entries)

    @property
    def total_sops(self) -> float:
        return sum(e.sops for e in self.entries)

    @property
    def total_energy(self) -> float:
        return sum(e.energy_j for e in self.entries)

    @property
    def synaptic_energy(self) -> float:
        """Energy of layers driven by spikes (excludes real-valued-input layers)."""
        return sum(e.energy_j for e in self.entries if not e.dense)

    def ann_energy(self) -> float:
        return energy_ann(self.total_flops + self.nonsynaptic_flops)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "flops", "fr", "T", "sops", "energy_j"])
        for e in self.entries:
            w.writerow([e.block, f"{e.flops:.0f}", f"{e.fr:.6f}", e.timesteps, f"{e.sops:.1f}", f"{e.energy_j:.6e}"])
        w.writerow(["total", f"{self.total_flops:.0f}", "", "", f"{self.total_sops:.1f}", f"{self.total_energy:.6e}"])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(e.block) for e in self.entries] + [5])
        lines = [f"{'block':<{width}}  {'FLOPs':>12}  {'fr':>7}  {'T':>3}  {'SOPs':>12}  {'energy (J)':>11}"]
        for e in self.entries:
            mark = "*" if e.dense else " "
            lines.append(
                f"{e.block:<{width}}  {e.flops:>12.0f}  {e.fr:>7.4f}{mark} {e.timesteps:>3}  {e.sops:>12.0f}  {e.energy_j:>11.4e}"
            )
        lines.append(
            f"{'total':<{width}}  {self.total_flops:>12.0f}  {'':>7}  {'':>3}  {self.total_sops:>12.0f}  {self.total_energy:>11.4e}"
        )
        if any(e.dense for e in self.entries):
            lines.append("* real-valued input, counted as fully active (fr = 1)")
        return "\n".join(lines)


def report_from_recorder(rec: OpRecorder, timesteps: int, samples: int) -> EnergyReport:
    """Turn raw per-scope tallies (over ``timesteps * samples`` folded items) into a report."""
    per = timesteps * samples
    report = EnergyReport()
    for name, tally in rec.scopes.items():
        syn = sum(tally.flops.get(k, 0.0) for k in SYNAPTIC_KINDS)
        report.nonsynaptic_flops += sum(v for k, v in tally.flops.items() if k not in SYNAPTIC_KINDS) / per
        if tally.out_size:
            report.firing_rates[name] = tally.out_ones / tally.out_size
        if syn == 0:
            continue
        flops = syn / per
        dense = tally.dense_flops > 0
        fr = (tally.spike_ones + tally.dense_flops) / syn
        n = sops(fr, timesteps, flops)
        report.entries.append(BlockEnergy(name, flops, fr, timesteps, n, energy_snn(n), dense))
    return report


def profile_model(model, images: Tensor) -> EnergyReport:
    """Run one forward pass and account every synaptic layer.

    ``images`` is time-major [T, B, C, H, W]. FLOPs are per sample and
    timestep; firing rates are averaged over the batch and all timesteps.
    """
    if any(m.params.mode != "spiking" for m in model.neuron_layers()):
        raise ProfileModeError("energy profiling needs spiking mode (firing rates are undefined when relaxed)")
    t, b = images.shape[:2]
    rec = OpRecorder()
    was_training = model.training
    model.eval()
    try:
        with tt.no_grad(), tt.recording(rec):
            model(images)
    finally:
        model.train(was_training)
    return report_from_recorder(rec, t, b)


PUBLISHED_ENERGY_ROWS = (("Spikingformer", 14.81e9, 1.14e-3), ("LSFormer", 18.05e9, 1.39e-3), ("Spikformer", 66.88e9, 5.15e-3))


def energy_self_test(tol_j: float = 0.01e-3) -> list[tuple[str, float, float, float, bool]]:
    """Recompute published SOPs -> energy rows: (name, sops, expected J, computed J, ok)."""
    out = []
    for name, n, expected in PUBLISHED_ENERGY_ROWS:
        got = energy_snn(n)
        out.append((name, n, expected, got, math.isclose(got, expected, abs_tol=tol_j)))
    return out
