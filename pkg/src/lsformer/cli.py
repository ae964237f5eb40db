"""Command-line entry point: ``python -m lsformer <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data / file format
error, 3 a check failed (gradient check, self-test, diverged training).
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .config import RunConfig, dumps, loads, parse_overrides
from .data import DatasetFormatError, load_container, save_container, synth_dataset
from .gradcheck import format_report, gradcheck_model, micro_model_config
from .metrics import ProfileModeError, energy_self_test, profile_model
from .model import (
    PRESETS,
    CheckpointFormatError,
    LSFormer,
    count_parameters,
    load_checkpoint,
    parameter_breakdown,
    read_checkpoint,
)
from .tensor import ConfigError, Tensor
from .train import TrainingDiverged, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("lsformer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _echo_config(kv: dict) -> None:
    print("# resolved config")
    for line in dumps(kv).splitlines():
        print(f"#   {line}")
    sys.stdout.flush()


def _positive(name: str, value: int) -> None:
    if value < 1:
        raise UsageError(f"--{name} must be >= 1, got {value}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    _positive("classes", args.classes)
    _positive("n", args.n)
    data = synth_dataset(args.kind, args.n, args.classes, args.size, args.seed)
    _echo_config({"kind": args.kind, "classes": args.classes, "n": args.n, "size": args.size, "seed": args.seed})
    save_container(data, args.out)
    counts = np.bincount(data.labels, minlength=args.classes)
    print(f"wrote {len(data)} samples of shape {data.sample_shape} to {args.out}")
    print(f"per-class counts: {' '.join(map(str, counts))}; mean pixel {data.samples.mean():.4f}")
    return EXIT_OK


def _run_config(args) -> RunConfig:
    base = RunConfig()
    kv: dict[str, str] = {}
    if args.config:
        kv.update(loads(Path(args.config).read_text()))
    kv.update(parse_overrides(args.set or []))
    flags = {
        "run.train_data": args.train_data,
        "run.val_data": args.val_data,
        "run.out_dir": args.out,
        "optim.epochs": args.epochs,
        "run.threads": args.threads,
    }
    kv.update({k: str(v) for k, v in flags.items() if v is not None})
    if args.seed is not None:
        kv["run.seed"] = kv["model.seed"] = str(args.seed)
    return RunConfig.from_kv(kv, base)


def _check_data(cfg, data, what: str) -> None:
    m = cfg.model
    shape = data.sample_shape[-3:]
    if shape != (m.in_channels, m.height, m.width):
        raise ConfigError(
            f"{what} samples are {shape}, model expects ({m.in_channels}, {m.height}, {m.width})"
        )
    if data.num_classes is not None and data.num_classes != m.num_classes:
        raise ConfigError(f"{what} has {data.num_classes} classes, model.num_classes={m.num_classes}")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.train_data:
        raise UsageError("no training data: pass --train-data or set run.train_data")
    _echo_config(cfg.to_kv())
    train_data = load_container(cfg.train_data)
    _check_data(cfg, train_data, "training data")
    val_data = None
    if cfg.val_data:
        val_data = load_container(cfg.val_data)
        _check_data(cfg, val_data, "validation data")
    result = train(cfg, train_data, val_data, out_dir=cfg.out_dir, resume=args.resume)
    if result.history:
        last = result.history[-1]
        print(f"epoch {last['epoch']}: loss {last['loss']:.4f} train_acc {last['train_acc']:.4f} val_acc {last['val_acc']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def block_rates(rates: dict[str, float]) -> dict[str, float]:
    """Mean firing rate of the spiking layers inside each top-level part."""
    groups: dict[str, list[float]] = {}
    for name, r in rates.items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        groups.setdefault(key, []).append(r)
    return {k: float(np.mean(v)) for k, v in groups.items()}


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_container(args.data)
    if len(data) == 0:
        raise DatasetFormatError(f"{args.data} holds no samples")
    cfg = RunConfig(model=model.cfg)
    _echo_config(model.cfg.to_kv())
    try:
        _check_data(cfg, data, "evaluation data")
    except ConfigError as exc:
        raise DatasetFormatError(str(exc)) from None
    res = evaluate(model, data, args.batch_size, record_rates=True)
    print(f"top-1 accuracy: {res.accuracy:.4f} ({int(np.trace(res.confusion))}/{len(data)})")
    print("confusion (rows = true class):")
    for i, row in enumerate(res.confusion):
        print(f"  {i:>3}: " + " ".join(f"{v:>5d}" for v in row))
    print("mean firing rate per block:")
    for name, r in block_rates(res.firing_rates).items():
        print(f"  {name:<12} {r:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    tokens = tuple(int(t) for t in args.tokens.split(","))
    _echo_config({"tokens": tokens, "dim": args.dim, "groups": args.groups, "head_dim": args.head_dim, "seed": args.seed})
    try:
        result = bench_mod.run_bench(tokens, args.dim, args.groups, args.head_dim, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    for col in ("lsssa_core_flops", "lsssa_block_flops", "global_flops"):
        print(f"log-log slope {col}: {result.slope(col):.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = dataclasses.replace(micro_model_config(args.dim, args.groups, args.timesteps, args.grid), seed=args.seed)
    _echo_config(cfg.to_kv() | {"check.h": args.h, "check.tol": args.tol, "check.max_entries": args.max_entries})
    model = LSFormer(cfg)
    rng = np.random.default_rng(args.seed)
    images = rng.uniform(0.0, 3.0, size=(cfg.timesteps, args.batch, cfg.in_channels, cfg.height, cfg.width))
    labels = np.arange(args.batch) % cfg.num_classes
    entries = None if args.max_entries <= 0 else args.max_entries
    results = gradcheck_model(model, images, labels, h=args.h, tol=args.tol, max_entries=entries, seed=args.seed)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {len(failed)} parameter group(s): {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} parameter groups within {args.tol:g}")
    return EXIT_OK


def cmd_energy(args) -> int:
    rows = energy_self_test()
    status = EXIT_OK
    lines = ["self-test (SOPs -> energy):"]
    for name, n, expected, got, ok in rows:
        lines.append(f"  {name:<13} {n / 1e9:6.2f} G SOPs -> {got * 1e3:.3f} mJ (expected {expected * 1e3:.2f}) {'ok' if ok else 'FAIL'}")
        if not ok:
            status = EXIT_CHECK
    if args.checkpoint is None:
        print("\n".join(lines))
        return status
    ckpt = read_checkpoint(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    if model.cfg.lif.mode != "spiking":
        raise ProfileModeError("checkpoint uses relaxed neurons; energy accounting needs spiking mode")
    _echo_config(ckpt.config)
    if args.data is None:
        raise UsageError("--data is required with --checkpoint")
    data = load_container(args.data)
    if len(data) == 0:
        raise DatasetFormatError(f"{args.data} holds no samples")
    try:
        _check_data(RunConfig(model=model.cfg), data, "profiling data")
    except ConfigError as exc:
        raise DatasetFormatError(str(exc)) from None
    from .data import batches

    x, _ = next(batches(data, args.samples, model.cfg.timesteps))
    report = profile_model(model, Tensor(x))
    text = report.to_text() + "\n\n" + "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "energy.csv").write_text(report.to_csv())
        (out / "energy.txt").write_text(text)
        (out / "config.txt").write_text(dumps(ckpt.config))
        print(f"wrote {out / 'energy.csv'} and {out / 'energy.txt'}")
    return status


def cmd_params(args) -> int:
    cfg = PRESETS[args.preset]()
    _echo_config(cfg.to_kv())
    model = LSFormer(cfg)
    for name, n in parameter_breakdown(model).items():
        print(f"  {name:<12} {n:>10,d}")
    total = count_parameters(model)
    print(f"total: {total:,d} ({total / 1e6:.2f} M)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lsformer", description="Spiking transformer toolkit: data, training, checks, profiling.")
    p.add_argument("--threads", type=int, help="numeric library threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset container")
    g.add_argument("--kind", choices=("oriented-bars", "multi-scale-blobs"), default="oriented-bars")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--n", type=int, default=200, help="samples per class")
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.add_argument("--train-data")
    t.add_argument("--val-data")
    t.add_argument("--out", help="output directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy, confusion counts and firing rates")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="FLOP and wall-time scaling of local vs global attention")
    b.add_argument("--tokens", default=",".join(map(str, bench_mod.TOKEN_GRID)))
    b.add_argument("--dim", type=int, default=64)
    b.add_argument("--groups", type=int, default=2)
    b.add_argument("--head-dim", type=int, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (stdout if omitted)")
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    c.add_argument("--dim", type=int, default=16)
    c.add_argument("--groups", type=int, default=2)
    c.add_argument("--timesteps", type=int, default=2)
    c.add_argument("--grid", type=int, default=4)
    c.add_argument("--batch", type=int, default=2)
    c.add_argument("--h", type=float, default=1e-3)
    c.add_argument("--tol", type=float, default=1e-3)
    c.add_argument("--max-entries", type=int, default=24, help="entries sampled per group (0 = all)")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    en = sub.add_parser("energy", help="per-block SOPs / energy report and the arithmetic self-test")
    en.add_argument("--checkpoint")
    en.add_argument("--data")
    en.add_argument("--samples", type=int, default=16)
    en.add_argument("--out-dir")
    en.set_defaults(fn=cmd_energy)

    pa = sub.add_parser("params", help="parameter count of a preset")
    pa.add_argument("--preset", choices=sorted(PRESETS), default="lsformer-4-384")
    pa.set_defaults(fn=cmd_params)
    return p


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(args.threads or 1):
            return args.fn(args)
    except (UsageError, ConfigError, ProfileModeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
