"""Training and evaluation loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tt
from .config import RunConfig
from .data import DatasetContainer, batches
from .metrics import OpRecorder
from .model import LSFormer, check_same_architecture, read_checkpoint, save_checkpoint
from .optim import AdamW, cosine_lr
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "loss", "train_acc", "val_acc", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    firing_rates: dict[str, float] = field(default_factory=dict)
    loss: float = float("nan")


def evaluate(model: LSFormer, data: DatasetContainer, batch_size: int = 64, record_rates: bool = False) -> EvalResult:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    k = model.cfg.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    rec = OpRecorder() if record_rates else None
    was_training = model.training
    model.eval()
    total_loss = 0.0
    try:
        with tt.no_grad(), tt.recording(rec):
            for x, y in batches(data, batch_size, model.cfg.timesteps):
                logits = model(Tensor(x))
                total_loss += tt.cross_entropy(logits, y).item() * len(y)
                pred = logits.data.argmax(axis=1)
                np.add.at(confusion, (y, pred), 1)
    finally:
        model.train(was_training)
    rates = {}
    if rec is not None:
        rates = {name: t.out_ones / t.out_size for name, t in rec.scopes.items() if t.out_size}
    acc = float(np.trace(confusion)) / len(data)
    return EvalResult(acc, confusion, rates, total_loss / len(data))


@dataclass
class TrainResult:
    model: LSFormer
    history: list[dict]
    checkpoint: Path | None


def train(
    cfg: RunConfig,
    train_data: DatasetContainer,
    val_data: DatasetContainer | None = None,
    out_dir=None,
    resume=None,
    stop_when: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """Train ``cfg.model`` on ``train_data`` for ``cfg.optim.epochs`` epochs.

    Writes ``metrics.csv`` (one row per epoch) and ``model.lsfk`` into
    ``out_dir`` when given. ``resume`` is a checkpoint path whose weights,
    optimizer moments and epoch counter are restored. ``stop_when(row)``
    ends training early once it returns true for an epoch's log row; the
    learning-rate schedule still follows ``cfg.optim.epochs``.
    """
    oc = cfg.optim
    model = LSFormer(cfg.model)
    opt = AdamW(model.parameters(), lr=oc.lr, weight_decay=oc.weight_decay)
    start_epoch = 0
    if resume is not None:
        ckpt = read_checkpoint(resume)
        check_same_architecture(ckpt.model_config, cfg.model)
        model.load_state_dict({k: v for k, v in ckpt.tensors.items() if not k.startswith("optim/")})
        optim_state = {k[len("optim/"):]: v for k, v in ckpt.tensors.items() if k.startswith("optim/")}
        if optim_state:
            opt.load_state(optim_state)
        start_epoch = int(ckpt.config.get("train.epochs_done", "0"))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps())
    history: list[dict] = []
    log_path = out / "metrics.csv" if out is not None else None
    if log_path is not None and not (resume is not None and log_path.exists()):
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    for epoch in range(start_epoch, oc.epochs):
        opt.lr = cosine_lr(epoch, oc.epochs, oc.lr, oc.min_lr, oc.warmup)
        model.train()
        total, correct, loss_sum = 0, 0, 0.0
        # one shuffle stream per epoch, so a resumed run replays the same order
        rng = np.random.default_rng([cfg.seed, epoch])
        for x, y in batches(train_data, oc.batch_size, cfg.model.timesteps, rng):
            logits = model(Tensor(x))
            loss = tt.cross_entropy(logits, y)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch + 1}, lr={opt.lr:.3g}")
            opt.zero_grad()
            tt.backward(loss)
            opt.step()
            loss_sum += value * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            total += len(y)
        row = {
            "epoch": epoch + 1,
            "loss": loss_sum / total,
            "train_acc": correct / total,
            "val_acc": evaluate(model, val_data).accuracy if val_data is not None and len(val_data) else float("nan"),
            "lr": opt.lr,
        }
        history.append(row)
        log.info("epoch %d loss %.4f train %.3f val %.3f lr %.2e", *(row[k] for k in LOG_FIELDS))
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [row["epoch"], f"{row['loss']:.6f}", f"{row['train_acc']:.6f}", f"{row['val_acc']:.6f}", f"{row['lr']:.6e}"]
                )
        if stop_when is not None and stop_when(row):
            break

    ckpt_path = None
    if out is not None:
        ckpt_path = out / "model.lsfk"
        extra = {k: v for k, v in cfg.to_kv().items() if not k.split(".", 1)[0] in ("model", "spool", "attn", "lif")}
        extra["train.epochs_done"] = history[-1]["epoch"] if history else start_epoch
        save_checkpoint(model, ckpt_path, extra=extra, optimizer_state=opt.state())
    return TrainResult(model, history, ckpt_path)
