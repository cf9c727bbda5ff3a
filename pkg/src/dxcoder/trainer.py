"""Fine-tuning loop: batched BCE training with AdamW (decoupled weight
decay), linear warmup to a constant plateau learning rate, and early
stopping on validation weighted F1.

Reproducibility contract: the batch order comes from one seeded generator
consumed across epochs, the per-step dropout seed is derived from
(run seed, global step), and the optimizer is plain float64 arithmetic, so
two runs with the same seed produce bitwise-identical parameters. The
global step counter increments once per batch; the first batch is step 1.
No gradient accumulation or clipping.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import EvalReport
from .model import ModelConfig, ModelState, assemble_batch, backward, init
from .pipeline import EncodedSplit, evaluate_model


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    peak_lr: float = 3e-5
    warmup_steps: int = 5000
    max_epochs: int = 50
    patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("batch_size", "peak_lr", "warmup_steps", "max_epochs", "patience", "eps"):
            if getattr(self, name) <= 0:
                raise TrainerError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise TrainerError("patience must not exceed max_epochs")
        for name in ("beta1", "beta2"):
            if not (0.0 < getattr(self, name) < 1.0):
                raise TrainerError(f"{name} must be in (0, 1)")
        if self.weight_decay < 0:
            raise TrainerError("weight_decay must be nonnegative")
        if not (0.0 <= self.threshold <= 1.0):
            raise TrainerError("threshold must be in [0, 1]")


def lr_at(config: TrainConfig, step: int) -> float:
    """peak * min(1, step / warmup_steps): linear ramp, then constant."""
    if step < 0:
        raise TrainerError(f"step must be nonnegative, got {step}")
    return config.peak_lr * min(1.0, step / config.warmup_steps)


class AdamW:
    """Adam moments with decoupled weight decay: the decay multiplies the
    pre-update parameter, so a parameter with zero gradient shrinks by the
    factor (1 - lr * decay) exactly, independent of the moment state."""

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        cfg = self.config
        self.t += 1
        bias1 = 1.0 - cfg.beta1**self.t
        bias2 = 1.0 - cfg.beta2**self.t
        for name, grad in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad**2
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            params[name] *= 1.0 - lr * cfg.weight_decay
            params[name] -= lr * update


class EarlyStopper:
    """Strictly-greater improvement tracking with epoch patience."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.streak = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch result; True means stop now."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.streak = 0
            return False
        self.streak += 1
        return self.streak >= self.patience


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_f1: float
    lr: float
    seconds: float


@dataclass(frozen=True)
class TrainLog:
    epochs: tuple[EpochStats, ...]
    best_epoch: int
    stop_reason: str

    def __post_init__(self) -> None:
        if self.stop_reason not in ("early_stop", "max_epochs"):
            raise TrainerError(f"unknown stop reason {self.stop_reason!r}")
        if not self.epochs:
            raise TrainerError("a train log needs at least one epoch")
        by_epoch = {e.epoch: e for e in self.epochs}
        if self.best_epoch not in by_epoch:
            raise TrainerError(f"best_epoch {self.best_epoch} not in the log")
        best = by_epoch[self.best_epoch].val_f1
        if any(e.val_f1 > best for e in self.epochs):
            raise TrainerError("best_epoch does not hold the maximum validation metric")


def _dropout_seed(config: TrainConfig, step: int) -> int:
    return (config.seed << 20) + step


def train(
    state: ModelState,
    train_split: EncodedSplit,
    val_split: EncodedSplit,
    config: TrainConfig,
) -> tuple[ModelState, TrainLog]:
    """Run the training loop and return the state at the best validation
    epoch. The passed-in state is owned by the run and mutated in place;
    use the returned state afterwards."""
    if len(train_split) == 0:
        raise TrainerError("train split is empty")
    if len(val_split) == 0:
        raise TrainerError("validation split is empty")
    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(config)
    stopper = EarlyStopper(config.patience)
    global_step = 0
    best_params: dict[str, np.ndarray] = {k: v.copy() for k, v in state.params.items()}
    epochs: list[EpochStats] = []
    stop_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_split))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch_rows = order[start : start + config.batch_size]
            ids, mask = assemble_batch([train_split.sequences[i] for i in batch_rows])
            targets = train_split.targets[batch_rows]
            global_step += 1
            loss, grads = backward(
                state, ids, mask, targets,
                train_mode=True, dropout_seed=_dropout_seed(config, global_step),
            )
            optimizer.step(state.params, grads, lr_at(config, global_step))
            losses.append(loss)
        val_f1 = evaluate_model(state, val_split, config.threshold).weighted_f1
        epochs.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_f1=val_f1,
                lr=lr_at(config, global_step),
                seconds=time.perf_counter() - t0,
            )
        )
        improved_before = stopper.best_epoch
        should_stop = stopper.update(epoch, val_f1)
        if stopper.best_epoch == epoch and stopper.best_epoch != improved_before:
            best_params = {k: v.copy() for k, v in state.params.items()}
        if should_stop:
            stop_reason = "early_stop"
            break

    best_state = ModelState(config=state.config, params=best_params)
    log = TrainLog(
        epochs=tuple(epochs),
        best_epoch=stopper.best_epoch,
        stop_reason=stop_reason,
    )
    return best_state, log


def run_replicates(
    model_config: ModelConfig,
    train_split: EncodedSplit,
    val_split: EncodedSplit,
    test_split: EncodedSplit,
    config: TrainConfig,
    seeds: Sequence[int] | None = None,
    n_runs: int = 3,
) -> list[EvalReport]:
    """Independent train+evaluate executions differing only by seed."""
    if seeds is None:
        seeds = [config.seed + i for i in range(n_runs)]
    if len(seeds) < 2:
        raise TrainerError("replicate runs need at least 2 seeds for an interval")
    reports = []
    for seed in seeds:
        run_config = replace(config, seed=int(seed))
        state = init(model_config, seed=int(seed))
        best, _log = train(state, train_split, val_split, run_config)
        reports.append(evaluate_model(best, test_split, run_config.threshold))
    return reports


# --- log serialization -------------------------------------------------------


def log_to_csv(log: TrainLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_f1", "lr", "seconds"])
    for e in log.epochs:
        writer.writerow(
            [e.epoch, f"{e.train_loss:.8f}", f"{e.val_f1:.6f}", f"{e.lr:.3e}", f"{e.seconds:.3f}"]
        )
    return buf.getvalue()


def log_to_json(log: TrainLog) -> str:
    best = next(e for e in log.epochs if e.epoch == log.best_epoch)
    obj = {
        "n_epochs": len(log.epochs),
        "best_epoch": log.best_epoch,
        "best_val_f1": round(best.val_f1, 6),
        "stop_reason": log.stop_reason,
    }
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def save_log(log: TrainLog, csv_path: str | Path, json_path: str | Path) -> None:
    Path(csv_path).write_text(log_to_csv(log), encoding="utf-8")
    Path(json_path).write_text(log_to_json(log), encoding="utf-8")
