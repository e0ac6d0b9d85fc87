"""Adam, the two-phase learning-rate schedule, and the training loop.

Training is a pure function of (seed, data, config): shuffling, DropBlock
masks, and weight updates all derive from one generator, so repeated runs
produce byte-identical curve logs and checkpoints.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import metrics as metrics_mod
from .models import Network, save_checkpoint
from .tensor import Tensor, bce_loss, no_grad

__all__ = [
    "Adam",
    "TrainConfig",
    "EpochReport",
    "TrainingDivergedError",
    "lr_for_epoch",
    "train_epoch",
    "run_training",
    "evaluate_probs",
]


class TrainingDivergedError(FloatingPointError):
    pass


class Adam:
    """Adam with bias correction over named parameter tensors.

    Moment buffers live per parameter name; ``step`` reads each parameter's
    populated gradient (a missing gradient counts as zero) and aborts on
    non-finite values.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise TrainingDivergedError(f"non-finite gradient for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def meta_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step_count": self.step_count,
        }

    def moment_arrays(self):
        for name, _ in self.params:
            yield f"adam.m/{name}", self.m[name]
        for name, _ in self.params:
            yield f"adam.v/{name}", self.v[name]

    def load_state(self, state: dict) -> None:
        meta = state["meta"]
        self.lr = meta["lr"]
        self.beta1 = meta["beta1"]
        self.beta2 = meta["beta2"]
        self.eps = meta["eps"]
        self.step_count = meta["step_count"]
        for name, _ in self.params:
            self.m[name] = state["m"][name].astype(self.m[name].dtype, copy=False)
            self.v[name] = state["v"][name].astype(self.v[name].dtype, copy=False)


@dataclass(frozen=True)
class TrainConfig:
    """Epoch budget, the two-phase learning rate, batch size, and seed.

    ``phase1_epochs`` defaults to min(100, epochs); the first phase trains at
    ``lr_phase1`` and the remainder at ``lr_phase2``.
    """

    epochs: int = 150
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    phase1_epochs: Optional[int] = None
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.phase1_epochs is None:
            object.__setattr__(self, "phase1_epochs", min(100, self.epochs))
        if not 1 <= self.phase1_epochs <= self.epochs:
            raise ValueError(
                f"phase1_epochs must lie in [1, epochs], got {self.phase1_epochs} with {self.epochs} epochs"
            )


def lr_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Piecewise-constant schedule over 1-based epochs."""
    if not 1 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [1, {cfg.epochs}]")
    return cfg.lr_phase1 if epoch <= cfg.phase1_epochs else cfg.lr_phase2


@dataclass
class EpochReport:
    epoch: int
    lr: float
    train_loss: float
    val_loss: Optional[float]
    val_metrics: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "lr": self.lr,
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "val_metrics": self.val_metrics,
            },
            sort_keys=True,
        )


def evaluate_probs(net: Network, images: np.ndarray, batch_size: int) -> np.ndarray:
    """Eval-mode probability maps for a stack of images."""
    outs = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            pred = net.forward(Tensor(images[start : start + batch_size]), train=False)
            outs.append(pred.data)
    return np.concatenate(outs, axis=0)


def _validation_report(net: Network, images: np.ndarray, masks: np.ndarray, batch_size: int):
    probs = evaluate_probs(net, images, batch_size)
    val_loss = float(bce_loss(Tensor(probs), Tensor(masks)).data)
    row = metrics_mod.segmentation_report(probs, (probs >= 0.5).astype(np.uint8), masks)
    return val_loss, row


def train_epoch(
    net: Network,
    optimizer: Adam,
    train_images: np.ndarray,
    train_masks: np.ndarray,
    cfg: TrainConfig,
    epoch: int,
    rng: np.random.Generator,
    val_images: Optional[np.ndarray] = None,
    val_masks: Optional[np.ndarray] = None,
) -> EpochReport:
    """One full pass in a seeded shuffle order, then an eval-mode validation.

    Raises TrainingDivergedError as soon as a batch loss goes non-finite.
    """
    n = train_images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    optimizer.lr = lr_for_epoch(epoch, cfg)
    order = rng.permutation(n)
    loss_sum = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        x = Tensor(train_images[idx])
        y = Tensor(train_masks[idx])
        optimizer.zero_grad()
        pred = net.forward(x, train=True, rng=rng)
        loss = bce_loss(pred, y)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
        loss.backward()
        optimizer.step()
        loss_sum += value * len(idx)
    train_loss = loss_sum / n

    val_loss, val_metrics = None, {}
    if val_images is not None and val_images.shape[0] > 0:
        val_loss, val_metrics = _validation_report(net, val_images, val_masks, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
    return EpochReport(epoch=epoch, lr=optimizer.lr, train_loss=train_loss, val_loss=val_loss, val_metrics=val_metrics)


def run_training(
    net: Network,
    train_images: np.ndarray,
    train_masks: np.ndarray,
    val_images: Optional[np.ndarray],
    val_masks: Optional[np.ndarray],
    cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    log_name: str = "curves.jsonl",
) -> list[EpochReport]:
    """Full training run: per-epoch reports, best/final checkpoints, curve log.

    The best checkpoint tracks the lowest validation loss (training loss when
    no validation set is given); ties keep the earlier epoch.
    """
    optimizer = Adam([(n, p) for n, p in net.trainable_params()], lr=cfg.lr_phase1)
    rng = np.random.default_rng(cfg.seed)
    reports: list[EpochReport] = []
    best = math.inf
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / log_name
        log_path.write_text("")
    for epoch in range(1, cfg.epochs + 1):
        report = train_epoch(
            net, optimizer, train_images, train_masks, cfg, epoch, rng, val_images, val_masks
        )
        reports.append(report)
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(report.to_json() + "\n")
        monitored = report.val_loss if report.val_loss is not None else report.train_loss
        if monitored < best:
            best = monitored
            if out_dir is not None:
                save_checkpoint(net, out_dir / "best.ckpt", optimizer=optimizer)
    if out_dir is not None:
        save_checkpoint(net, out_dir / "final.ckpt", optimizer=optimizer)
    return reports
