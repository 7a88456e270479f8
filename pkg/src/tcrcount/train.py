"""Training loop: sampled epochs, Adam on the fused BCE loss, validation-loss
early stopping, and the training-curve emission.

The returned model always carries the weights of the *best* validation
epoch, never the last. Identical (seed, config, data) reproduce the exact
curve. The test split never reaches this module: train() receives only the
train and validation ROI pools.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import PatchSpec, Roi, sample_patch
from .model import UNet, clone_state, receptive_field, restore_state, save_weights
from .nn import Adam, bce_with_sigmoid

_VAL_STREAM = 0x56414C  # distinct seed stream for validation sampling


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    examples_per_epoch: int = 4000
    patience: int = 4
    batch_size: int = 8
    patch_px: int = 256
    max_epochs: int = 200
    seed: int = 0
    magnification: float = 20.0
    kind: str = "dt_cl"
    augment: bool = True
    val_patches: int = 256

    def __post_init__(self):
        for name in ("lr", "examples_per_epoch", "patience", "batch_size",
                     "patch_px", "max_epochs", "val_patches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.kind not in ("dt_cl", "seg"):
            raise ValueError(f"unknown model kind {self.kind!r}")


class EarlyStopper:
    """Stop when validation loss has not improved for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class TrainResult:
    model: UNet
    curve: list[tuple[int, float, float]]  # (epoch, train loss, val loss)
    best_epoch: int
    best_val_loss: float


def _sample_batch(rois, spec, seeds):
    imgs, maps = [], []
    for s in seeds:
        img, tgt, _ = sample_patch(rois, spec, s)
        imgs.append(img)
        maps.append(tgt)
    return np.stack(imgs), np.stack(maps)


def _val_loss(model: UNet, images: np.ndarray, targets: np.ndarray,
              batch: int) -> float:
    total = 0.0
    for i in range(0, len(images), batch):
        x = images[i:i + batch]
        logits = model.forward_logits(x, train=False)
        loss, _ = bce_with_sigmoid(logits, targets[i:i + batch])
        total += loss * len(x)
    return total / len(images)


def train(model: UNet, train_rois: Sequence[Roi], val_rois: Sequence[Roi],
          config: TrainConfig) -> TrainResult:
    if not train_rois or not val_rois:
        raise ValueError("train() needs non-empty train and validation ROI pools")
    rf = receptive_field(model.config)
    if config.patch_px < rf:
        raise ValueError(f"patch {config.patch_px} px is below the model's "
                         f"receptive field {rf} px")
    expected_maps = 2 if config.kind == "dt_cl" else 1
    if model.config.out_maps != expected_maps:
        raise ValueError(f"model emits {model.config.out_maps} maps, "
                         f"kind {config.kind!r} needs {expected_maps}")

    spec = PatchSpec(config.patch_px, config.magnification, config.kind, config.augment)
    val_spec = PatchSpec(config.patch_px, config.magnification, config.kind, augment=False)
    val_x, val_y = _sample_batch(
        val_rois, val_spec,
        [(config.seed, _VAL_STREAM, i) for i in range(config.val_patches)])

    optimizer = Adam(lr=config.lr)
    stopper = EarlyStopper(config.patience)
    curve: list[tuple[int, float, float]] = []
    best_state = clone_state(model)
    steps = max(1, config.examples_per_epoch // config.batch_size)

    for epoch in range(1, config.max_epochs + 1):
        epoch_loss = 0.0
        for step in range(steps):
            seeds = [(config.seed, epoch, step, j) for j in range(config.batch_size)]
            x, y = _sample_batch(train_rois, spec, seeds)
            tape: dict = {}
            logits = model.forward_logits(x, train=True, tape=tape)
            loss, dlogits = bce_with_sigmoid(logits, y)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            grads = model.backward(tape, dlogits)
            optimizer.step(model.named_params(),
                           [grads[name] for name, _ in model.named_params()])
            epoch_loss += loss
        val = _val_loss(model, val_x, val_y, config.batch_size)
        if not np.isfinite(val):
            raise TrainingDiverged(epoch)
        curve.append((epoch, epoch_loss / steps, val))
        improved = val < stopper.best
        stop = stopper.update(epoch, val)
        if improved:
            best_state = clone_state(model)
        if stop:
            break
    restore_state(model, best_state)
    return TrainResult(model=model, curve=curve, best_epoch=stopper.best_epoch,
                       best_val_loss=stopper.best)


def save_curve_csv(path, curve: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in curve:
            writer.writerow([epoch, f"{tr:.6f}", f"{va:.6f}"])


def save_checkpoint(result: TrainResult, config: TrainConfig, weights_path) -> None:
    """Weights in the FCNW format plus a JSON sidecar with the run config."""
    weights_path = Path(weights_path)
    save_weights(result.model, weights_path)
    sidecar = {
        "config": asdict(config),
        "model": asdict(result.model.config),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
    }
    with open(weights_path.with_suffix(weights_path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)
