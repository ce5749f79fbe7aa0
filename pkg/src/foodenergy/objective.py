"""Regression loss and learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class TrainingConfig:
    initial_lr: float = 5e-5
    lr_decay: float = 0.8
    decay_every_epochs: int = 10
    epochs: int = 50
    output_scale: float = 300.0
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.output_scale <= 0:
            raise ValueError("output_scale must be positive")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")


def lr_at_epoch(config: TrainingConfig, epoch: int) -> float:
    """Step decay: epochs 1..decay_every_epochs run at the initial rate."""
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    return config.initial_lr * config.lr_decay ** ((epoch - 1) // config.decay_every_epochs)


def compute_loss(pred_scaled, gt_scaled):
    """Mean over samples of ``|d| + d**2`` with ``d = pred - gt`` (L1 plus squared error).

    Accepts python floats, numpy arrays or torch tensors; tensors stay on the
    autograd graph.
    """
    if isinstance(pred_scaled, torch.Tensor) or isinstance(gt_scaled, torch.Tensor):
        d = torch.as_tensor(pred_scaled) - torch.as_tensor(gt_scaled)
        if not torch.isfinite(d).all():
            raise ValueError("non-finite value in loss inputs")
        return (d.abs() + d * d).mean()
    d = np.asarray(pred_scaled, dtype=np.float64) - np.asarray(gt_scaled, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite value in loss inputs")
    return float(np.mean(np.abs(d) + d * d))


def schedule(config: TrainingConfig, epochs: int | None = None) -> list[float]:
    n = config.epochs if epochs is None else epochs
    return [lr_at_epoch(config, e) for e in range(1, n + 1)]

