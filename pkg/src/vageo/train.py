"""Step-decay schedule, optimizer step, epoch loop and checkpoint container."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch

from .boxes import BBox
from .model import VAGeoNet, detection_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "vageo-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    halve_every: int = 10
    batch_size: int = 12
    epochs: int = 25

    def __post_init__(self):
        if self.lr0 < 0 or self.halve_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid training config {self}")


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=0.0)


def train_step(model: VAGeoNet, optimizer: torch.optim.Optimizer, query: torch.Tensor,
               reference: torch.Tensor, gts: Sequence[BBox], lr: float) -> float:
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    optimizer.zero_grad()
    loss = detection_loss(model(query, reference), list(gts), model.stride, *model.anchor.tolist())
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def fit(model: VAGeoNet, query: torch.Tensor, reference: torch.Tensor, gts: Sequence[BBox],
        cfg: TrainConfig, seed: int = 0, optimizer=None, start_epoch: int = 0,
        on_step: Callable[[dict], None] | None = None):
    """Train for ``cfg.epochs`` epochs over in-memory tensors.

    Returns the optimizer and the per-step loss history.
    """
    optimizer = optimizer or make_optimizer(model, cfg.lr0)
    gen = torch.Generator().manual_seed(seed)
    n = query.shape[0]
    history = []
    step = 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = torch.randperm(n, generator=gen).tolist()
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = train_step(model, optimizer, query[idx], reference[idx], [gts[i] for i in idx], lr)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step}")
            history.append(loss)
            if on_step is not None:
                on_step({"event": "step", "epoch": epoch, "step": step, "lr": lr, "loss": loss})
            step += 1
    return optimizer, history


def save_checkpoint(path: str | Path, model: VAGeoNet, optimizer, epoch: int, config: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "epoch": epoch,
            "config": config,
            "model": model.state_dict(),
            "optimizer": None if optimizer is None else optimizer.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a vageo checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {ckpt['version']} is newer than supported {CHECKPOINT_VERSION}")
    return ckpt
