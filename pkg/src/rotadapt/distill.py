"""Stage-2 self-distillation from frozen teacher(s) into a student on unlabeled target data."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .core import ConfigError, InputError, Pool, config_hash, softmax_probs
from .losses import kd_loss
from .models import ModelHandle
from .trainer import evaluate, sgd_step

logger = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    epochs: int = 10
    lr: float = 0.01
    lr_drop: float = 0.1
    drop_every: int = 3
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0005
    temperature: float = 1.0
    seed: int = 0
    pool: str = "standard"  # or "uncurated"; recorded in metadata only
    select_best: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr < 0 or self.batch_size < 1 or self.drop_every < 1 or self.temperature <= 0:
            raise ConfigError("distillation needs lr >= 0, batch_size >= 1, drop_every >= 1, temperature > 0")
        if self.pool not in ("standard", "uncurated"):
            raise ConfigError(f"pool must be 'standard' or 'uncurated', got {self.pool!r}")

    def lr_for_epoch(self, epoch: int) -> float:
        return self.lr * self.lr_drop ** (epoch // self.drop_every)

    def digest(self) -> str:
        return config_hash(vars(self))


@torch.no_grad()
def ensemble_probs(teachers: Sequence[ModelHandle], x: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Arithmetic mean of the teachers' class probabilities."""
    if not teachers:
        raise InputError("need at least one teacher")
    probs = []
    for t in teachers:
        t.eval()
        probs.append(softmax_probs(t.forward_class(x) / temperature))
    widths = {p.shape[1] for p in probs}
    if len(widths) != 1:
        raise InputError(f"teachers disagree on the number of classes: {sorted(widths)}")
    return torch.stack(probs).mean(0)


def distill_train(cfg: DistillConfig, pool: Pool, student: ModelHandle, teachers: Sequence[ModelHandle],
                  eval_pool: Optional[Pool] = None, val_pool: Optional[Pool] = None,
                  out: Optional[Path] = None, log: Optional[Callable[[str], None]] = None) -> Checkpoint:
    """Train ``student`` to match the teacher ensemble on ``pool`` for ``cfg.epochs`` epochs.

    Only images are read from ``pool``. Returns the final-epoch student, or
    the best one on ``val_pool`` when ``cfg.select_best`` is set.
    """
    log = log or logger.info
    if not teachers:
        raise ConfigError("distillation needs at least one teacher")
    widths = {t.spec.num_classes for t in teachers}
    if len(widths) != 1 or student.spec.num_classes not in widths:
        raise ConfigError(f"student ({student.spec.num_classes}) and teacher widths {sorted(widths)} differ")
    if len(pool) == 0:
        raise ConfigError("distillation pool is empty")
    for t in teachers:
        t.eval()
        t.requires_grad_(False)

    dtype = next(student.parameters()).dtype
    rng = np.random.default_rng(cfg.seed)
    probe = pool.batch(np.arange(min(len(pool), 256)), dtype)
    probe_targets = ensemble_probs(teachers, probe, cfg.temperature)
    buffers: dict[str, torch.Tensor] = {}
    digest = cfg.digest()
    meta = {"seed": cfg.seed, "config_hash": digest}

    def snapshot(epoch: int, val_acc: float = 0.0) -> Checkpoint:
        return Checkpoint.from_model(student, iteration=epoch, val_accuracy=val_acc, **meta)

    def probe_loss() -> float:
        with torch.no_grad():
            return float(kd_loss(probe_targets, student.forward_class(probe) / cfg.temperature))

    history, best, best_acc = [], snapshot(0), -1.0
    step = 0
    student.train()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_for_epoch(epoch)
        order = rng.permutation(len(pool))
        for start in range(0, len(order), cfg.batch_size):
            x = pool.batch(order[start:start + cfg.batch_size], dtype)
            target = ensemble_probs(teachers, x, cfg.temperature)
            loss = kd_loss(target, student.forward_class(x), cfg.temperature)
            student.zero_grad(set_to_none=True)
            loss.backward()
            grads = {n: p.grad for n, p in student.named_parameters() if p.grad is not None}
            sgd_step(student, grads, lr, lr, cfg.momentum, cfg.weight_decay, buffers)
            step += 1
            log(f"kd iter={step} total={float(loss.detach()):.6g}")
        entry = {"epoch": epoch + 1, "probe_kd": probe_loss(), "lr": lr}
        if eval_pool is not None:
            entry["eval_acc"] = evaluate(student, eval_pool)
        if val_pool is not None:
            entry["val_acc"] = evaluate(student, val_pool)
            log(f"kd val iter={step} acc={entry['val_acc']:.6g}")
            if cfg.select_best and entry["val_acc"] > best_acc:
                best_acc = entry["val_acc"]
                best = snapshot(epoch + 1, best_acc)
        history.append(entry)

    if not (cfg.select_best and val_pool is not None) or cfg.epochs == 0:
        val_acc = evaluate(student, val_pool) if val_pool is not None else 0.0
        best = snapshot(cfg.epochs, val_acc)
    best.extra = {"kd_history": history, "teachers": len(teachers), "pool": cfg.pool}
    if out is not None:
        save_checkpoint(best, out)
    return best
