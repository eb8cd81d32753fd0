"""Stage-1 multi-task training: supervised source/target + pretext (+ ENT/VAT)."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .core import ConfigError, DatasetSplit, InputError, NumericFault, Pool, TrainConfig
from .losses import Batches, combined_objective
from .models import ModelHandle
from .pretext import build_jigsaw_permutations

logger = logging.getLogger(__name__)


def lr_at(progress: float, base_lr: float, alpha: float = 10.0, beta: float = 0.75) -> float:
    """Annealed rate ``base_lr / (1 + alpha * p) ** beta`` for progress p in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise InputError(f"progress must lie in [0, 1], got {progress}")
    if base_lr <= 0:
        raise InputError("base_lr must be > 0")
    return base_lr / (1.0 + alpha * progress) ** beta


def sgd_step(model: ModelHandle, gradients: dict[str, torch.Tensor], lr_trunk: float, lr_heads: float,
             momentum: float, weight_decay: float, buffers: dict[str, torch.Tensor]) -> ModelHandle:
    """In-place momentum SGD: ``v = m*v + g + wd*theta; theta -= lr*v``.

    Trunk parameters use ``lr_trunk``, both heads ``lr_heads``. A parameter
    missing from ``gradients`` is treated as having zero gradient. ``buffers``
    holds the momentum slots and is updated in place.
    """
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = gradients.get(name)
            g = torch.zeros_like(p) if g is None else g
            if g.shape != p.shape:
                raise InputError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            if not torch.isfinite(g).all():
                raise NumericFault(f"non-finite gradient for parameter {name}")
            d = g + weight_decay * p if weight_decay else g.clone()
            v = buffers.get(name)
            v = d if v is None else v.mul_(momentum).add_(d)
            buffers[name] = v
            p.sub_((lr_trunk if model.is_trunk_param(name) else lr_heads) * v)
    return model


class PoolCycler:
    """Endless batches of indices; each epoch visits every index once, reshuffled per epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ConfigError("cannot cycle over an empty pool")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.epoch = 0
        self._order = rng.permutation(n)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
                self.epoch += 1
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)


@torch.no_grad()
def evaluate(model: ModelHandle, pool: Pool, batch_size: int = 256) -> float:
    """Top-1 accuracy of the class head on a labeled pool, in eval mode."""
    if len(pool) == 0:
        raise InputError("cannot evaluate on an empty pool")
    if not pool.is_labeled:
        raise InputError(f"pool {pool.domain!r} contains unlabeled examples")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    correct = 0
    try:
        for start in range(0, len(pool), batch_size):
            idx = np.arange(start, min(start + batch_size, len(pool)))
            pred = model.forward_class(pool.batch(idx, dtype=dtype)).argmax(1)
            correct += int((pred == pool.labels_at(idx)).sum())
    finally:
        model.train(was_training)
    return correct / len(pool)


@dataclass
class TrainState:
    iteration: int = 0
    best_val_acc: float = -1.0
    best_checkpoint: Optional[Checkpoint] = None
    best_path: Optional[Path] = None
    momentum_buffers: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def _check_pools(config: TrainConfig, split: DatasetSplit) -> tuple[bool, bool]:
    w = config.weights
    use_target = w.lambda_t > 0
    use_unlabeled = w.lambda_ssl > 0 or w.lambda_ent > 0 or w.lambda_vat > 0
    if len(split.labeled_source) == 0:
        raise ConfigError("labeled_source pool is empty")
    if len(split.val_target) == 0:
        raise ConfigError("val_target pool is empty")
    if use_target and len(split.labeled_target) == 0:
        raise ConfigError("lambda_t > 0 but labeled_target pool is empty (use UDA mode)")
    if use_unlabeled and len(split.unlabeled_target) == 0:
        raise ConfigError("unlabeled losses enabled but unlabeled_target pool is empty")
    return use_target, use_unlabeled


def train_stage1(config: TrainConfig, split: DatasetSplit, model: ModelHandle,
                 out: Optional[Path] = None, log: Optional[Callable[[str], None]] = None,
                 log_every: int = 1) -> Checkpoint:
    """Run the joint objective for ``config.total_iterations`` steps; return the best-val checkpoint.

    Validation runs every ``eval_every`` steps and always at the last step.
    With ``out`` set, every improvement is also written to disk there.
    """
    log = log or logger.info
    use_target, use_unlabeled = _check_pools(config, split)
    perms = None
    if config.pretext == "jigsaw" and config.weights.lambda_ssl > 0:
        size = model.spec.image_size
        if size % config.jigsaw_grid:
            raise ConfigError(f"image size {size} not divisible by jigsaw grid {config.jigsaw_grid}")
        perms = build_jigsaw_permutations(config.jigsaw_permutations, config.jigsaw_grid,
                                          np.random.default_rng(config.seed))
        if model.spec.pretext_classes != perms.size:
            raise ConfigError(f"pretext head has {model.spec.pretext_classes} outputs, jigsaw needs {perms.size}")
    elif config.weights.lambda_ssl > 0 and model.spec.pretext_classes != 4:
        raise ConfigError("rotation pretext needs a 4-way pretext head")

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    src = PoolCycler(len(split.labeled_source), config.batch_source, np.random.default_rng(seeds[0]))
    tgt = PoolCycler(len(split.labeled_target), config.batch_labeled,
                     np.random.default_rng(seeds[1])) if use_target else None
    unl = PoolCycler(len(split.unlabeled_target), config.batch_unlabeled,
                     np.random.default_rng(seeds[2])) if use_unlabeled else None
    loss_rng = np.random.default_rng(seeds[3])
    dtype = next(model.parameters()).dtype
    state = TrainState()
    cfg_hash = config.digest()
    T = config.total_iterations

    def validate(t: int) -> None:
        acc = evaluate(model, split.val_target)
        state.history.append((t, acc))
        log(f"val iter={t} acc={acc:.6g}")
        if acc > state.best_val_acc:
            state.best_val_acc = acc
            state.best_checkpoint = Checkpoint.from_model(
                model, iteration=t, val_accuracy=acc, seed=config.seed, config_hash=cfg_hash)
            if out is not None:
                state.best_path = save_checkpoint(state.best_checkpoint, out)

    if T == 0:
        validate(0)
    model.train()
    for t in range(1, T + 1):
        state.iteration = t
        i = src.next_indices()
        batches = Batches(split.labeled_source.batch(i, dtype), split.labeled_source.labels_at(i))
        if tgt is not None:
            j = tgt.next_indices()
            batches.target_x = split.labeled_target.batch(j, dtype)
            batches.target_y = split.labeled_target.labels_at(j)
        if unl is not None:
            batches.unlabeled_x = split.unlabeled_target.batch(unl.next_indices(), dtype)
        try:
            report = combined_objective(model, batches, config.weights, config, loss_rng, perms)
            model.zero_grad(set_to_none=True)
            if report.total_tensor.requires_grad:
                report.total_tensor.backward()
            grads = {n: p.grad for n, p in model.named_parameters() if p.grad is not None}
            scale = lr_at(t / T, 1.0, config.alpha, config.beta)
            sgd_step(model, grads, config.lr_trunk * scale, config.lr_heads * scale,
                     config.momentum, config.weight_decay, state.momentum_buffers)
        except NumericFault as exc:
            raise NumericFault(f"iteration {t}: {exc}", checkpoint=state.best_checkpoint) from exc
        if t % log_every == 0 or t == 1:
            log(report.format_line(t))
        if t % config.eval_every == 0 or t == T:
            validate(t)

    best = copy.copy(state.best_checkpoint)
    best.extra = {"val_history": state.history, "best_iteration": best.iteration,
                  "final_iteration": state.iteration}
    if out is not None:
        save_checkpoint(best, out)
    return best
