"""Desk-scale experiment runner on the synthetic glyph pair.

A run has three parts. First, a trunk is pretrained once on neutral-style
glyphs that are never evaluated; it plays the role of a generic pretrained
backbone. Then stage 1 trains teachers from that trunk. Finally, stage 2
distills them into a student that starts from the same trunk.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .core import DatasetSplit, LossWeights, TrainConfig, config_hash
from .data import build_uncurated_pool
from .distill import DistillConfig, distill_train
from .models import ModelHandle, ModelSpec, build_model, set_pretrained_provider
from .report import method_weights
from .synthetic import PRETRAIN_GLYPHS, SyntheticPair, SyntheticSpec, generate_pretrain_pool
from .trainer import evaluate, train_stage1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSettings:
    # pretraining
    pretrain_per_class: int = 200
    pretrain_iterations: int = 2000
    pretrain_lr: float = 0.1
    pretrain_batch: int = 64
    pretrain_seed: int = 0
    # stage 1; heads learn 10x faster than the pretrained trunk
    iterations: int = 800
    lr_trunk: float = 0.01
    lr_heads: float = 0.1
    eval_every: int = 100
    arch_preset: str = "small"
    lambda_ent: Optional[float] = None
    # stage 2
    kd_epochs: int = 30
    kd_drop_every: int = 10
    kd_lr: float = 0.01
    width: int = 16

    def model_spec(self, num_classes: int, pretext_classes: int = 4) -> ModelSpec:
        return ModelSpec(num_classes=num_classes, pretext_classes=pretext_classes, width=self.width)

    def train_config(self, weights: LossWeights, seed: int, pretext: str = "rotation") -> TrainConfig:
        return TrainConfig(weights=weights, total_iterations=self.iterations, lr_trunk=self.lr_trunk,
                           lr_heads=self.lr_heads, eval_every=self.eval_every, seed=seed, pretext=pretext,
                           jigsaw_grid=4)

    def distill_config(self, seed: int, pool: str = "standard") -> DistillConfig:
        return DistillConfig(epochs=self.kd_epochs, lr=self.kd_lr, drop_every=self.kd_drop_every,
                             seed=seed, pool=pool)


_TRUNK_CACHE: dict[str, dict] = {}


def pretrain_checkpoint(settings: DeskSettings = DeskSettings(), image_spec: SyntheticSpec = SyntheticSpec(),
                        log=None, log_every: int = 1) -> Checkpoint:
    """Supervised pretraining on the neutral glyph set, 10% held out for validation."""
    pool = generate_pretrain_pool(settings.pretrain_per_class, image_spec, seed=settings.pretrain_seed)
    order = np.random.default_rng(settings.pretrain_seed).permutation(len(pool))
    n_val = len(pool) // 10
    train, val = pool.subset(order[n_val:]), pool.subset(order[:n_val])
    empty = val.subset([])
    split = DatasetSplit(train, empty, empty, val, val)
    cfg = TrainConfig(weights=LossWeights(lambda_s=1.0, lambda_t=0.0, lambda_ssl=0.0),
                      total_iterations=settings.pretrain_iterations, lr_trunk=settings.pretrain_lr,
                      lr_heads=settings.pretrain_lr, batch_source=settings.pretrain_batch,
                      eval_every=max(1, settings.pretrain_iterations), seed=settings.pretrain_seed)
    spec = replace(settings.model_spec(len(PRETRAIN_GLYPHS)), image_size=image_spec.image_size,
                   channels=image_spec.channels)
    model = build_model(spec, seed=settings.pretrain_seed)
    ckpt = train_stage1(cfg, split, model, log=log or (lambda s: None), log_every=log_every)
    ckpt.extra["config"] = cfg.to_flat()
    return ckpt


def trunk_state(ckpt: Checkpoint) -> dict:
    return {k[len("trunk."):]: torch.from_numpy(v.copy()) for k, v in ckpt.state.items() if k.startswith("trunk.")}


def pretrain_trunk(settings: DeskSettings = DeskSettings(), image_spec: SyntheticSpec = SyntheticSpec()):
    """Trunk state dict from ``pretrain_checkpoint``, cached per settings."""
    fields = {k: v for k, v in asdict(settings).items() if k.startswith("pretrain_") or k == "width"}
    key = config_hash({**fields, "image_size": image_spec.image_size, "channels": image_spec.channels})
    if key not in _TRUNK_CACHE:
        ckpt = pretrain_checkpoint(settings, image_spec)
        logger.info("pretrained trunk: val acc %.3f", ckpt.val_accuracy)
        _TRUNK_CACHE[key] = trunk_state(ckpt)
    return _TRUNK_CACHE[key]


def use_trunk(state: Optional[dict]) -> None:
    """Install ``state`` as the pretrained provider (None removes it)."""
    set_pretrained_provider(None if state is None else (lambda arch: state))


def split_for(pair: SyntheticPair, data_mode: str) -> DatasetSplit:
    if data_mode == "standard":
        return pair.split
    s = pair.split
    unl = build_uncurated_pool(s.unlabeled_target, pair.distractors, pair.spec.num_classes)
    return DatasetSplit(s.labeled_source, s.labeled_target, unl, s.val_target, s.test_target)


@dataclass
class RunResult:
    method: str
    data: str
    seed: int
    test_acc: float
    checkpoint: Checkpoint


def run_stage1(pair: SyntheticPair, tag: str, seed: int, settings: DeskSettings = DeskSettings(),
               data_mode: str = "standard", mode: str = "ssda") -> RunResult:
    weights, pretext = method_weights(tag, mode, settings.arch_preset, lambda_ent=settings.lambda_ent)
    cfg = settings.train_config(weights, seed, pretext)
    pretext_classes = cfg.jigsaw_permutations if pretext == "jigsaw" else 4
    use_trunk(pretrain_trunk(settings, pair.spec))
    model = build_model(settings.model_spec(pair.spec.num_classes, pretext_classes), seed=seed, pretrained=True)
    split = split_for(pair, data_mode)
    ckpt = train_stage1(cfg, split, model, log=lambda s: None)
    acc = evaluate(ckpt.build(), split.test_target)
    return RunResult(tag, data_mode, seed, acc, ckpt)


def run_distill(pair: SyntheticPair, teachers: Sequence[ModelHandle], seed: int,
                settings: DeskSettings = DeskSettings(), data_mode: str = "standard") -> RunResult:
    use_trunk(pretrain_trunk(settings, pair.spec))
    # student seed differs from the teacher's so its fresh class head is not a copy
    student = build_model(settings.model_spec(pair.spec.num_classes), seed=seed + 1000, pretrained=True)
    split = split_for(pair, data_mode)
    ckpt = distill_train(settings.distill_config(seed, data_mode), split.unlabeled_target, student, teachers,
                         log=lambda s: None)
    acc = evaluate(ckpt.build(), split.test_target)
    return RunResult("kd", data_mode, seed, acc, ckpt)


def synthetic_pair_for(seed: int, **overrides):
    from .synthetic import generate_synthetic_pair

    return generate_synthetic_pair(replace(SyntheticSpec(seed=seed), **overrides))
