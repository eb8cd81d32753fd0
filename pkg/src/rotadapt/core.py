"""Shared domain types, configuration and numeric helpers."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

ROTATION_CLASSES = 4
UNLABELED = -1


class RotAdaptError(Exception):
    """Base class for all library errors."""


class InputError(RotAdaptError, ValueError):
    """Malformed argument: wrong shape, out-of-range label, bad parameter."""


class ConfigError(RotAdaptError):
    """Inconsistent experiment configuration, detected before training."""


class DataError(RotAdaptError):
    """Missing, corrupt or inconsistent dataset files."""


class NumericFault(RotAdaptError, ArithmeticError):
    """Non-finite values appeared in a forward or backward pass.

    ``checkpoint`` carries the last good checkpoint when raised by a training
    loop, so callers can keep it.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class Example:
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    label: Optional[int]
    domain: str
    id: str


class Pool:
    """An ordered collection of examples backed by one image array.

    Labels equal to ``UNLABELED`` are absent. The pool counts how often its
    images and labels are read so tests can verify that training code leaves
    inactive pools (and hidden labels) alone.
    """

    def __init__(self, images: np.ndarray, labels: Optional[Sequence[int]], ids: Sequence[str],
                 domain: str):
        images = np.ascontiguousarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise InputError(f"pool images must be N x H x W x C, got shape {images.shape}")
        n = images.shape[0]
        if labels is None:
            labels = np.full(n, UNLABELED, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        ids = list(ids)
        if len(labels) != n or len(ids) != n:
            raise InputError(f"pool has {n} images, {len(labels)} labels and {len(ids)} ids")
        if len(set(ids)) != n:
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise InputError(f"duplicate ids in pool: {dupes[:5]}")
        self.images = images
        self.labels = labels
        self.ids = ids
        self.domain = domain
        self._nchw = torch.from_numpy(images).permute(0, 3, 1, 2)
        self.image_reads = 0
        self.label_reads = 0

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Example:
        label = int(self.labels[i])
        return Example(self.images[i], None if label == UNLABELED else label, self.domain,
                       self.ids[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __repr__(self) -> str:
        return f"Pool(domain={self.domain!r}, n={len(self)}, labeled={self.is_labeled})"

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def is_labeled(self) -> bool:
        return len(self) > 0 and bool((self.labels != UNLABELED).all())

    def batch(self, indices, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """Images at ``indices`` as an N x C x H x W tensor."""
        self.image_reads += 1
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return self._nchw.index_select(0, idx).to(dtype).contiguous()

    def labels_at(self, indices) -> torch.Tensor:
        self.label_reads += 1
        y = self.labels[np.asarray(indices, dtype=np.int64)]
        if (y == UNLABELED).any():
            raise InputError(f"pool {self.domain!r} has unlabeled examples among requested indices")
        return torch.from_numpy(y.copy())

    def subset(self, indices, strip_labels: bool = False) -> "Pool":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if strip_labels else self.labels[idx]
        return Pool(self.images[idx], labels, [self.ids[i] for i in idx], self.domain)

    def stripped(self) -> "Pool":
        return self.subset(np.arange(len(self)), strip_labels=True)

    @classmethod
    def from_examples(cls, examples: Iterable[Example], domain: Optional[str] = None) -> "Pool":
        examples = list(examples)
        if not examples:
            raise InputError("cannot build a pool from zero examples without an image shape")
        images = np.stack([e.image for e in examples])
        labels = [UNLABELED if e.label is None else e.label for e in examples]
        return cls(images, labels, [e.id for e in examples], domain or examples[0].domain)

    @classmethod
    def empty(cls, image_shape: tuple[int, int, int], domain: str) -> "Pool":
        return cls(np.zeros((0, *image_shape), dtype=np.float32), [], [], domain)

    @classmethod
    def concat(cls, pools: Sequence["Pool"], domain: Optional[str] = None) -> "Pool":
        if not pools:
            raise InputError("concat needs at least one pool")
        images = np.concatenate([p.images for p in pools])
        labels = np.concatenate([p.labels for p in pools])
        ids = [i for p in pools for i in p.ids]
        return cls(images, labels, ids, domain or pools[0].domain)


@dataclass
class DatasetSplit:
    labeled_source: Pool
    labeled_target: Pool
    unlabeled_target: Pool
    val_target: Pool
    test_target: Pool

    def check(self, num_classes: int, k: Optional[int] = None) -> None:
        """Raise ``DataError`` if the split breaks its structural invariants."""
        ids = [set(p.ids) for p in (self.labeled_target, self.val_target, self.test_target)]
        for a in range(3):
            for b in range(a + 1, 3):
                if ids[a] & ids[b]:
                    raise DataError("labeled/val/test target pools share ids")
        for name in ("labeled_source", "labeled_target", "val_target", "test_target"):
            pool = getattr(self, name)
            if len(pool) and not pool.is_labeled:
                raise DataError(f"{name} contains unlabeled examples")
            if len(pool) and (pool.labels.max() >= num_classes or pool.labels.min() < 0):
                raise DataError(f"{name} has labels outside [0, {num_classes})")
        if k is not None and len(self.labeled_target):
            counts = np.bincount(self.labeled_target.labels, minlength=num_classes)
            if (counts != k).any():
                raise DataError(f"labeled_target is not {k}-shot: per-class counts {counts.tolist()}")


@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    lambda_ssl: float = 1.0
    lambda_ent: float = 0.0
    lambda_vat: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{f.name} must be a finite non-negative number, got {v}")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


PRETEXTS = ("rotation", "jigsaw")
PRETEXT_DOMAINS = ("target_only", "source_and_target")


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    total_iterations: int = 30000
    lr_trunk: float = 0.001
    lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    alpha: float = 10.0
    beta: float = 0.75
    batch_source: int = 32
    batch_labeled: int = 32
    batch_unlabeled: int = 32
    eval_every: int = 500
    seed: int = 0
    pretext: str = "rotation"
    pretext_domains: str = "target_only"
    jigsaw_grid: int = 3
    jigsaw_permutations: int = 30
    vat_epsilon: float = 2.0
    vat_xi: float = 1e-6
    vat_power_iterations: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_iterations < 0:
            raise ConfigError("total_iterations must be >= 0")
        if self.lr_trunk <= 0 or self.lr_heads <= 0:
            raise ConfigError("learning rates must be > 0")
        for name in ("batch_source", "batch_labeled", "batch_unlabeled", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.total_iterations and self.total_iterations < self.eval_every:
            raise ConfigError(f"total_iterations ({self.total_iterations}) must be >= "
                              f"eval_every ({self.eval_every})")
        if self.pretext not in PRETEXTS:
            raise ConfigError(f"pretext must be one of {PRETEXTS}, got {self.pretext!r}")
        if self.pretext_domains not in PRETEXT_DOMAINS:
            raise ConfigError(f"pretext_domains must be one of {PRETEXT_DOMAINS}")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("momentum must lie in [0, 1) and weight_decay must be >= 0")
        if self.vat_epsilon <= 0 or self.vat_xi <= 0 or self.vat_power_iterations < 1:
            raise ConfigError("VAT needs epsilon > 0, xi > 0 and power_iterations >= 1")

    def to_flat(self) -> dict:
        """Flat key-value form; loss weights appear as ``lambda_*`` keys."""
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "weights"}
        out.update(self.weights.as_dict())
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        flat = dict(flat)
        weight_keys = {f.name for f in dataclasses.fields(LossWeights)}
        known = {f.name for f in dataclasses.fields(cls)} | weight_keys
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        weights = LossWeights(**{k: float(flat.pop(k)) for k in list(flat) if k in weight_keys})
        return cls(weights=weights, **flat)

    def replace(self, **changes) -> "TrainConfig":
        flat = self.to_flat()
        flat.update(changes)
        return TrainConfig.from_flat(flat)

    def digest(self) -> str:
        return config_hash(self.to_flat())


def config_hash(flat: dict) -> str:
    blob = json.dumps(flat, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config_file(path) -> dict:
    """Read a flat JSON object of config keys."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
        raise ConfigError(f"config {path} must be a flat key-value object")
    return data


def softmax_probs(logits):
    """Row-wise softmax, stable under large logits.

    Accepts a torch tensor (stays differentiable) or anything numpy can
    convert; returns the same kind.
    """
    as_numpy = not isinstance(logits, torch.Tensor)
    t = torch.as_tensor(np.asarray(logits, dtype=np.float64)) if as_numpy else logits
    if not torch.isfinite(t).all():
        raise NumericFault("softmax_probs received non-finite logits")
    p = torch.softmax(t, dim=-1)
    return p.numpy() if as_numpy else p


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
