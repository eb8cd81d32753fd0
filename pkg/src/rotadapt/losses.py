"""Loss terms of the two-stage method and their weighted combination.

Every loss is a mean over the batch, so loss weights do not depend on batch size.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import InputError, LossWeights, NumericFault, RotAdaptError, TrainConfig, softmax_probs
from .models import ModelHandle
from .pretext import JigsawPermutationSet, make_jigsaw_batch, make_rotation_batch

COMPONENTS = ("sup_source", "sup_target", "ssl", "ent", "vat")
_LOG_KEYS = {"sup_source": "sup_s", "sup_target": "sup_t", "ssl": "ssl", "ent": "ent", "vat": "vat"}
PROB_FLOOR = 1e-12


def cross_entropy_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if logits.shape[0] == 0:
        raise InputError("cross entropy on an empty batch")
    if labels.shape != logits.shape[:1]:
        raise InputError(f"{logits.shape[0]} logit rows but {tuple(labels.shape)} labels")
    if (labels < 0).any() or (labels >= logits.shape[1]).any():
        raise InputError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def supervised_losses(model: ModelHandle, source_x, source_y, target_x=None, target_y=None):
    """Source and target cross entropy; an absent target batch gives exactly 0."""
    l_src = cross_entropy_loss(model.forward_class(source_x), source_y)
    if target_x is None or target_x.shape[0] == 0:
        return l_src, torch.zeros((), dtype=l_src.dtype)
    return l_src, cross_entropy_loss(model.forward_class(target_x), target_y)


def pretext_loss(model: ModelHandle, x: torch.Tensor, rng: np.random.Generator,
                 perms: Optional[JigsawPermutationSet] = None) -> torch.Tensor:
    """Transform ``x`` for the pretext task and score the pretext head on it."""
    if perms is None:
        xt, y = make_rotation_batch(x, rng)
    else:
        xt, y = make_jigsaw_batch(x, perms, rng)
    return cross_entropy_loss(model.forward_pretext(xt), y)


def rotation_loss(model: ModelHandle, x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    return pretext_loss(model, x, rng)


def entropy_of_probs(p: torch.Tensor) -> torch.Tensor:
    """Per-row entropy with ``0 * ln 0 = 0``."""
    return -(p * torch.log(p.clamp_min(PROB_FLOOR))).sum(-1)


def entropy_loss(model: ModelHandle, x: torch.Tensor) -> torch.Tensor:
    logits = model.forward_class(x)
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(-1).mean()


def kl_rows(p: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Per-row KL(p || q) given q in log space."""
    return (torch.xlogy(p, p) - p * log_q).sum(-1)


def _unit(d: torch.Tensor) -> torch.Tensor:
    dims = tuple(range(1, d.ndim))
    d = d / (PROB_FLOOR + d.abs().amax(dim=dims, keepdim=True))
    return d / torch.sqrt(1e-6 + (d * d).sum(dim=dims, keepdim=True))


def vat_direction(model: ModelHandle, x: torch.Tensor, clean_probs: torch.Tensor, epsilon: float,
                  xi: float, power_iterations: int, rng: np.random.Generator) -> torch.Tensor:
    """Adversarial perturbation of L2 norm ``epsilon`` per example, via power iteration."""
    d = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)
    for _ in range(power_iterations):
        d = (xi * _unit(d)).requires_grad_(True)
        dist = kl_rows(clean_probs, F.log_softmax(model.forward_class(x + d), dim=-1)).mean()
        (grad,) = torch.autograd.grad(dist, d, allow_unused=True)
        d = torch.zeros_like(d) if grad is None else grad
    r_adv = epsilon * _unit(d.detach())
    if not torch.isfinite(r_adv).all():
        raise NumericFault("non-finite VAT perturbation")
    return r_adv


def vat_divergence(model: ModelHandle, x: torch.Tensor, clean_probs: torch.Tensor,
                   r_adv: torch.Tensor) -> torch.Tensor:
    """Mean KL(clean_probs || p(x + r_adv)); differentiable in the model parameters."""
    return kl_rows(clean_probs, F.log_softmax(model.forward_class(x + r_adv), dim=-1)).mean()


def vat_loss(model: ModelHandle, x: torch.Tensor, epsilon: float, xi: float,
             power_iterations: int, rng: np.random.Generator) -> torch.Tensor:
    if epsilon <= 0 or xi <= 0 or power_iterations < 1:
        raise InputError("VAT needs epsilon > 0, xi > 0 and power_iterations >= 1")
    with torch.no_grad():
        clean = softmax_probs(model.forward_class(x))
    r_adv = vat_direction(model, x, clean, epsilon, xi, power_iterations, rng)
    return vat_divergence(model, x, clean, r_adv)


def kd_loss(teacher_probs: torch.Tensor, student_logits: torch.Tensor,
            temperature: float = 1.0) -> torch.Tensor:
    """Mean KL(teacher || softmax(student / T))."""
    teacher_probs = torch.as_tensor(teacher_probs, dtype=student_logits.dtype)
    if teacher_probs.shape != student_logits.shape:
        raise InputError(f"teacher {tuple(teacher_probs.shape)} vs student {tuple(student_logits.shape)}")
    if (teacher_probs < 0).any() or ((teacher_probs.sum(-1) - 1).abs() > 1e-4).any():
        raise InputError("teacher rows must be probability vectors")
    return kl_rows(teacher_probs, F.log_softmax(student_logits / temperature, dim=-1)).mean()


@dataclass
class Batches:
    source_x: torch.Tensor
    source_y: torch.Tensor
    target_x: Optional[torch.Tensor] = None
    target_y: Optional[torch.Tensor] = None
    unlabeled_x: Optional[torch.Tensor] = None


@dataclass
class LossReport:
    total: float
    components: dict[str, float]
    weights: LossWeights
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False)

    def format_line(self, iteration: int, prefix: str = "") -> str:
        parts = [f"iter={iteration}", f"total={self.total:.6g}"]
        parts += [f"{_LOG_KEYS[k]}={self.components[k]:.6g}" for k in COMPONENTS]
        return prefix + " ".join(parts)


def _guard(name: str, fn, *args):
    try:
        return fn(*args)
    except RotAdaptError as exc:
        raise type(exc)(f"{name} loss failed: {exc}") from exc


def combined_objective(model: ModelHandle, batches: Batches, weights: LossWeights,
                       config: Optional[TrainConfig], rng: np.random.Generator,
                       perms: Optional[JigsawPermutationSet] = None) -> LossReport:
    """Weighted sum of the five loss terms.

    Terms with zero weight are not evaluated and report 0. Each stochastic
    term gets its own child seed drawn up front, so the result is exactly
    linear in every weight for a fixed ``rng`` state.
    """
    config = config or TrainConfig(total_iterations=0)
    ssl_seed, vat_seed = rng.integers(0, 2**63 - 1, size=2)
    zero = torch.zeros((), dtype=batches.source_x.dtype)
    parts = dict.fromkeys(COMPONENTS, zero)

    if weights.lambda_s > 0:
        parts["sup_source"] = _guard("sup_source", lambda: cross_entropy_loss(
            model.forward_class(batches.source_x), batches.source_y))
    if weights.lambda_t > 0 and batches.target_x is not None and batches.target_x.shape[0]:
        parts["sup_target"] = _guard("sup_target", lambda: cross_entropy_loss(
            model.forward_class(batches.target_x), batches.target_y))
    needs_unlabeled = weights.lambda_ssl > 0 or weights.lambda_ent > 0 or weights.lambda_vat > 0
    if needs_unlabeled and batches.unlabeled_x is None:
        raise InputError("nonzero unlabeled-loss weight but no unlabeled batch")
    if weights.lambda_ssl > 0:
        x = batches.unlabeled_x
        if config.pretext_domains == "source_and_target":
            x = torch.cat([x, batches.source_x])
        parts["ssl"] = _guard("ssl", pretext_loss, model, x, np.random.default_rng(ssl_seed), perms)
    if weights.lambda_ent > 0:
        parts["ent"] = _guard("ent", entropy_loss, model, batches.unlabeled_x)
    if weights.lambda_vat > 0:
        parts["vat"] = _guard("vat", vat_loss, model, batches.unlabeled_x, config.vat_epsilon,
                              config.vat_xi, config.vat_power_iterations, np.random.default_rng(vat_seed))

    lam = {"sup_source": weights.lambda_s, "sup_target": weights.lambda_t, "ssl": weights.lambda_ssl,
           "ent": weights.lambda_ent, "vat": weights.lambda_vat}
    total = sum(lam[k] * parts[k] for k in COMPONENTS)
    if not torch.isfinite(total):
        bad = [k for k in COMPONENTS if not torch.isfinite(parts[k])]
        raise NumericFault(f"non-finite objective (components {bad})")
    return LossReport(total=float(total.detach()), components={k: float(v.detach()) for k, v in parts.items()},
                      weights=weights, total_tensor=total)
