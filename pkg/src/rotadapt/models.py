"""Two-headed networks: a shared trunk feeding a class head and a pretext head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import torch
from torch import nn

from .core import InputError, NumericFault

TRUNK_PREFIX = "trunk."


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "small"
    num_classes: int = 8
    pretext_classes: int = 4
    image_size: int = 32
    channels: int = 3
    pretext_head: str = "linear"  # or "mlp": two layers with a ReLU between
    width: int = 16

    def as_dict(self) -> dict:
        return asdict(self)


class ModelHandle(nn.Module):
    """Trunk plus two heads that consume the identical trunk output.

    ``training`` is the train/eval mode flag. The bundled trunks contain no
    stochastic or batch-statistic layers, so both modes compute the same thing.
    """

    def __init__(self, spec: ModelSpec, trunk: nn.Module, feature_dim: int):
        super().__init__()
        self.spec = spec
        self.feature_dim = feature_dim
        self.trunk = trunk
        self.class_head = nn.Linear(feature_dim, spec.num_classes)
        if spec.pretext_head == "linear":
            self.pretext_head = nn.Linear(feature_dim, spec.pretext_classes)
        elif spec.pretext_head == "mlp":
            self.pretext_head = nn.Sequential(
                nn.Linear(feature_dim, feature_dim), nn.ReLU(),
                nn.Linear(feature_dim, spec.pretext_classes))
        else:
            raise InputError(f"unknown pretext head {spec.pretext_head!r}")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.spec.channels, self.spec.image_size, self.spec.image_size)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape or x.shape[0] == 0:
            raise InputError(f"expected a nonempty N x {self.input_shape} batch, got {tuple(x.shape)}")
        return self.trunk(x)

    def forward_class(self, x: torch.Tensor) -> torch.Tensor:
        return _checked(self.class_head(self.features(x)), "class")

    def forward_pretext(self, x: torch.Tensor) -> torch.Tensor:
        return _checked(self.pretext_head(self.features(x)), "pretext")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_class(x)

    def is_trunk_param(self, name: str) -> bool:
        return name.startswith(TRUNK_PREFIX)


def _checked(logits: torch.Tensor, which: str) -> torch.Tensor:
    if not torch.isfinite(logits).all():
        raise NumericFault(f"non-finite {which} logits")
    return logits


def _small_trunk(spec: ModelSpec):
    w = spec.width
    chans = (spec.channels, w, 2 * w, 4 * w)
    layers: list[nn.Module] = []
    for cin, cout in zip(chans, chans[1:]):
        layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(min(4, cout), cout), nn.ReLU(),
                   nn.MaxPool2d(2)]
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), chans[-1]


def _tiny_trunk(spec: ModelSpec):
    # dense, smooth (tanh) trunk small enough for finite-difference checks
    n_in = spec.channels * spec.image_size ** 2
    return nn.Sequential(nn.Flatten(), nn.Linear(n_in, spec.width), nn.Tanh()), spec.width


def _torchvision_trunk(name: str):
    def build(spec: ModelSpec):
        import torchvision.models as tvm

        net = getattr(tvm, name)(weights=None)
        if name.startswith("resnet"):
            dim = net.fc.in_features
            net.fc = nn.Identity()
            return net, dim
        dim = net.classifier[-1].in_features
        net.classifier[-1] = nn.Identity()
        return net, dim
    return build


ARCHITECTURES: dict[str, Callable[[ModelSpec], tuple[nn.Module, int]]] = {
    "small": _small_trunk,
    "tiny": _tiny_trunk,
    "alexnet": _torchvision_trunk("alexnet"),
    "resnet34": _torchvision_trunk("resnet34"),
    "resnet101": _torchvision_trunk("resnet101"),
}

# Optional hook: arch name -> trunk state dict (or None). Used only when set.
_pretrained_provider: Optional[Callable[[str], Optional[dict]]] = None


def set_pretrained_provider(provider: Optional[Callable[[str], Optional[dict]]]) -> None:
    global _pretrained_provider
    _pretrained_provider = provider


def init_parameters(model: nn.Module, generator: torch.Generator) -> None:
    """Seeded re-initialisation of every conv/linear layer."""
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=generator)
            elif isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                nn.init.uniform_(m.weight, -bound, bound, generator=generator)
            else:
                continue
            if m.bias is not None:
                m.bias.zero_()


def build_model(spec: ModelSpec, seed: int = 0, pretrained: bool = False) -> ModelHandle:
    """Construct a seeded model; with ``pretrained`` the provider hook fills the trunk."""
    if spec.arch not in ARCHITECTURES:
        raise InputError(f"unknown architecture {spec.arch!r}; choose from {sorted(ARCHITECTURES)}")
    trunk, dim = ARCHITECTURES[spec.arch](spec)
    model = ModelHandle(spec, trunk, dim)
    init_parameters(model, torch.Generator().manual_seed(seed))
    if pretrained and _pretrained_provider is not None:
        state = _pretrained_provider(spec.arch)
        if state is not None:
            model.trunk.load_state_dict(state)
    return model
