"""Wasserstein critics for the two image domains.

``GlobalCritic`` scores whole lensed images with a truncated VGG trunk and a
pooled linear head. ``PatchCritic`` scores lensless images patch by patch;
its per-image score is the mean of the score map.  Scores are unbounded
unless ``CriticSpec.bounded`` is set.
"""

from __future__ import annotations

import logging

import torch
import torch.nn as nn
import torchvision
from torchvision.models.vgg import make_layers

from .config import CriticSpec
from .errors import NumericalError, PretrainedWeightsUnavailable

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _parse_cfg(backbone: str):
    """``"vgg:16,M,32"`` -> ``[16, "M", 32]``."""
    items = backbone.split(":", 1)[1].split(",")
    return [item.strip() if item.strip() == "M" else int(item) for item in items]


def _vgg_trunk(spec: CriticSpec):
    """Return ``(features, pretrained_loaded)``."""
    if spec.backbone.startswith("vgg:"):
        if spec.pretrained and not spec.allow_random_init:
            raise PretrainedWeightsUnavailable(f"custom backbone {spec.backbone!r} has no pretrained weights")
        return make_layers(_parse_cfg(spec.backbone), batch_norm=False), False

    loaded = False
    if spec.pretrained:
        try:
            model = torchvision.models.get_model(spec.backbone, weights="DEFAULT")
            loaded = True
        except Exception as err:  # download or lookup failure
            if not spec.allow_random_init:
                raise PretrainedWeightsUnavailable(
                    f"could not load pretrained {spec.backbone!r} ({err}); set allow_random_init to proceed"
                ) from err
            log.warning("pretrained %s unavailable, using random init: %s", spec.backbone, err)
            model = torchvision.models.get_model(spec.backbone, weights=None)
    else:
        model = torchvision.models.get_model(spec.backbone, weights=None)
    return model.features, loaded


def _first_conv_in(features: nn.Sequential) -> int:
    return next(m for m in features if isinstance(m, nn.Conv2d)).in_channels


def _last_channels(features: nn.Sequential) -> int:
    return [m for m in features if isinstance(m, nn.Conv2d)][-1].out_channels


class GlobalCritic(nn.Module):
    def __init__(self, spec: CriticSpec):
        super().__init__()
        self.spec = spec
        features, self.pretrained_loaded = _vgg_trunk(spec)
        if spec.truncation:
            features = features[: len(features) - spec.truncation]
        if _first_conv_in(features) != spec.in_channels:
            first = features[0]
            features[0] = nn.Conv2d(spec.in_channels, first.out_channels, first.kernel_size, padding=first.padding)
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(_last_channels(features), 1)
        self.normalize = self.pretrained_loaded and spec.in_channels == 3
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        if self.normalize:
            x = (x - self.mean) / self.std
        h = self.pool(self.features(x)).flatten(1)
        score = self.head(h).squeeze(1)
        return torch.sigmoid(score) if self.spec.bounded else score


class PatchCritic(nn.Module):
    """4x4 convolutions ending in a one-channel score map.

    All feature layers stride by two except the last (when there is more than
    one), which with the final stride-1 head gives the usual 70x70 receptive
    field for four layers.
    """

    def __init__(self, spec: CriticSpec):
        super().__init__()
        self.spec = spec
        b = spec.patch_base_channels
        n = spec.patch_layers
        layers = []
        c = spec.in_channels
        for i in range(n):
            c_next = b * 2 ** min(i, 3)
            stride = 1 if (i == n - 1 and n > 1) else 2
            layers.append(nn.Conv2d(c, c_next, 4, stride=stride, padding=1))
            if i > 0 and spec.norm == "instance":
                layers.append(nn.InstanceNorm2d(c_next, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            c = c_next
        layers.append(nn.Conv2d(c, 1, 4, stride=1, padding=1))
        self.layers = nn.Sequential(*layers)

    def score_map(self, x):
        s = self.layers(x)
        return torch.sigmoid(s) if self.spec.bounded else s

    def forward(self, x):
        return self.score_map(x).mean(dim=(1, 2, 3))

    def receptive_field(self) -> int:
        r = 1
        for m in reversed(self.layers):
            if isinstance(m, nn.Conv2d):
                r = (r - 1) * m.stride[0] + m.kernel_size[0]
        return r


def build_critic(spec: CriticSpec) -> nn.Module:
    return GlobalCritic(spec) if spec.kind == "global" else PatchCritic(spec)


def critic_forward(D: nn.Module, image: torch.Tensor) -> torch.Tensor:
    """Per-image critic scores ``(N,)`` with a NaN guard."""
    score = D(image)
    if not torch.isfinite(score).all():
        raise NumericalError(f"critic {type(D).__name__} produced non-finite scores")
    return score
