"""Backbone feature extraction and the bi-temporal residual map.

Feature maps are token matrices of shape ``(HW, C)``: one token per spatial
position, row-major over the backbone's output grid.

Toy backbone (the default for tests and toy runs)::

    conv3x3(3 -> 16, stride 2, pad 1, no bias) -> ReLU
    conv3x3(16 -> 32, stride 2, pad 1, no bias) -> ReLU
    conv3x3(32 -> 64, stride 2, pad 1, no bias)

mapping a 32x32 image in [0, 1] to a 4x4 grid of 64-channel tokens.

Imported backbones are torchvision ResNets truncated after ``layer4``.
Weights come from a safetensors archive whose keys are the torchvision
state-dict names (``conv1.weight``, ``bn1.running_mean``,
``layer1.0.conv1.weight``, ... ``layer4.2.bn3.bias``); the ``fc.*`` keys
are ignored.  Inputs are scaled to [0, 1] and normalised with the ImageNet
mean/std the weights were trained with.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RESNET_ARCHS = ("resnet18", "resnet50", "resnet101")


@dataclass(frozen=True)
class FeatureMap:
    tokens: torch.Tensor
    provenance: str

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.tokens.shape)


class ToyBackbone(nn.Module):
    provenance = "toy"

    def __init__(self, widths=(16, 32, 64), seed: int | None = 0):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
            for cin, cout in zip(chans[:-1], chans[1:])
        )
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                for conv in self.convs:
                    fan_in = conv.weight[0].numel()
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
        self.input_size = 32
        self.channels = chans[-1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` in [0, 1] -> ``(B, C, H/8, W/8)``."""
        x = images
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = torch.relu(x)
        return x


class ResNetBackbone(nn.Module):
    provenance = "resnet"

    def __init__(self, arch: str = "resnet101", weights_path=None, input_size: int = 256):
        super().__init__()
        import torchvision

        if arch not in RESNET_ARCHS:
            raise ValueError(f"unsupported backbone {arch!r}; expected one of {RESNET_ARCHS}")
        net = getattr(torchvision.models, arch)(weights=None)
        if weights_path is not None:
            load_backbone_weights(net, weights_path)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
        self.provenance = f"resnet:{arch}"
        self.input_size = input_size
        self.channels = net.fc.in_features
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.body((images - self.mean) / self.std)


def load_backbone_weights(net: nn.Module, path) -> None:
    from safetensors.torch import load_file

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"backbone weights not found: {path}")
    state = {k: v for k, v in load_file(str(path)).items() if not k.startswith("fc.")}
    expected = {k for k in net.state_dict() if not k.startswith("fc.")}
    missing = sorted(expected - state.keys())
    if missing:
        raise KeyError(f"backbone archive lacks {len(missing)} tensors, e.g. {missing[:3]}")
    net.load_state_dict(state, strict=False)


def build_backbone(kind: str = "toy", weights_path=None, seed: int = 0) -> nn.Module:
    if kind == "toy":
        backbone = ToyBackbone(seed=seed)
    else:
        backbone = ResNetBackbone(kind, weights_path)
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    return backbone


def image_to_tensor(image) -> torch.Tensor:
    """``H x W x 3`` uint8 or float image -> ``(3, H, W)`` float32 in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)


def _flatten(grid: torch.Tensor) -> torch.Tensor:
    # (B, C, H, W) -> (B, HW, C)
    return grid.flatten(2).transpose(1, 2)


def extract_batch(images: torch.Tensor, backbone: nn.Module) -> torch.Tensor:
    """``(B, 3, H, W)`` -> ``(B, HW, C)`` feature tokens."""
    size = getattr(backbone, "input_size", None)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
    if size is not None and tuple(images.shape[2:]) != (size, size):
        raise ValueError(f"backbone expects {size}x{size} images, got {tuple(images.shape[2:])}")
    grad = any(p.requires_grad for p in backbone.parameters())
    with torch.set_grad_enabled(grad and torch.is_grad_enabled()):
        return _flatten(backbone(images))


def extract_features(image, backbone: nn.Module) -> FeatureMap:
    tokens = extract_batch(image_to_tensor(image).unsqueeze(0), backbone)[0]
    return FeatureMap(tokens, backbone.provenance)


def residual_map(f_bef: FeatureMap, f_aft: FeatureMap) -> torch.Tensor:
    """``I_di = features(before) - features(after)``, shape ``(HW, C)``."""
    if f_bef.provenance != f_aft.provenance:
        raise ValueError(f"provenance mismatch: {f_bef.provenance} vs {f_aft.provenance}")
    if f_bef.shape != f_aft.shape:
        raise ValueError(f"shape mismatch: {f_bef.shape} vs {f_aft.shape}")
    return f_bef.tokens - f_aft.tokens


def residual_batch(before: torch.Tensor, after: torch.Tensor, backbone: nn.Module) -> torch.Tensor:
    if before.shape != after.shape:
        raise ValueError(f"shape mismatch: {tuple(before.shape)} vs {tuple(after.shape)}")
    return extract_batch(before, backbone) - extract_batch(after, backbone)
