"""Restoration backbone, patch discriminator and the frozen perceptual extractor."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BackboneConfig:
    stages: int = 2
    base_channels: int = 16
    depth: int = 2
    blocks_per_level: int = 1
    feature_tap: str = "bottleneck"

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        if self.blocks_per_level < 1:
            raise ValueError(f"blocks_per_level must be >= 1, got {self.blocks_per_level}")
        if self.feature_tap not in FEATURE_TAPS:
            raise ValueError(f"unknown feature tap {self.feature_tap!r}; choose from {FEATURE_TAPS}")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    @property
    def feature_channels(self) -> int:
        if self.feature_tap == "decoder":
            return self.base_channels
        return self.base_channels * 2 ** self.depth


FEATURE_TAPS = ("bottleneck", "decoder")


class BackboneOutput(NamedTuple):
    restored: torch.Tensor
    features: list[torch.Tensor]


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.2))


class Stage(nn.Module):
    """One U-shaped encoder-decoder predicting a residual correction."""

    def __init__(self, in_channels: int, cfg: BackboneConfig):
        super().__init__()
        c = cfg.base_channels
        self.head = nn.Conv2d(in_channels, c, 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        for level in range(cfg.depth):
            ch = c * 2 ** level
            self.enc.append(nn.Sequential(*[ResBlock(ch) for _ in range(cfg.blocks_per_level)]))
            self.down.append(nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1))
        deep = c * 2 ** cfg.depth
        self.bottleneck = nn.Sequential(*[ResBlock(deep) for _ in range(cfg.blocks_per_level)])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            ch = c * 2 ** level
            self.up.append(nn.ConvTranspose2d(ch * 2, ch, 2, stride=2))
            self.dec.append(nn.Sequential(*[ResBlock(ch) for _ in range(cfg.blocks_per_level)]))
        self.tail = nn.Conv2d(c, 3, 3, padding=1)

    def forward(self, x):
        h = F.leaky_relu(self.head(x), 0.2)
        skips = []
        for enc, down in zip(self.enc, self.down):
            h = enc(h)
            skips.append(h)
            h = F.leaky_relu(down(h), 0.2)
        deep = self.bottleneck(h)
        h = deep
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = dec(F.leaky_relu(up(h), 0.2) + skip)
        return self.tail(h), deep, h


class Backbone(nn.Module):
    """Multi-stage residual restorer.

    Stage ``s > 0`` sees the degraded input concatenated with the running
    estimate of stage ``s - 1``.  Every stage tail starts at zero, so a fresh
    network is the identity map (up to clipping).
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stages = nn.ModuleList(Stage(3 if s == 0 else 6, cfg) for s in range(cfg.stages))
        for stage in self.stages:
            nn.init.zeros_(stage.tail.weight)
            nn.init.zeros_(stage.tail.bias)

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h, w = x.shape[-2:]
        m = self.cfg.multiple
        pad_h, pad_w = (-h) % m, (-w) % m
        xp = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else x

        estimate = xp
        deep = dec = None
        for s, stage in enumerate(self.stages):
            inp = xp if s == 0 else torch.cat([xp, estimate], dim=1)
            residual, deep, dec = stage(inp)
            estimate = estimate + residual
        restored = torch.clamp(estimate[..., :h, :w], -1.0, 1.0)
        tap = deep if self.cfg.feature_tap == "bottleneck" else dec
        if squeeze:
            return BackboneOutput(restored[0], [tap[0]])
        return BackboneOutput(restored, [tap])


def init_backbone(cfg: BackboneConfig, seed: int = 0) -> Backbone:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return Backbone(cfg)


def backbone_forward(params: Backbone, img: torch.Tensor) -> BackboneOutput:
    for p in params.parameters():
        if not torch.isfinite(p).all():
            raise ValueError("backbone parameters contain non-finite values")
    return params(img)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# discriminator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    n_layers: int = 3

    @property
    def receptive_field(self) -> int:
        # 4x4 convs: n_layers stride-2 blocks, then a stride-1 block and the head
        rf = 1
        strides = [2] * self.n_layers + [1, 1]
        for s in reversed(strides):
            rf = (rf - 1) * s + 4
        return rf


class PatchDiscriminator(nn.Module):
    """Patch discriminator: ``n_layers`` stride-2 conv blocks, one stride-1 block,
    then a 1-channel logit head.  LeakyReLU(0.2); instance norm after every
    block except the first."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        if cfg.n_layers < 1 or cfg.base_channels < 1:
            raise ValueError(f"invalid discriminator config {cfg}")
        self.cfg = cfg
        c = cfg.base_channels
        layers = [nn.Conv2d(3, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = c
        for i in range(1, cfg.n_layers):
            nxt = c * min(2 ** i, 8)
            layers += [nn.Conv2d(ch, nxt, 4, stride=2, padding=1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2)]
            ch = nxt
        nxt = c * min(2 ** cfg.n_layers, 8)
        layers += [nn.Conv2d(ch, nxt, 4, stride=1, padding=1), nn.InstanceNorm2d(nxt), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(nxt, 1, 4, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        rf = self.cfg.receptive_field
        if min(x.shape[-2:]) < rf:
            raise ValueError(f"discriminator input {tuple(x.shape[-2:])} is smaller than its receptive field {rf}")
        out = self.net(x)
        return out[0] if squeeze else out


def init_discriminator(cfg: DiscriminatorConfig, seed: int = 0) -> PatchDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        net = PatchDiscriminator(cfg)
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)
    return net


def discriminator_forward(params: PatchDiscriminator, img: torch.Tensor) -> torch.Tensor:
    return params(img)


# --------------------------------------------------------------------------
# perceptual extractor
# --------------------------------------------------------------------------

# VGG-19 "features" layout; ints are conv widths, "M" is 2x2 max pooling.
VGG19_LAYOUT = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M",
                512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]


def _vgg_tap_names() -> dict[str, int]:
    names, block, conv = {}, 1, 0
    idx = 0
    for item in VGG19_LAYOUT:
        if item == "M":
            names[f"pool{block}"] = idx
            idx += 1
            block, conv = block + 1, 0
        else:
            conv += 1
            names[f"conv{block}_{conv}"] = idx
            names[f"relu{block}_{conv}"] = idx + 1
            idx += 2
    return names


VGG19_TAPS = _vgg_tap_names()
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class PhiConfig:
    mode: str = "random"          # "random" (seeded fallback) or "pretrained"
    tap: str = "relu3_1"
    weights: str | None = None    # .npz with "features.<idx>.weight/bias" arrays
    width_divisor: int = 4        # channel reduction for the random fallback
    seed: int = 1234
    apply_to_features: bool = False

    def __post_init__(self):
        if self.mode not in ("random", "pretrained"):
            raise ValueError(f"phi mode must be 'random' or 'pretrained', got {self.mode!r}")
        if self.tap not in VGG19_TAPS:
            raise ValueError(f"unknown VGG-19 tap {self.tap!r}")


class PerceptualExtractor(nn.Module):
    """Truncated VGG-19 feature stack followed by global average pooling.

    Parameters are frozen; gradients still flow to the input image.
    """

    def __init__(self, cfg: PhiConfig, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg
        divisor = 1 if cfg.mode == "pretrained" else cfg.width_divisor
        stop = VGG19_TAPS[cfg.tap]
        layers, ch, idx = [], in_channels, 0
        for item in VGG19_LAYOUT:
            if idx > stop:
                break
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
                idx += 1
            else:
                width = max(1, item // divisor)
                layers.append(nn.Conv2d(ch, width, 3, padding=1))
                layers.append(nn.ReLU(inplace=False))
                ch = width
                idx += 2
        self.features = nn.Sequential(*layers[: stop + 1])
        self.out_channels = ch
        self.normalize_input = in_channels == 3
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        if cfg.mode == "pretrained":
            self._load(cfg.weights)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(cfg.seed + in_channels)
                for m in self.features:
                    if isinstance(m, nn.Conv2d):
                        nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                        nn.init.zeros_(m.bias)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _load(self, path) -> None:
        if not path or not Path(path).is_file():
            raise FileNotFoundError(f"perceptual extractor weights not found: {path}")
        with np.load(path) as arrays:
            state = {}
            for name, tensor in self.features.state_dict().items():
                key = f"features.{name}"
                if key not in arrays:
                    raise KeyError(f"weights file {path} lacks array {key!r}")
                arr = torch.from_numpy(np.asarray(arrays[key], dtype=np.float32))
                if arr.shape != tensor.shape:
                    raise ValueError(f"array {key!r} has shape {tuple(arr.shape)}, expected {tuple(tensor.shape)}")
                state[name] = arr
        self.features.load_state_dict(state)

    def train(self, mode: bool = True):
        # always inference mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if self.normalize_input:
            x = ((x + 1.0) * 0.5 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = pool_features(self.features(x))
        return out[0] if squeeze else out


def build_phi(cfg: PhiConfig, in_channels: int = 3) -> PerceptualExtractor:
    return PerceptualExtractor(cfg, in_channels)


def phi_extract(phi: PerceptualExtractor, img: torch.Tensor) -> torch.Tensor:
    return phi(img)


def pool_features(fmap: torch.Tensor) -> torch.Tensor:
    """Channelwise global average pooling: ``(..., C, H, W) -> (..., C)``."""
    return fmap.mean(dim=(-2, -1))


def export_vgg19_weights(state_dict, path) -> None:
    """Write a torchvision-style VGG-19 ``features`` state dict to ``.npz``."""
    arrays = {k if k.startswith("features.") else f"features.{k}": v.detach().cpu().numpy()
              for k, v in state_dict.items() if k.startswith("features.") or k[0].isdigit()}
    np.savez(path, **arrays)


def config_dict(cfg) -> dict:
    return asdict(cfg)
