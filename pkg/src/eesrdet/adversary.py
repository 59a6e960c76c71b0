"""Relativistic average discriminator and the frozen perceptual feature network."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .sr_generator import ConfigError, conv3x3


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 64
    max_channels: int = 512
    image_size: int = 256
    in_channels: int = 3

    def __post_init__(self):
        if self.base_channels < 1 or self.image_size < 4:
            raise ConfigError("DiscriminatorConfig needs base_channels >= 1 and image_size >= 4")

    @property
    def n_stages(self) -> int:
        # one stride-2 stage per halving down to 4x4
        return max(0, int(math.floor(math.log2(self.image_size / 4))))


class Discriminator(nn.Module):
    """VGG-style conv stack with a global-average-pool linear head; returns one logit per image."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers: list[nn.Module] = [conv3x3(cfg.in_channels, c), nn.LeakyReLU(0.2)]
        for _ in range(cfg.n_stages):
            nxt = min(2 * c, cfg.max_channels)
            layers += [conv3x3(c, c), nn.LeakyReLU(0.2), conv3x3(c, nxt, stride=2), nn.LeakyReLU(0.2)]
            c = nxt
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(img).mean(dim=(2, 3))).squeeze(1)


def build_discriminator(cfg: DiscriminatorConfig, init_seed: int = 0) -> Discriminator:
    gen = torch.Generator().manual_seed(init_seed)
    d = Discriminator(cfg)
    with torch.no_grad():
        for m in d.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return d


def discriminator_forward(d: Discriminator, img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 3:
        return d(img.unsqueeze(0))[0]
    return d(img)


def d_ra(c_real: torch.Tensor, c_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Relativistic average probabilities ``(real vs mean fake, fake vs mean real)``."""
    c_real, c_fake = torch.as_tensor(c_real), torch.as_tensor(c_fake)
    if c_real.numel() == 0 or c_fake.numel() == 0:
        raise ValueError("d_ra needs non-empty real and fake logit batches")
    return torch.sigmoid(c_real - c_fake.mean()), torch.sigmoid(c_fake - c_real.mean())


@dataclass(frozen=True)
class FeatureConfig:
    channels: tuple[int, ...] = (16, 32)
    seed: int = 1234
    in_channels: int = 3


class FeatureExtractor(nn.Module):
    """Frozen random conv stack standing in for a pretrained perceptual network.

    Stage ``i`` is ``conv-relu-conv`` at ``channels[i]`` followed by a 2x2
    average pool between stages.  The output is the last conv taken before
    its activation, so features have spatial size ``H / 2**(len(channels)-1)``.
    Any frozen ``nn.Module`` mapping images to feature maps can replace it.
    """

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        cin = cfg.in_channels
        for i, c in enumerate(cfg.channels):
            if i:
                layers.append(nn.AvgPool2d(2))
            layers += [conv3x3(cin, c), nn.ReLU(), conv3x3(c, c)]
            if i < len(cfg.channels) - 1:
                layers.append(nn.ReLU())
            cin = c
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(cfg.seed)
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def output_size(self, h: int, w: int) -> tuple[int, int, int]:
        k = 2 ** (len(self.cfg.channels) - 1)
        return self.cfg.channels[-1], h // k, w // k

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.net(img)


def features(fx: nn.Module, img: torch.Tensor) -> torch.Tensor:
    single = img.dim() == 3
    out = fx(img.unsqueeze(0) if single else img)
    return out.squeeze(0) if single else out


def weight_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
