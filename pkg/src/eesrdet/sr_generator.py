"""RRDB generator producing intermediate super-resolved (ISR) images."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import bicubic_resize


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RRDBConfig:
    n_blocks: int = 23
    n_dense_layers_per_block: int = 5
    growth_channels: int = 32
    base_channels: int = 64
    beta: float = 0.2
    in_channels: int = 3
    # add the bicubic upsampling of the input to the output, so the network learns a correction
    image_residual: bool = False

    def __post_init__(self):
        for name in ("n_blocks", "n_dense_layers_per_block", "growth_channels", "base_channels", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"RRDBConfig.{name} must be positive, got {getattr(self, name)}")
        if self.n_dense_layers_per_block < 2:
            raise ConfigError("RRDBConfig.n_dense_layers_per_block must be >= 2")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"RRDBConfig.beta must lie in (0, 1], got {self.beta}")


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride, 1, bias=True)


class DenseBlock(nn.Module):
    """Densely connected convs; the last one projects back to ``channels``."""

    def __init__(self, channels: int, growth: int, n_layers: int, beta: float):
        super().__init__()
        self.beta = beta
        self.convs = nn.ModuleList(
            conv3x3(channels + i * growth, growth) for i in range(n_layers - 1))
        self.acts = nn.ModuleList(nn.PReLU(growth) for _ in range(n_layers - 1))
        self.out = conv3x3(channels + (n_layers - 1) * growth, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for conv, act in zip(self.convs, self.acts):
            feats.append(act(conv(torch.cat(feats, 1))))
        return x + self.beta * self.out(torch.cat(feats, 1))


class RRDB(nn.Module):
    """Three dense blocks wrapped in an outer beta-scaled residual.

    The outer branch is the residual of the inner chain, so a block whose dense
    outputs are all zero is exactly the identity.
    """

    def __init__(self, channels: int, growth: int, n_layers: int, beta: float):
        super().__init__()
        self.beta = beta
        self.blocks = nn.Sequential(*(DenseBlock(channels, growth, n_layers, beta) for _ in range(3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.beta * (self.blocks(x) - x)


def upsample_factors(scale: int) -> list[int]:
    if scale < 2 or int(scale) != scale:
        raise ConfigError(f"scale must be an integer >= 2, got {scale}")
    n = int(round(math.log2(scale)))
    return [2] * n if 2 ** n == scale else [int(scale)]


class Generator(nn.Module):
    def __init__(self, cfg: RRDBConfig, scale: int = 4):
        super().__init__()
        self.cfg = cfg
        self.scale = scale
        c = cfg.base_channels
        self.conv_first = conv3x3(cfg.in_channels, c)
        self.trunk = nn.Sequential(*(
            RRDB(c, cfg.growth_channels, cfg.n_dense_layers_per_block, cfg.beta) for _ in range(cfg.n_blocks)))
        self.trunk_conv = conv3x3(c, c)
        self.factors = upsample_factors(scale)
        self.up_convs = nn.ModuleList(conv3x3(c, c) for _ in self.factors)
        self.up_acts = nn.ModuleList(nn.PReLU(c) for _ in self.factors)
        self.hr_conv = conv3x3(c, c)
        self.hr_act = nn.PReLU(c)
        self.conv_last = conv3x3(c, cfg.in_channels)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        if lr.dim() != 4 or lr.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [N,{self.cfg.in_channels},h,w] input, got {tuple(lr.shape)}")
        feat = self.conv_first(lr)
        out = self.reconstruct(feat, self.trunk(feat))
        if self.cfg.image_residual:
            out = out + bicubic_resize(lr, lr.shape[-2] * self.scale, lr.shape[-1] * self.scale)
        return out

    def reconstruct(self, feat: torch.Tensor, trunk_out: torch.Tensor) -> torch.Tensor:
        """Global residual, upsampling and reconstruction applied after the trunk."""
        x = feat + self.trunk_conv(trunk_out)
        for f, conv, act in zip(self.factors, self.up_convs, self.up_acts):
            x = act(conv(F.interpolate(x, scale_factor=f, mode="nearest")))
        return self.conv_last(self.hr_act(self.hr_conv(x)))


def init_weights(module: nn.Module, seed: int, residual_scale: float = 0.1) -> None:
    """Kaiming fan-in init; convs inside dense blocks are further scaled down."""
    gen = torch.Generator().manual_seed(seed)
    for name, m in module.named_modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1] // m.groups
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if _in_dense_block(module, name):
                    m.weight.mul_(residual_scale)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.PReLU):
            with torch.no_grad():
                m.weight.fill_(0.25)


def _in_dense_block(root: nn.Module, name: str) -> bool:
    parts = name.split(".")
    node = root
    for p in parts[:-1]:
        node = getattr(node, p)
        if isinstance(node, DenseBlock):
            return True
    return False


def build_generator(cfg: RRDBConfig, scale: int = 4, init_seed: int = 0) -> Generator:
    g = Generator(cfg, scale)
    init_weights(g, init_seed)
    return g


def generator_forward(g: Generator, lr: torch.Tensor) -> torch.Tensor:
    single = lr.dim() == 3
    out = g(lr.unsqueeze(0) if single else lr)
    return out.squeeze(0) if single else out


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
