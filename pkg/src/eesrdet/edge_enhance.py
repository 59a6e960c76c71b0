"""Edge-enhancement network: sharpen the Laplacian edges of the ISR image."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .imaging import laplacian_edges
from .sr_generator import RRDB, ConfigError, conv3x3, init_weights


@dataclass(frozen=True)
class EENConfig:
    n_blocks: int = 5
    base_channels: int = 64
    growth_channels: int = 32
    beta: float = 0.2
    mask_branch_enabled: bool = True
    een_enabled: bool = True
    # optional extra stride-1 stage where an upsampling block would sit
    refine_stage: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError(f"EENConfig.n_blocks must be >= 1, got {self.n_blocks}")
        if self.base_channels < 1 or self.growth_channels < 1:
            raise ConfigError("EENConfig channel counts must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"EENConfig.beta must lie in (0, 1], got {self.beta}")


@dataclass
class EENOutput:
    sr: torch.Tensor
    isr: torch.Tensor
    edge_isr: torch.Tensor
    edge_enhanced: torch.Tensor
    mask: torch.Tensor


def compose_sr(isr: torch.Tensor, edge_isr: torch.Tensor, edge_enhanced: torch.Tensor) -> torch.Tensor:
    # isr - edge_isr + edge_enhanced, grouped so an identity enhancement returns isr exactly
    return isr + (edge_enhanced - edge_isr)


class EdgeEnhancer(nn.Module):
    def __init__(self, cfg: EENConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        self.conv_in = conv3x3(cfg.in_channels, c)
        self.act_in = nn.PReLU(c)
        self.trunk = nn.Sequential(*(RRDB(c, cfg.growth_channels, 5, cfg.beta) for _ in range(cfg.n_blocks)))
        self.trunk_conv = conv3x3(c, c)
        self.refine = nn.Sequential(conv3x3(c, c), nn.PReLU(c)) if cfg.refine_stage else nn.Identity()
        self.conv_out = conv3x3(c, cfg.in_channels)
        self.mask_conv = nn.Sequential(conv3x3(c, c), nn.PReLU(c), conv3x3(c, cfg.in_channels)) \
            if cfg.mask_branch_enabled else None

    def enhance(self, edge_isr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(edge_enhanced, mask)`` for a batch of edge maps."""
        feat = self.act_in(self.conv_in(edge_isr))
        path = self.conv_out(self.refine(self.trunk_conv(self.trunk(feat)) + feat))
        if self.mask_conv is None:
            mask = torch.ones_like(path)
        else:
            mask = torch.sigmoid(self.mask_conv(feat))
        return mask * path, mask

    def forward(self, isr: torch.Tensor) -> EENOutput:
        if isr.dim() != 4 or isr.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [N,{self.cfg.in_channels},H,W] ISR batch, got {tuple(isr.shape)}")
        edge_isr = laplacian_edges(isr)
        if not self.cfg.een_enabled:
            zeros = torch.zeros_like(isr)
            return EENOutput(sr=isr, isr=isr, edge_isr=edge_isr, edge_enhanced=edge_isr, mask=zeros)
        edge_enhanced, mask = self.enhance(edge_isr)
        return EENOutput(sr=compose_sr(isr, edge_isr, edge_enhanced), isr=isr, edge_isr=edge_isr,
                         edge_enhanced=edge_enhanced, mask=mask)


def build_een(cfg: EENConfig, init_seed: int = 0) -> EdgeEnhancer:
    een = EdgeEnhancer(cfg)
    init_weights(een, init_seed)
    with torch.no_grad():
        een.conv_out.weight.zero_()
        een.conv_out.bias.zero_()
    return een


def een_forward(een: EdgeEnhancer, isr: torch.Tensor) -> EENOutput:
    return een(isr if isr.dim() == 4 else isr.unsqueeze(0))


def extract_edge_pair(sr: torch.Tensor, hr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch {tuple(sr.shape)} vs {tuple(hr.shape)}")
    return laplacian_edges(sr), laplacian_edges(hr)
