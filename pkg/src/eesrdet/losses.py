"""Loss terms and their weighted combination."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn

from .adversary import d_ra
from .imaging import laplacian_edges
from .sr_generator import ConfigError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0     # perceptual
    lambda2: float = 0.001   # relativistic adversarial (generator side)
    lambda3: float = 0.01    # content L1
    lambda4: float = 5.0     # edge-enhancement consistency
    eta: float = 1.0         # detector coupling
    det_reg_weight: float = 1.0
    charbonnier_eps: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"LossWeights.{f.name} must be >= 0")
        if self.charbonnier_eps <= 0:
            raise ConfigError("LossWeights.charbonnier_eps must be > 0")


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


SCALARS = ("l_percep", "l_g_ra", "l_content", "l_img_cst", "l_edge_cst", "l_een", "l_g_een",
           "l_d_ra", "l_cls", "l_reg", "l_det", "l_d_det", "l_overall")


@dataclass
class LossBreakdown:
    l_percep: float | torch.Tensor = 0.0
    l_g_ra: float | torch.Tensor = 0.0
    l_content: float | torch.Tensor = 0.0
    l_img_cst: float | torch.Tensor = 0.0
    l_edge_cst: float | torch.Tensor = 0.0
    l_een: float | torch.Tensor = 0.0
    l_g_een: float | torch.Tensor = 0.0
    l_d_ra: float | torch.Tensor = 0.0
    l_cls: float | torch.Tensor = 0.0
    l_reg: float | torch.Tensor = 0.0
    l_det: float | torch.Tensor = 0.0
    l_d_det: float | torch.Tensor = 0.0
    l_overall: float | torch.Tensor = 0.0
    flags: dict[str, bool] = field(default_factory=dict)

    def detached(self) -> "LossBreakdown":
        vals = {k: _scalar(getattr(self, k)) for k in SCALARS}
        return LossBreakdown(**vals, flags=dict(self.flags))

    def as_dict(self) -> dict:
        d = asdict(self.detached())
        d["flags"] = dict(self.flags)
        return d

    def is_finite(self) -> bool:
        return all(math.isfinite(_scalar(getattr(self, k))) for k in SCALARS)

    def check(self, weights: LossWeights, tol: float = 1e-6) -> None:
        """Assert the linear-combination identities between the named scalars."""
        v = {k: _scalar(getattr(self, k)) for k in SCALARS}
        expected = {
            "l_een": v["l_img_cst"] + v["l_edge_cst"],
            "l_g_een": weights.lambda1 * v["l_percep"] + weights.lambda2 * v["l_g_ra"]
            + weights.lambda3 * v["l_content"] + weights.lambda4 * v["l_een"],
            "l_det": v["l_cls"] + weights.det_reg_weight * v["l_reg"],
            "l_d_det": v["l_d_ra"] + weights.eta * v["l_det"],
            "l_overall": v["l_g_een"] + v["l_d_det"],
        }
        for k, want in expected.items():
            if abs(v[k] - want) > tol * max(1.0, abs(want)):
                raise AssertionError(f"loss identity broken for {k}: {v[k]} != {want}")


def charbonnier(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    return torch.sqrt(x * x + eps * eps).mean()


def perceptual_loss(fx: nn.Module, sr_or_isr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    return (fx(sr_or_isr) - fx(hr)).abs().mean()


def content_loss(isr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    return (isr - hr).abs().mean()


def _safe_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))


def adversarial_losses(c_real: torch.Tensor, c_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Relativistic average losses ``(generator, discriminator)`` from raw logits."""
    p_real, p_fake = d_ra(c_real, c_fake)
    l_g = -_safe_log(1.0 - p_real).mean() - _safe_log(p_fake).mean()
    l_d = -_safe_log(p_real).mean() - _safe_log(1.0 - p_fake).mean()
    return l_g, l_d


def consistency_losses(sr: torch.Tensor, hr: torch.Tensor, eps: float = 1e-3):
    """``(l_img_cst, l_edge_cst, l_een)`` with Charbonnier penalties on pixels and Laplacian edges."""
    l_img = charbonnier(hr - sr, eps)
    l_edge = charbonnier(laplacian_edges(hr) - laplacian_edges(sr), eps)
    return l_img, l_edge, l_img + l_edge


def assemble(weights: LossWeights, *, l_percep=0.0, l_g_ra=0.0, l_content=0.0, l_img_cst=0.0,
             l_edge_cst=0.0, l_d_ra=0.0, l_cls=0.0, l_reg=0.0, flags: dict | None = None) -> LossBreakdown:
    """Combine loss parts into the generator, discriminator and overall totals.

    Works on floats or tensors, so the returned totals can be backpropagated.
    """
    l_een = l_img_cst + l_edge_cst
    l_g_een = (weights.lambda1 * l_percep + weights.lambda2 * l_g_ra + weights.lambda3 * l_content
               + weights.lambda4 * l_een)
    l_det = l_cls + weights.det_reg_weight * l_reg
    l_d_det = l_d_ra + weights.eta * l_det
    return LossBreakdown(
        l_percep=l_percep, l_g_ra=l_g_ra, l_content=l_content, l_img_cst=l_img_cst, l_edge_cst=l_edge_cst,
        l_een=l_een, l_g_een=l_g_een, l_d_ra=l_d_ra, l_cls=l_cls, l_reg=l_reg, l_det=l_det, l_d_det=l_d_det,
        l_overall=l_g_een + l_d_det, flags=dict(flags or {}),
    )
