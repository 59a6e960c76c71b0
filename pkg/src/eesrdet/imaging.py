"""Image primitives shared by the data, network and loss code.

Images are torch tensors shaped ``[C, H, W]`` (or batched ``[N, C, H, W]``)
holding intensities nominally in ``[0, 1]``.
"""
from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

BICUBIC_A = -0.5

LAPLACIAN_KERNEL = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class DimensionError(ValueError):
    pass


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-normalised ``[n_out, n_in]`` bicubic weights with replicate borders.

    When shrinking, the kernel is stretched by the scale so the result is
    antialiased (the usual convention for generating LR training images).
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = 2.0 * stretch
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        lo = math.floor(center - support)
        hi = math.ceil(center + support)
        for j in range(lo, hi + 1):
            w = cubic_kernel(np.array((center - j) / stretch))
            if w == 0.0:
                continue
            weights[i, min(max(j, 0), n_in - 1)] += float(w)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def _resample(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    h, w = img.shape[-2:]
    wy = torch.as_tensor(_resample_matrix(h, out_h), dtype=img.dtype, device=img.device)
    wx = torch.as_tensor(_resample_matrix(w, out_w), dtype=img.dtype, device=img.device)
    return torch.einsum("ih,...hw,jw->...ij", wy, img, wx)


def bicubic_resize(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bicubic resize to an arbitrary size (unclamped)."""
    _check_image(img)
    return _resample(img, out_h, out_w)


def _check_image(img: torch.Tensor) -> None:
    if img.dim() not in (3, 4):
        raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {tuple(img.shape)}")
    if img.shape[-1] < 1 or img.shape[-2] < 1:
        raise DimensionError(f"empty image of shape {tuple(img.shape)}")


def _check_scale(s: int) -> None:
    if int(s) != s or s < 2:
        raise DimensionError(f"scale factor must be an integer >= 2, got {s}")


def bicubic_downsample(img: torch.Tensor, s: int) -> torch.Tensor:
    _check_image(img)
    _check_scale(s)
    h, w = img.shape[-2:]
    if h % s or w % s:
        raise DimensionError(f"image {h}x{w} is not divisible by scale {s}")
    return _resample(img, h // s, w // s).clamp(0.0, 1.0)


def bicubic_upsample(img: torch.Tensor, s: int) -> torch.Tensor:
    _check_image(img)
    _check_scale(s)
    h, w = img.shape[-2:]
    return _resample(img, h * s, w * s).clamp(0.0, 1.0)


def laplacian_edges(img: torch.Tensor) -> torch.Tensor:
    """Signed per-channel Laplacian with replicate padding (same shape, unclamped)."""
    _check_image(img)
    batched = img.dim() == 4
    x = img if batched else img.unsqueeze(0)
    c = x.shape[1]
    kernel = LAPLACIAN_KERNEL.to(dtype=x.dtype, device=x.device).expand(c, 1, 3, 3)
    out = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel, groups=c)
    return out if batched else out.squeeze(0)


def _tile_offsets(size: int, tile: int, stride: int) -> list[int]:
    offsets = list(range(0, size - tile + 1, stride))
    if offsets[-1] + tile < size:
        offsets.append(size - tile)
    return offsets


def tile_image(img: torch.Tensor, tile: int, stride: int | None = None) -> list[tuple[torch.Tensor, tuple[int, int]]]:
    """Split ``img`` into row-major tiles, returning ``(tile, (top, left))`` pairs.

    Trailing tiles are shifted back so that every tile lies inside the image.
    """
    _check_image(img)
    stride = tile if stride is None else stride
    h, w = img.shape[-2:]
    if tile > min(h, w) or tile < 1 or stride < 1:
        raise DimensionError(f"tile {tile} does not fit image {h}x{w}")
    return [
        (img[..., y:y + tile, x:x + tile], (y, x))
        for y in _tile_offsets(h, tile, stride)
        for x in _tile_offsets(w, tile, stride)
    ]


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().to(torch.float64).clamp(0.0, 1.0).mul(255.0).round()
    return arr.to(torch.uint8).cpu().numpy()


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8-bit storage."""
    return torch.from_numpy(to_uint8(img)).to(torch.float32) / 255.0


def read_png(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L" if im.mode in ("L", "I", "I;16") else "RGB"))
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.array(arr, copy=True)).to(torch.float32) / 255.0


def write_png(path: str | Path, img: torch.Tensor) -> None:
    arr = to_uint8(img)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def edge_to_image(edges: torch.Tensor) -> torch.Tensor:
    """Map signed edges to a viewable image via ``(x + 1) / 2``."""
    return ((edges + 1.0) / 2.0).clamp(0.0, 1.0)
