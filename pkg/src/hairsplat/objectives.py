"""Training losses and image metrics.

Images are float tensors in [0, 1] shaped (..., H, W, C); leading dims are
averaged over.
"""

import math
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Dict, Optional

import torch
import torch.nn.functional as F
from torch import Tensor


@dataclass
class LossWeights:
    hair: float = 0.3
    seg: float = 0.3
    ssim: float = 0.5
    lpips: float = 0.02
    pos: float = 0.1
    scale: float = 0.1
    eps_pos: float = 0.13
    eps_scale: float = 0.08

    def __post_init__(self):
        for k in ("hair", "seg", "ssim", "lpips", "pos", "scale"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be nonnegative")
        if self.eps_pos <= 0 or self.eps_scale <= 0:
            raise ValueError("regularization thresholds must be positive")

    @classmethod
    def for_template(cls, mean_edge: float, **kw) -> "LossWeights":
        """Thresholds tied to the template: one mean edge for offsets, 0.6 of it for scales."""
        return cls(eps_pos=mean_edge, eps_scale=0.6 * mean_edge, **kw)


def _nchw(x: Tensor) -> Tensor:
    x = x.reshape(-1, *x.shape[-3:])
    return x.permute(0, 3, 1, 2)


def _check(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")


@lru_cache(maxsize=8)
def _gauss_window(size: int, sigma: float, channels: int, dtype) -> Tensor:
    x = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    w = (g[:, None] * g[None, :]).to(dtype)
    return w.expand(channels, 1, size, size).contiguous()


def ssim_map(pred: Tensor, gt: Tensor, window: int = 11, sigma: float = 1.5) -> Tensor:
    _check(pred, gt)
    x, y = _nchw(pred), _nchw(gt)
    C = x.shape[1]
    w = _gauss_window(window, sigma, C, x.dtype)
    pad = window // 2
    mu_x = F.conv2d(x, w, padding=pad, groups=C)
    mu_y = F.conv2d(y, w, padding=pad, groups=C)
    sxx = F.conv2d(x * x, w, padding=pad, groups=C) - mu_x**2
    syy = F.conv2d(y * y, w, padding=pad, groups=C) - mu_y**2
    sxy = F.conv2d(x * y, w, padding=pad, groups=C) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    return ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))


def ssim(pred: Tensor, gt: Tensor) -> Tensor:
    return ssim_map(pred, gt).mean()


def psnr(pred: Tensor, gt: Tensor) -> float:
    """PSNR in dB for [0, 1] images, capped at 100 dB."""
    _check(pred, gt)
    mse = float(((pred.double() - gt.double()) ** 2).mean())
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


@lru_cache(maxsize=4)
def _proxy_filters(seed: int):
    gen = torch.Generator().manual_seed(seed)
    filters = []
    cin = 3
    for width in (8, 16, 16):
        w = torch.randn(width, cin, 3, 3, generator=gen, dtype=torch.float64) / math.sqrt(cin * 9)
        filters.append(w)
        cin = width
    return filters


def perceptual_proxy(pred: Tensor, gt: Tensor, seed: int = 0) -> Tensor:
    """Stand-in for a learned perceptual distance.

    A fixed random three-level conv pyramid (leaky ReLU, 2x pooling between
    levels); the distance is the summed mean-squared feature difference per
    level plus the pixel difference, so it is zero exactly when the images
    match. Swap in a real network through ``set_perceptual``.
    """
    _check(pred, gt)
    if _PERCEPTUAL is not None:
        return _PERCEPTUAL(pred, gt)
    x, y = _nchw(pred), _nchw(gt)
    total = ((x - y) ** 2).mean()
    for w in _proxy_filters(seed):
        w = w.to(x.dtype)
        x = F.leaky_relu(F.conv2d(x, w, padding=1), 0.2)
        y = F.leaky_relu(F.conv2d(y, w, padding=1), 0.2)
        total = total + ((x - y) ** 2).mean()
        x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return total


_PERCEPTUAL = None


def set_perceptual(fn) -> None:
    """Install a perceptual distance ``fn(pred, gt) -> scalar`` (None restores the proxy)."""
    global _PERCEPTUAL
    _PERCEPTUAL = fn


def loss_photo(pred: Tensor, gt: Tensor, weights: LossWeights, seed: int = 0) -> Tensor:
    _check(pred, gt)
    l1 = (pred - gt).abs().mean()
    out = l1
    if weights.ssim > 0:
        out = out + weights.ssim * (1.0 - ssim(pred, gt))
    if weights.lpips > 0:
        out = out + weights.lpips * perceptual_proxy(pred, gt, seed)
    return out


def loss_hair_region(pred_hair: Tensor, gt_hair: Tensor, pred_seg: Tensor, gt_seg: Tensor,
                     weights: LossWeights) -> Tensor:
    _check(pred_hair, gt_hair)
    _check(pred_seg, gt_seg)
    return weights.hair * ((pred_hair - gt_hair) ** 2).mean() + weights.seg * ((pred_seg - gt_seg) ** 2).mean()


def loss_reg(offsets: Tensor, scales: Tensor, weights: LossWeights) -> Tensor:
    """Hinge-squared penalty on offset magnitudes and per-axis scales (world units)."""
    zero = offsets.new_zeros(())
    pos = zero if offsets.numel() == 0 else (torch.relu(offsets.norm(dim=-1) - weights.eps_pos) ** 2).mean()
    sc = zero if scales.numel() == 0 else (torch.relu(scales - weights.eps_scale) ** 2).sum(dim=-1).mean()
    return weights.pos * pos + weights.scale * sc


@dataclass
class LossBreakdown:
    total: Tensor
    hair: Tensor
    photo: Tensor
    reg: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def loss_total(pred_rgb: Tensor, gt_rgb: Tensor, offsets: Tensor, scales: Tensor, weights: LossWeights,
               pred_hair: Optional[Tensor] = None, gt_hair: Optional[Tensor] = None,
               pred_seg: Optional[Tensor] = None, gt_seg: Optional[Tensor] = None,
               seed: int = 0) -> LossBreakdown:
    """Region + photometric + regularization; the region term is skipped when its inputs are absent."""
    photo = loss_photo(pred_rgb, gt_rgb, weights, seed)
    if pred_hair is not None and pred_seg is not None:
        hair = loss_hair_region(pred_hair, gt_hair, pred_seg, gt_seg, weights)
    else:
        hair = photo.new_zeros(())
    reg = loss_reg(offsets, scales, weights)
    return LossBreakdown(total=hair + photo + reg, hair=hair, photo=photo, reg=reg)
