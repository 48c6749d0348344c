"""Head tokens -> one planar Gaussian per valid head-UV pixel.

A shared two-layer conv trunk runs over the UV grid; five independent
per-pixel heads produce offset, scale, rotation, opacity and color. Offsets
live in the bound triangle's local frame (units of the frame scale), which
keeps the decoder equivariant to the template's size.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig
from .gaussians import FACE, GaussianSet
from .geometry import BindingTable, PosedMesh, bind_and_pose_gaussians

# softplus shift: a zero pre-activation yields (almost exactly) the scale floor
_SHIFT = 12.0


@dataclass
class FaceLocalGaussians:
    offsets: Tensor  # K x 3, frame-local
    scales: Tensor  # K x 3, frame-local, third axis planar
    quats: Tensor  # K x 4
    opacities: Tensor  # K
    colors: Tensor  # K x 3

    def __len__(self) -> int:
        return int(self.offsets.shape[0])


def _inv_scale(sigma: float, floor: float, cap: float) -> float:
    # pre-activation u with floor + cap * tanh(softplus(u - shift) / cap) == sigma
    y = math.atanh(min((sigma - floor) / cap, 0.999))
    return _SHIFT + math.log(math.expm1(cap * y))


def bounded_scale(u: Tensor, floor: float, cap: float) -> Tensor:
    return floor + cap * torch.tanh(F.softplus(u - _SHIFT) / cap)


class FaceDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C, T = cfg.C, cfg.face_trunk
        self.cfg = cfg
        self.trunk1 = nn.Conv2d(C, T, 3, padding=1)
        self.trunk2 = nn.Conv2d(T, T, 3, padding=1)
        dims = {"offset": 3, "scale": 3, "rot": 4, "opacity": 1, "color": 3}
        self.heads = nn.ModuleDict({k: nn.Sequential(nn.Linear(T, T), nn.GELU(), nn.Linear(T, d)) for k, d in dims.items()})
        self.reset_heads()

    def reset_heads(self) -> None:
        cfg = self.cfg
        for k in ("offset", "rot"):
            nn.init.normal_(self.heads[k][-1].weight, std=1e-3)
            nn.init.zeros_(self.heads[k][-1].bias)
        last = self.heads["scale"][-1]
        nn.init.normal_(last.weight, std=1e-3)
        with torch.no_grad():
            cap = cfg.sigma_cap
            last.bias[:2] = _inv_scale(cfg.sigma_init, cfg.sigma_floor, cap)
            last.bias[2] = _inv_scale(cfg.planar_ratio * cfg.sigma_init, cfg.sigma_floor, cfg.planar_ratio * cap)

    def features(self, head_tokens: Tensor) -> Tensor:
        x = head_tokens.permute(2, 0, 1)[None]
        x = F.gelu(self.trunk1(x))
        x = F.gelu(self.trunk2(x))
        return x[0].permute(1, 2, 0)

    def forward(self, head_tokens: Tensor, valid: Tensor) -> FaceLocalGaussians:
        if not torch.isfinite(head_tokens).all():
            raise ValueError("head tokens contain non-finite values")
        if head_tokens.shape[:2] != valid.shape:
            raise ValueError(f"token grid {tuple(head_tokens.shape[:2])} does not match binding {tuple(valid.shape)}")
        cfg = self.cfg
        f = self.features(head_tokens)[valid]
        off = torch.tanh(self.heads["offset"](f)) * cfg.offset_bound
        u = self.heads["scale"](f)
        cap = cfg.sigma_cap
        scales = torch.cat([
            bounded_scale(u[:, :2], cfg.sigma_floor, cap),
            bounded_scale(u[:, 2:], cfg.sigma_floor, cfg.planar_ratio * cap),
        ], dim=-1)
        identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=f.dtype)
        quats = F.normalize(self.heads["rot"](f) + identity, dim=-1)
        alpha = torch.sigmoid(self.heads["opacity"](f))[:, 0]
        colors = torch.sigmoid(self.heads["color"](f))
        return FaceLocalGaussians(off, scales, quats, alpha, colors)


def decode_face_gaussians(head_tokens: Tensor, binding: BindingTable, decoder: FaceDecoder) -> FaceLocalGaussians:
    return decoder(head_tokens, binding.valid)


def apply_color_edit(local: FaceLocalGaussians, binding: BindingTable, overlay: Tensor, mask: Tensor) -> FaceLocalGaussians:
    """Composite a UV-space overlay (H x W x 3, mask H x W in [0, 1]) onto decoded colors."""
    if overlay.shape[:2] != binding.shape or mask.shape != binding.shape:
        raise ValueError(f"edit resolution {tuple(overlay.shape[:2])} does not match UV grid {binding.shape}")
    m = mask[binding.valid].to(local.colors.dtype)[:, None]
    over = overlay[binding.valid].to(local.colors.dtype)
    return replace(local, colors=local.colors * (1 - m) + over * m)


def face_branch(head_tokens: Tensor, binding: BindingTable, posed: PosedMesh, decoder: FaceDecoder,
                local: Optional[FaceLocalGaussians] = None) -> GaussianSet:
    """Decode (unless ``local`` is given) and bind the face Gaussians under a posed mesh."""
    if local is None:
        local = decode_face_gaussians(head_tokens, binding, decoder)
    fi, bary = binding.flat_valid()
    means, scales, quats = bind_and_pose_gaussians(local.offsets, local.scales, local.quats, fi, bary, posed)
    return GaussianSet(
        means=means, scales=scales, quats=quats, opacities=local.opacities, colors=local.colors,
        semantic=torch.full((len(local),), FACE, dtype=torch.int64),
        face_index=fi, bary=bary,
    )
