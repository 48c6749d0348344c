"""Hair branch: scalp-pixel strands made of chained segment Gaussians.

Per valid scalp pixel a modulated-sine generator emits S direction vectors in
the root triangle's local frame. Directions are prefix-summed into strand
vertices, posed rigidly with the root frame, adaptively thinned (fewer
strands from a density map, fewer segments for short hair) and finally
turned into one elongated Gaussian per segment.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .config import ModelConfig
from .gaussians import HAIR, GaussianSet
from .geometry import BindingTable, PosedMesh, interpolate
from .rotations import quat_from_x_axis


class SamplingError(ValueError):
    pass


class HairLength(str, Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"


@dataclass(frozen=True)
class HairLengthClass:
    cls: HairLength
    mean_len: float


@dataclass
class DensityMap:
    values: Tensor  # H_s x W_s, >= 0
    density_scale: float = 1.0

    def __post_init__(self):
        if not torch.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("density map must be finite and nonnegative")


@dataclass
class StrandSet:
    roots: Tensor  # M x 3 posed root positions
    directions: Tensor  # M x S x 3 world-space segment vectors
    vertices: Tensor  # M x (S + 1) x 3
    keep_mask: Tensor  # M bool
    S_eff: int
    radius: float


# ---------------------------------------------------------------------------
# Strand generator


class ModulatedSine(nn.Module):
    def __init__(self, n_in: int, n_out: int, omega: float, first: bool):
        super().__init__()
        self.omega = omega
        self.linear = nn.Linear(n_in, n_out)
        bound = 1.0 / n_in if first else math.sqrt(6.0 / n_in) / omega
        nn.init.uniform_(self.linear.weight, -bound, bound)

    def forward(self, x: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
        return torch.sin(self.omega * ((1.0 + gain) * self.linear(x) + shift))


class StrandGenerator(nn.Module):
    """Maps a per-strand code z (M x C_hair) to S direction vectors (M x S x 3).

    Each sine layer is FiLM-modulated by z; the input is the normalized
    segment coordinate.
    """

    def __init__(self, code_dim: int, hidden: int = 64, layers: int = 3, omega: float = 6.0, dir_scale: float = 0.05):
        super().__init__()
        self.layers = nn.ModuleList([ModulatedSine(1 if i == 0 else hidden, hidden, omega, i == 0) for i in range(layers)])
        self.mod = nn.Sequential(nn.Linear(code_dim, hidden), nn.GELU(), nn.Linear(hidden, 2 * hidden * layers))
        nn.init.normal_(self.mod[-1].weight, std=1e-2)
        nn.init.zeros_(self.mod[-1].bias)
        self.out = nn.Linear(hidden, 3)
        self.hidden = hidden
        self.dir_scale = dir_scale

    def forward(self, z: Tensor, S: int) -> Tensor:
        M = z.shape[0]
        t = ((torch.arange(S, dtype=z.dtype) + 0.5) / S)[None, :, None].expand(M, S, 1)
        mods = self.mod(z).reshape(M, len(self.layers), 2, self.hidden)
        h = t
        for i, layer in enumerate(self.layers):
            h = layer(h, mods[:, i, 0, None, :], mods[:, i, 1, None, :])
        return self.dir_scale * self.out(h)


class HairDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.C, cfg.C_hair)
        # the token correction starts at zero so a pretrained prior is decoded unchanged
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.generator = StrandGenerator(cfg.C_hair, cfg.gen_hidden, 3, cfg.gen_omega, cfg.dir_scale)
        self.opacity = nn.Sequential(nn.Linear(cfg.C, 64), nn.GELU(), nn.Linear(64, 1))
        self.color = nn.Sequential(nn.Linear(cfg.C, 64), nn.GELU(), nn.Linear(64, 3))

    def code(self, hair_tokens: Tensor, hair_base: Tensor, gamma: float) -> Tensor:
        if hair_tokens.shape[:2] != hair_base.shape[:2]:
            raise ValueError(f"hair token grid {tuple(hair_tokens.shape[:2])} != feature grid {tuple(hair_base.shape[:2])}")
        return gamma * self.proj(hair_tokens) + hair_base


def decode_directions(hair_tokens: Tensor, hair_base: Tensor, gamma_coeff: float, decoder: HairDecoder,
                      valid: Optional[Tensor] = None) -> Tensor:
    """Local-frame directions for every (valid) scalp pixel: M x S x 3."""
    z = decoder.code(hair_tokens, hair_base, gamma_coeff)
    z = z.reshape(-1, z.shape[-1]) if valid is None else z[valid]
    return decoder.generator(z, decoder.cfg.S)


def decode_hair_appearance(hair_tokens: Tensor, decoder: HairDecoder) -> Tuple[Tensor, Tensor]:
    """Per-scalp-pixel opacity (H x W) and color (H x W x 3)."""
    alpha = torch.sigmoid(decoder.opacity(hair_tokens))[..., 0]
    return alpha, torch.sigmoid(decoder.color(hair_tokens))


# ---------------------------------------------------------------------------
# Strand geometry


def accumulate_strand(root: Tensor, directions: Tensor) -> Tensor:
    """Prefix sum: v_0 = root, v_s = v_{s-1} + d_s. Works batched over leading dims."""
    zero = torch.zeros_like(directions[..., :1, :])
    return root[..., None, :] + torch.cat([zero, torch.cumsum(directions, dim=-2)], dim=-2)


def strand_gaussians(vertices: Tensor, radius: float, drop_eps: float = 1e-6):
    """Segment Gaussians of strands with vertices (..., S+1, 3).

    Returns (means, scales, quats, keep) flattened over all segments; ``keep``
    marks segments at least ``drop_eps`` long and the other outputs are
    already filtered by it.
    """
    if radius <= 0:
        raise ValueError("strand radius must be positive")
    seg = vertices[..., 1:, :] - vertices[..., :-1, :]
    mid = 0.5 * (vertices[..., 1:, :] + vertices[..., :-1, :])
    seg = seg.reshape(-1, 3)
    mid = mid.reshape(-1, 3)
    length = seg.norm(dim=-1)
    keep = length >= drop_eps
    seg, mid, length = seg[keep], mid[keep], length[keep]
    r = torch.full_like(length, radius)
    scales = torch.stack([0.5 * length, r, r], dim=-1)
    quats = quat_from_x_axis(seg / length[:, None])
    return mid, scales, quats, keep


# ---------------------------------------------------------------------------
# Adaptive sampling


def strand_lengths(directions: Tensor) -> Tensor:
    return directions.norm(dim=-1).sum(dim=-1)


def classify_hair_length(directions: Tensor, cfg: ModelConfig) -> HairLengthClass:
    """Average strand arc length in table units (arc length / length_norm) and its class."""
    if directions.ndim != 3 or directions.shape[0] == 0:
        raise ValueError("need at least one strand")
    mean_len = float(strand_lengths(directions.detach()).mean()) / cfg.length_norm
    return HairLengthClass(length_class(mean_len, cfg), mean_len)


def length_class(mean_len: float, cfg: ModelConfig) -> HairLength:
    if mean_len < cfg.t_short:
        return HairLength.SHORT
    if mean_len < cfg.t_long:
        return HairLength.MEDIUM
    return HairLength.LONG


def segment_count(mean_len: float, cfg: ModelConfig) -> int:
    """S' grows linearly with length (slope k per 24 base vertices), clamped to [S_min, S]."""
    s = int(round(cfg.k * cfg.S0 / 24.0 * mean_len))
    return int(min(max(s, cfg.S_min), cfg.S))


def strand_radius(mean_len: float, cfg: ModelConfig) -> float:
    if mean_len < cfg.t_short:
        return cfg.r0 * (1.0 + cfg.eta * max(0.0, cfg.t_short - mean_len) / cfg.t_short)
    return cfg.r0


def density_scale_for(cls: HairLength, cfg: ModelConfig) -> float:
    return cfg.short_density_scale if cls is HairLength.SHORT else 1.0


def keep_probability(density: DensityMap) -> Tensor:
    v = density.values.detach().double()
    top = float(v.max()) if v.numel() else 0.0
    if top <= 0:
        return torch.zeros_like(v)
    return torch.clamp(density.density_scale * v / top, max=1.0)


def adaptive_sample(density: DensityMap, cls: HairLengthClass, cfg: ModelConfig, seed: int = 0):
    """Returns (keep_mask over density pixels, S', r')."""
    if cfg.S0 < 2:
        raise ValueError("S0 must be >= 2")
    p = keep_probability(density).flatten().numpy()
    u = np.random.default_rng(seed).random(p.shape[0])
    keep = torch.from_numpy((u < p) & (p > 0))
    if not keep.any():
        raise SamplingError("all strands sampled away")
    return keep.reshape(density.values.shape), segment_count(cls.mean_len, cfg), strand_radius(cls.mean_len, cfg)


def subsample_vertices(vertices: Tensor, S_eff: int) -> Tensor:
    """Keep S_eff + 1 vertices at uniform stride (both ends included)."""
    S = vertices.shape[-2] - 1
    idx = np.rint(np.linspace(0, S, S_eff + 1)).astype(np.int64)
    return vertices[..., torch.from_numpy(idx), :]


# ---------------------------------------------------------------------------
# Composition


def density_from_base(hair_base: Tensor, valid: Tensor) -> Tensor:
    return torch.relu(hair_base[..., -1]) * valid.to(hair_base.dtype)


def pose_strands(local_dirs: Tensor, fi: Tensor, bary: Tensor, posed: PosedMesh) -> Tuple[Tensor, Tensor]:
    """Root anchors on the posed surface and world-space directions via the root frame."""
    roots = interpolate(posed.vertices, posed.faces, fi, bary)
    R = posed.frames.rotation[fi]
    return roots, torch.einsum("mij,msj->msi", R, local_dirs)


def build_hair(local_dirs: Tensor, density: Tensor, alpha: Tensor, color: Tensor, binding: BindingTable,
               posed: PosedMesh, cfg: ModelConfig, seed: int = 0) -> Tuple[GaussianSet, StrandSet]:
    """Strand Gaussians from per-valid-pixel local directions and per-grid density/appearance."""
    valid = binding.valid
    cls = classify_hair_length(local_dirs, cfg)
    dens = DensityMap((density * valid.to(density.dtype)).detach(), density_scale_for(cls.cls, cfg))
    keep_grid, S_eff, radius = adaptive_sample(dens, cls, cfg, seed)
    keep = keep_grid[valid]
    fi, bary = binding.flat_valid()
    roots, dirs = pose_strands(local_dirs, fi, bary, posed)
    verts = accumulate_strand(roots, dirs)
    kept = torch.nonzero(keep).flatten()
    sub = subsample_vertices(verts[kept], S_eff)
    means, scales, quats, seg_keep = strand_gaussians(sub, radius, cfg.drop_eps)
    strand_id = kept[:, None].expand(-1, S_eff).reshape(-1)[seg_keep]
    g = GaussianSet(
        means=means, scales=scales, quats=quats,
        opacities=alpha[valid][strand_id], colors=color[valid][strand_id],
        semantic=torch.full((len(means),), HAIR, dtype=torch.int64),
        face_index=fi[strand_id], bary=bary[strand_id], strand=strand_id,
    )
    strands = StrandSet(roots=roots, directions=dirs, vertices=verts, keep_mask=keep, S_eff=S_eff, radius=radius)
    return g, strands


def hair_branch(hair_tokens: Tensor, hair_base: Tensor, binding: BindingTable, posed: PosedMesh,
                decoder: HairDecoder, seed: int = 0, local_dirs: Optional[Tensor] = None,
                appearance: Optional[Tuple[Tensor, Tensor]] = None) -> Tuple[GaussianSet, StrandSet]:
    """Build posed hair Gaussians; ``local_dirs``/``appearance`` may be passed in to skip decoding."""
    cfg = decoder.cfg
    if local_dirs is None:
        local_dirs = decode_directions(hair_tokens, hair_base, cfg.gamma_coeff, decoder, binding.valid)
    alpha, color = appearance if appearance is not None else decode_hair_appearance(hair_tokens, decoder)
    return build_hair(local_dirs, density_from_base(hair_base, binding.valid), alpha, color, binding, posed, cfg, seed)
