"""Token streams: image patches, head geometry tokens and hair tokens."""

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig
from .layers import Attention, mlp
from .render.camera import Camera


@dataclass
class CaptureSet:
    images: Tensor  # N x H x W x 3 in [0, 1]
    cameras: List[Camera]
    psi: Tensor  # N x E
    hair_masks: Optional[Tensor] = None  # N x H x W
    seg_masks: Optional[Tensor] = None  # N x H x W x 2 (face, hair)
    shape_offsets: Optional[Tensor] = None  # V x 3 tracked identity shape

    def __post_init__(self):
        N = self.images.shape[0]
        if N < 1:
            raise ValueError("a capture set needs at least one image")
        if len(self.cameras) != N or self.psi.shape[0] != N:
            raise ValueError("images, cameras and psi must have the same length")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, idx) -> "CaptureSet":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return CaptureSet(
            images=self.images[t],
            cameras=[self.cameras[i] for i in idx],
            psi=self.psi[t],
            hair_masks=None if self.hair_masks is None else self.hair_masks[t],
            seg_masks=None if self.seg_masks is None else self.seg_masks[t],
            shape_offsets=self.shape_offsets,
        )


@dataclass
class TokenSet:
    image_tokens: Tensor  # N x P x C
    head_tokens: Tensor  # H_uv x W_uv x C
    hair_tokens: Tensor  # H_s x W_s x C
    hair_base: Tensor  # H_s x W_s x C_hair, last channel = coarse density
    image_tokens_hair: Optional[Tensor] = None  # second image stream used by the hair path


def positional_encoding(x: Tensor, bands: int) -> Tensor:
    """[x, sin(2^l pi x), cos(2^l pi x)] for l < bands; width 3 + 6 * bands for 3D input."""
    if bands < 1:
        raise ValueError("need at least one frequency band")
    out = [x]
    for level in range(bands):
        freq = (2.0**level) * math.pi
        out.append(torch.sin(freq * x))
        out.append(torch.cos(freq * x))
    return torch.cat(out, dim=-1)


class ImageEncoder(nn.Module):
    """Multi-scale conv patch encoder with residual fusion of two depths.

    Produces one token per ``patch_size`` square: a shallow feature at half
    the patch stride is pooled and fused into the deep feature, followed by a
    residual conv refinement.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        p = cfg.patch_size
        self.patch = p
        c1, c2 = 32, 64
        self.stem = nn.Conv2d(3, c1, kernel_size=p // 4, stride=p // 4)
        self.shallow = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.deep = nn.Conv2d(c2, cfg.C, 3, stride=2, padding=1)
        self.fuse = nn.Conv2d(c2, cfg.C, 1)
        self.refine1 = nn.Conv2d(cfg.C, cfg.C, 3, padding=1)
        self.refine2 = nn.Conv2d(cfg.C, cfg.C, 3, padding=1)

    def forward(self, images: Tensor) -> Tensor:
        N, H, W, _ = images.shape
        if H != W or H % self.patch:
            raise ValueError(f"images must be square with side divisible by {self.patch}, got {H}x{W}")
        x = images.permute(0, 3, 1, 2)
        x = F.gelu(self.stem(x))
        s = F.gelu(self.shallow(x))
        d = F.gelu(self.deep(s))
        d = d + self.fuse(F.avg_pool2d(s, 2))
        d = d + self.refine2(F.gelu(self.refine1(d)))
        return d.flatten(2).transpose(1, 2)  # N x P x C


class HeadTokenizer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.bands = cfg.pe_bands
        w = 3 + 6 * cfg.pe_bands
        self.mlp = mlp([w, cfg.C, cfg.C, cfg.C])
        self.null_token = nn.Parameter(torch.zeros(cfg.C))

    def forward(self, positions: Tensor, valid: Tensor) -> Tensor:
        tok = self.mlp(positional_encoding(positions, self.bands))
        return torch.where(valid[..., None], tok, self.null_token.expand_as(tok))


def select_frontal(cameras: List[Camera], tol: float = 1e-9) -> int:
    """Index of the camera looking most directly at the face (+z); ties go to the lowest index."""
    best, best_score = 0, -math.inf
    for i, cam in enumerate(cameras):
        score = -float(cam.optical_axis[2])
        if score > best_score + tol:
            best, best_score = i, score
    return best


class HairFeatureEncoder(nn.Module):
    """Frontal image -> scalp-UV feature grid; the last channel is the coarse density."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.out_hw = (cfg.scalp_uv, cfg.scalp_uv)
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(64, 64, 3, padding=1)
        self.head = nn.Conv2d(64, cfg.C_hair, 3, padding=1)
        # density starts positive so an untrained model still keeps strands
        with torch.no_grad():
            self.head.bias[-1] = 1.0

    def forward(self, image: Tensor) -> Tensor:
        x = image.permute(2, 0, 1)[None]
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = x + F.gelu(self.conv3(x))
        if tuple(x.shape[-2:]) != self.out_hw:
            x = F.interpolate(x, size=self.out_hw, mode="bilinear", align_corners=False)
        return self.head(x)[0].permute(1, 2, 0)


def toy_hair_feature(encoder: HairFeatureEncoder, frontal_image: Tensor) -> Tensor:
    return encoder(frontal_image)


class HairTokenizer(nn.Module):
    """Hair-pixel queries attend to all image tokens; the scalp head tokens act as positional code."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.q_in = nn.Linear(cfg.C_hair, cfg.C)
        self.ln_q = nn.LayerNorm(cfg.C)
        self.ln_kv = nn.LayerNorm(cfg.C)
        self.attn = Attention(cfg.C, cfg.n_cross_heads)

    def forward(self, hair_base: Tensor, image_tokens: Tensor, head_tokens_scalp: Tensor) -> Tensor:
        Hs, Ws, Ch = hair_base.shape
        C = image_tokens.shape[-1]
        if head_tokens_scalp.shape != (Hs, Ws, C):
            raise ValueError(f"scalp head tokens {tuple(head_tokens_scalp.shape)} do not match grid {(Hs, Ws, C)}")
        if Ch != self.q_in.in_features:
            raise ValueError(f"hair feature has {Ch} channels, expected {self.q_in.in_features}")
        q = self.ln_q(self.q_in(hair_base.reshape(1, Hs * Ws, Ch)))
        kv = self.ln_kv(image_tokens.reshape(1, -1, C))
        out = self.attn(q, kv).reshape(Hs, Ws, C)
        return out + head_tokens_scalp
