"""Aggregated transformer: geometry tokens cross-attend to every frame's image tokens.

Each block keeps two image-token streams, one feeding the head path and one
feeding the hair path. The frame-wise self-attention of odd-indexed blocks
is a single module used by both streams; even-indexed blocks own separate
copies. Expression coefficients are projected to C channels and added to
each frame's key/value inputs. No frame-index embedding exists, so outputs
do not depend on input order.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import torch.nn as nn
from torch import Tensor

from .config import ModelConfig
from .layers import Attention, FeedForward, zero_
from .tokenizers import TokenSet


@dataclass(frozen=True)
class BackboneConfig:
    n_blocks: int
    n_self_heads: int
    n_cross_heads: int
    C: int
    E: int
    ffn_mult: int = 4

    @property
    def share_pattern(self) -> Tuple[bool, ...]:
        return tuple(b % 2 == 1 for b in range(self.n_blocks))

    @classmethod
    def from_model(cls, cfg: ModelConfig) -> "BackboneConfig":
        return cls(cfg.n_blocks, cfg.n_self_heads, cfg.n_cross_heads, cfg.C, cfg.E, cfg.ffn_mult)

    def validate(self) -> None:
        if self.C % self.n_self_heads or self.C % self.n_cross_heads:
            raise ValueError("C must be divisible by both head counts")


class CrossLayer(nn.Module):
    def __init__(self, C: int, heads: int, E: int, ffn_mult: int):
        super().__init__()
        self.ln_q = nn.LayerNorm(C)
        self.ln_kv = nn.LayerNorm(C)
        self.psi_proj = nn.Linear(E, C)
        self.attn = Attention(C, heads)
        self.ln_ff = nn.LayerNorm(C)
        self.ffn = FeedForward(C, ffn_mult)

    def forward(self, tokens: Tensor, image_tokens: Tensor, psi: Tensor) -> Tensor:
        # tokens: L x C; image_tokens: N x P x C; psi: N x E
        kv = self.ln_kv(image_tokens) + self.psi_proj(psi)[:, None, :]
        kv = kv.reshape(1, -1, kv.shape[-1])
        x = tokens[None]
        x = x + self.attn(self.ln_q(x), kv)
        x = x + self.ffn(self.ln_ff(x))
        return x[0]


class SelfLayer(nn.Module):
    def __init__(self, C: int, heads: int, ffn_mult: int):
        super().__init__()
        self.ln = nn.LayerNorm(C)
        self.attn = Attention(C, heads)
        self.ln_ff = nn.LayerNorm(C)
        self.ffn = FeedForward(C, ffn_mult)

    def forward(self, image_tokens: Tensor) -> Tensor:
        # frames in the batch dimension: attention never crosses frames
        h = self.ln(image_tokens)
        x = image_tokens + self.attn(h, h)
        return x + self.ffn(self.ln_ff(x))


class AggregatedBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig, shared: bool):
        super().__init__()
        self.head_cross = CrossLayer(cfg.C, cfg.n_cross_heads, cfg.E, cfg.ffn_mult)
        self.hair_cross = CrossLayer(cfg.C, cfg.n_cross_heads, cfg.E, cfg.ffn_mult)
        self.self_head = SelfLayer(cfg.C, cfg.n_self_heads, cfg.ffn_mult)
        self.shared = shared
        self.self_hair = None if shared else SelfLayer(cfg.C, cfg.n_self_heads, cfg.ffn_mult)

    def forward(self, head: Tensor, hair: Tensor, img_head: Tensor, img_hair: Tensor, psi: Tensor):
        head = self.head_cross(head, img_head, psi)
        hair = self.hair_cross(hair, img_hair, psi)
        img_head = self.self_head(img_head)
        img_hair = (self.self_head if self.shared else self.self_hair)(img_hair)
        return head, hair, img_head, img_hair

    def zero_outputs(self) -> None:
        for layer in (self.head_cross, self.hair_cross, self.self_head, self.self_hair):
            if layer is not None:
                zero_(layer.attn.out)
                zero_(layer.ffn.fc2)


def aggregated_block(block: AggregatedBlock, head: Tensor, hair: Tensor, image: Tensor, psi: Tensor,
                     image_hair: Optional[Tensor] = None):
    return block(head, hair, image, image if image_hair is None else image_hair, psi)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.blocks = nn.ModuleList([AggregatedBlock(cfg, shared) for shared in cfg.share_pattern])

    def forward(self, tokens: TokenSet, psi: Tensor) -> TokenSet:
        if psi.shape[0] != tokens.image_tokens.shape[0]:
            raise ValueError("need one expression vector per input frame")
        Hh, Wh, C = tokens.head_tokens.shape
        Hs, Ws, _ = tokens.hair_tokens.shape
        head = tokens.head_tokens.reshape(-1, C)
        hair = tokens.hair_tokens.reshape(-1, C)
        img_head = tokens.image_tokens
        img_hair = tokens.image_tokens if tokens.image_tokens_hair is None else tokens.image_tokens_hair
        for blk in self.blocks:
            head, hair, img_head, img_hair = blk(head, hair, img_head, img_hair, psi)
        return TokenSet(
            image_tokens=img_head,
            head_tokens=head.reshape(Hh, Wh, C),
            hair_tokens=hair.reshape(Hs, Ws, C),
            hair_base=tokens.hair_base,
            image_tokens_hair=img_hair,
        )

    def zero_outputs(self) -> None:
        for blk in self.blocks:
            blk.zero_outputs()


def run_backbone(backbone: Backbone, tokens: TokenSet, psi: Tensor) -> TokenSet:
    return backbone(tokens, psi)
