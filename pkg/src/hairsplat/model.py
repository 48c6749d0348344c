"""Full feed-forward model: captures -> fused tokens -> posed face + hair Gaussians."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import Backbone, BackboneConfig
from .config import ModelConfig
from .face_decoder import FaceDecoder, FaceLocalGaussians, apply_color_edit, decode_face_gaussians, face_branch
from .gaussians import GaussianSet
from .geometry import TemplateMesh, build_toy_head_template, pose_mesh, uv_position_map
from .hair_decoder import HairDecoder, StrandSet, decode_directions, decode_hair_appearance, hair_branch
from .tokenizers import CaptureSet, HairFeatureEncoder, HairTokenizer, HeadTokenizer, ImageEncoder, TokenSet, select_frontal

FROZEN_IN_REFINE = ("image_encoder", "head_tokenizer", "hair_encoder", "hair_tokenizer", "backbone")
DECODERS = ("face_decoder", "hair_decoder")


@dataclass
class TextureEdit:
    overlay: Tensor  # H_uv x W_uv x 3
    mask: Tensor  # H_uv x W_uv in [0, 1]


@dataclass
class Decoded:
    gaussians: GaussianSet
    face_local: FaceLocalGaussians
    strands: Optional[StrandSet]
    face_offsets_world: Optional[Tensor] = None  # K x 3, frame scale times local offset


class HairSplatModel(nn.Module):
    def __init__(self, cfg: ModelConfig, template: Optional[TemplateMesh] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.template = template if template is not None else build_toy_head_template(cfg.template_seed, cfg.E)
        if self.template.E != cfg.E:
            raise ValueError(f"template has {self.template.E} expression coefficients, config says {cfg.E}")
        _, self.head_binding = uv_position_map(self.template, cfg.head_uv, cfg.head_uv, "head")
        _, self.scalp_binding = uv_position_map(self.template, cfg.scalp_uv, cfg.scalp_uv, "scalp")
        self.image_encoder = ImageEncoder(cfg)
        self.head_tokenizer = HeadTokenizer(cfg)
        self.hair_encoder = HairFeatureEncoder(cfg)
        self.hair_tokenizer = HairTokenizer(cfg)
        self.backbone = Backbone(BackboneConfig.from_model(cfg))
        self.face_decoder = FaceDecoder(cfg)
        self.hair_decoder = HairDecoder(cfg)

    def shaped_vertices(self, shape_offsets: Optional[Tensor]) -> Tensor:
        v = self.template.vertices
        return v if shape_offsets is None else v + shape_offsets

    def uv_positions(self, shape_offsets: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        verts = self.shaped_vertices(shape_offsets)
        hp, _ = uv_position_map(self.template, self.cfg.head_uv, self.cfg.head_uv, "head", verts)
        sp, _ = uv_position_map(self.template, self.cfg.scalp_uv, self.cfg.scalp_uv, "scalp", verts)
        return hp, sp

    def tokenize(self, captures: CaptureSet, frontal: Optional[int] = None) -> Tuple[TokenSet, int]:
        """Pre-backbone token streams and the frontal frame index."""
        if frontal is None:
            frontal = select_frontal(captures.cameras)
        hp, sp = self.uv_positions(captures.shape_offsets)
        image_tokens = self.image_encoder(captures.images)
        head_tokens = self.head_tokenizer(hp, self.head_binding.valid)
        scalp_tokens = self.head_tokenizer(sp, self.scalp_binding.valid)
        hair_base = self.hair_encoder(captures.images[frontal])
        hair_tokens = self.hair_tokenizer(hair_base, image_tokens, scalp_tokens)
        return TokenSet(image_tokens, head_tokens, hair_tokens, hair_base), frontal

    def encode(self, captures: CaptureSet, frontal: Optional[int] = None) -> Tuple[TokenSet, int]:
        tokens, frontal = self.tokenize(captures, frontal)
        return self.backbone(tokens, captures.psi), frontal

    def decode(self, tokens: TokenSet, psi, shape_offsets: Optional[Tensor] = None, seed: int = 0,
               edit: Optional[TextureEdit] = None) -> Decoded:
        return decode_avatar(self, tokens, psi, shape_offsets, seed, face_edits=() if edit is None else (edit,))

    def forward(self, captures: CaptureSet, psi, seed: int = 0) -> Decoded:
        tokens, _ = self.encode(captures)
        return self.decode(tokens, psi, captures.shape_offsets, seed)

    def submodules(self, names) -> List[nn.Module]:
        return [getattr(self, n) for n in names]

    def state_arrays(self) -> Dict[str, Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}


def decode_avatar(parts, tokens: TokenSet, psi, shape_offsets: Optional[Tensor] = None, seed: int = 0,
                  face_edits: Sequence[TextureEdit] = (), hair_edits: Sequence[TextureEdit] = (),
                  hair_rest: Optional[Tensor] = None) -> Decoded:
    """Decode cached tokens under expression ``psi``.

    ``parts`` supplies cfg, template, head/scalp bindings and both decoders
    (a model or a bundle). ``hair_rest`` (M x 3 x 3) pre-rotates local strand
    directions; hairstyle transfer uses it to keep the donor's rest shape.
    """
    cfg = parts.cfg
    posed = pose_mesh(parts.template, psi, shape_offsets)
    local = decode_face_gaussians(tokens.head_tokens, parts.head_binding, parts.face_decoder)
    for e in face_edits:
        local = apply_color_edit(local, parts.head_binding, e.overlay, e.mask)
    face = face_branch(tokens.head_tokens, parts.head_binding, posed, parts.face_decoder, local=local)
    off = posed.frames.scale[face.face_index][:, None] * local.offsets
    if not cfg.hair_branch:
        return Decoded(face, local, None, off)
    sb = parts.scalp_binding
    hd = parts.hair_decoder
    dirs = decode_directions(tokens.hair_tokens, tokens.hair_base, cfg.gamma_coeff, hd, sb.valid)
    if hair_rest is not None:
        dirs = torch.einsum("mij,msj->msi", hair_rest.to(dirs.dtype), dirs)
    alpha, color = decode_hair_appearance(tokens.hair_tokens, hd)
    for e in hair_edits:
        if e.overlay.shape[:2] != sb.shape or e.mask.shape != sb.shape:
            raise ValueError(f"edit resolution {tuple(e.overlay.shape[:2])} does not match UV grid {sb.shape}")
        m = e.mask.to(color.dtype)[..., None]
        color = color * (1 - m) + e.overlay.to(color.dtype) * m
    hair, strands = hair_branch(tokens.hair_tokens, tokens.hair_base, sb, posed, hd, seed,
                                local_dirs=dirs, appearance=(alpha, color))
    return Decoded(GaussianSet.concat(face, hair), local, strands, off)
