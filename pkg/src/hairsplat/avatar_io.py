"""Avatar bundles, splat PLY interchange, hairstyle transfer and UV texture edits."""

import hashlib
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from . import __version__
from .archive import ArchiveError, read_archive, write_archive
from .config import Config, ConfigError, ModelConfig, config_hash
from .face_decoder import FaceDecoder
from .gaussians import FACE, HAIR, GaussianSet
from .geometry import TemplateMesh, triangle_frames, uv_position_map
from .hair_decoder import HairDecoder
from .model import Decoded, TextureEdit, decode_avatar
from .tokenizers import TokenSet

SH_C0 = 0.28209479177387814


class BundleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Bundle


@dataclass
class AvatarBundle:
    """Everything needed to re-decode one identity without the encoders."""

    cfg: ModelConfig
    template: TemplateMesh
    shape_offsets: Tensor  # V x 3
    head_tokens: Tensor
    hair_tokens: Tensor
    hair_base: Tensor
    weights: Dict[str, Tensor]  # "face_decoder.*" and "hair_decoder.*"
    frontal: int = 0
    seed: int = 0
    hair_rest: Optional[Tensor] = None  # M x 3 x 3, set by hairstyle transfer
    face_edits: Tuple[TextureEdit, ...] = ()
    hair_edits: Tuple[TextureEdit, ...] = ()
    meta: Dict = field(default_factory=dict)

    @cached_property
    def head_binding(self):
        return uv_position_map(self.template, self.cfg.head_uv, self.cfg.head_uv, "head")[1]

    @cached_property
    def scalp_binding(self):
        return uv_position_map(self.template, self.cfg.scalp_uv, self.cfg.scalp_uv, "scalp")[1]

    @cached_property
    def face_decoder(self) -> FaceDecoder:
        return _load_part(FaceDecoder(self.cfg), self.weights, "face_decoder.")

    @cached_property
    def hair_decoder(self) -> HairDecoder:
        return _load_part(HairDecoder(self.cfg), self.weights, "hair_decoder.")

    @property
    def tokens(self) -> TokenSet:
        return TokenSet(image_tokens=torch.zeros(0, 0, self.cfg.C), head_tokens=self.head_tokens,
                        hair_tokens=self.hair_tokens, hair_base=self.hair_base)

    def decode(self, psi=None, seed: Optional[int] = None) -> Decoded:
        psi = torch.zeros(self.cfg.E) if psi is None else psi
        with torch.no_grad():
            return decode_avatar(self, self.tokens, psi, self.shape_offsets, self.seed if seed is None else seed,
                                 face_edits=self.face_edits, hair_edits=self.hair_edits, hair_rest=self.hair_rest)

    def gaussians(self, psi=None) -> GaussianSet:
        return self.decode(psi).gaussians

    def config_hash(self) -> str:
        return config_hash(self.cfg)


def _load_part(module, weights: Dict[str, Tensor], prefix: str):
    sd = {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}
    try:
        module.load_state_dict(sd)
    except RuntimeError as exc:
        raise BundleError(f"decoder weights do not match the configuration: {exc}") from exc
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def decoder_weights(face_decoder, hair_decoder) -> Dict[str, Tensor]:
    out = {}
    for prefix, mod in (("face_decoder.", face_decoder), ("hair_decoder.", hair_decoder)):
        for k, v in mod.state_dict().items():
            out[prefix + k] = v.detach().clone()
    return out


def _np(t: Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def _weights_hash(arrays: Dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        if k.startswith("weights."):
            h.update(k.encode())
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
    return h.hexdigest()[:16]


def save_bundle(bundle: AvatarBundle, path) -> None:
    t = bundle.template
    arrays = {
        "template.vertices": _np(t.vertices), "template.faces": _np(t.faces), "template.uv_coords": _np(t.uv_coords),
        "template.scalp_faces": _np(t.scalp_faces), "template.blend_basis": _np(t.blend_basis),
        "shape_offsets": _np(bundle.shape_offsets),
        "tokens.head": _np(bundle.head_tokens), "tokens.hair": _np(bundle.hair_tokens),
        "tokens.hair_base": _np(bundle.hair_base),
    }
    for k, v in bundle.weights.items():
        arrays["weights." + k] = _np(v)
    if bundle.hair_rest is not None:
        arrays["hair_rest"] = _np(bundle.hair_rest)
    for tag, edits in (("face", bundle.face_edits), ("hair", bundle.hair_edits)):
        for i, e in enumerate(edits):
            arrays[f"edit.{tag}.{i:03d}.overlay"] = _np(e.overlay)
            arrays[f"edit.{tag}.{i:03d}.mask"] = _np(e.mask)
    meta = dict(bundle.meta)
    meta.update({
        "config": Config(model=bundle.cfg).to_dict()["model"],
        "config_hash": bundle.config_hash(),
        "weights_hash": _weights_hash(arrays),
        "frontal": int(bundle.frontal),
        "seed": int(bundle.seed),
        "n_face_edits": len(bundle.face_edits),
        "n_hair_edits": len(bundle.hair_edits),
    })
    meta.setdefault("created_by", f"hairsplat {__version__}")
    write_archive(path, arrays, meta, kind="bundle")


def load_bundle(path) -> AvatarBundle:
    try:
        arrays, meta = read_archive(path, kind="bundle")
    except ArchiveError as exc:
        raise BundleError(str(exc)) from exc
    try:
        cfg = Config.from_dict({"model": meta["config"]}).model
    except (KeyError, ConfigError) as exc:
        raise BundleError(f"bundle has an invalid configuration: {exc}") from exc
    if config_hash(cfg) != meta.get("config_hash"):
        raise BundleError("config hash mismatch: bundle metadata was modified or written by another version")
    if _weights_hash(arrays) != meta.get("weights_hash"):
        raise BundleError("weights hash mismatch: bundle arrays are corrupted")
    T = lambda k: torch.from_numpy(arrays[k].copy())
    try:
        template = TemplateMesh(T("template.vertices"), T("template.faces"), T("template.uv_coords"),
                                T("template.scalp_faces"), T("template.blend_basis"))
        edits = {}
        for tag in ("face", "hair"):
            edits[tag] = tuple(TextureEdit(T(f"edit.{tag}.{i:03d}.overlay"), T(f"edit.{tag}.{i:03d}.mask"))
                               for i in range(int(meta.get(f"n_{tag}_edits", 0))))
        keep_meta = {k: v for k, v in meta.items() if k not in (
            "config", "config_hash", "weights_hash", "frontal", "seed", "n_face_edits", "n_hair_edits")}
        bundle = AvatarBundle(
            cfg=cfg, template=template, shape_offsets=T("shape_offsets"),
            head_tokens=T("tokens.head"), hair_tokens=T("tokens.hair"), hair_base=T("tokens.hair_base"),
            weights={k[len("weights."):]: T(k) for k in sorted(arrays) if k.startswith("weights.")},
            frontal=int(meta["frontal"]), seed=int(meta["seed"]),
            hair_rest=T("hair_rest") if "hair_rest" in arrays else None,
            face_edits=edits["face"], hair_edits=edits["hair"], meta=keep_meta,
        )
    except KeyError as exc:
        raise BundleError(f"bundle is missing {exc}") from exc
    _validate_bundle(bundle)
    return bundle


def _validate_bundle(b: AvatarBundle) -> None:
    cfg = b.cfg
    if tuple(b.head_tokens.shape) != (cfg.head_uv, cfg.head_uv, cfg.C):
        raise BundleError(f"head tokens {tuple(b.head_tokens.shape)} do not match the configuration")
    if tuple(b.hair_tokens.shape) != (cfg.scalp_uv, cfg.scalp_uv, cfg.C):
        raise BundleError(f"hair tokens {tuple(b.hair_tokens.shape)} do not match the configuration")
    if tuple(b.hair_base.shape) != (cfg.scalp_uv, cfg.scalp_uv, cfg.C_hair):
        raise BundleError(f"hair features {tuple(b.hair_base.shape)} do not match the configuration")
    b.face_decoder, b.hair_decoder  # builds and checks weight shapes


# ---------------------------------------------------------------------------
# Splat PLY


_PLY_FLOATS = (["x", "y", "z", "nx", "ny", "nz"] + [f"f_dc_{i}" for i in range(3)] + ["opacity"]
               + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
_PLY_DTYPE = np.dtype([(n, "<f4") for n in _PLY_FLOATS] + [("semantic", "u1")])


@dataclass
class SplatCloud:
    """Raw PLY fields: SH DC color, opacity logit, log scales."""

    xyz: np.ndarray
    f_dc: np.ndarray
    opacity: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    semantic: np.ndarray

    @classmethod
    def from_gaussians(cls, g: GaussianSet) -> "SplatCloud":
        a = np.clip(_np(g.opacities).astype(np.float64), 1e-7, 1 - 1e-7)
        return cls(
            xyz=_np(g.means).astype(np.float32),
            f_dc=((_np(g.colors).astype(np.float64) - 0.5) / SH_C0).astype(np.float32),
            opacity=np.log(a / (1 - a)).astype(np.float32),
            log_scale=np.log(_np(g.scales).astype(np.float64)).astype(np.float32),
            rot=_np(g.quats).astype(np.float32),
            semantic=_np(g.semantic).astype(np.uint8),
        )

    def to_gaussians(self) -> GaussianSet:
        f = lambda x: torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        op = 1.0 / (1.0 + np.exp(-self.opacity.astype(np.float64)))
        return GaussianSet(
            means=f(self.xyz), scales=f(np.exp(self.log_scale.astype(np.float64))), quats=f(self.rot),
            opacities=f(op), colors=f(0.5 + SH_C0 * self.f_dc.astype(np.float64)),
            semantic=torch.from_numpy(self.semantic.astype(np.int64)),
        )


def write_splat_ply(cloud: SplatCloud, path) -> None:
    n = len(cloud.xyz)
    rec = np.zeros(n, dtype=_PLY_DTYPE)
    for i, c in enumerate("xyz"):
        rec[c] = cloud.xyz[:, i]
    for i in range(3):
        rec[f"f_dc_{i}"] = cloud.f_dc[:, i]
        rec[f"scale_{i}"] = cloud.log_scale[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rot[:, i]
    rec["opacity"] = cloud.opacity
    rec["semantic"] = cloud.semantic
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in _PLY_FLOATS] + ["property uchar semantic", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_splat_ply(path) -> SplatCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path} is not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    n = None
    props = []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append((parts[2], parts[1]))
    expected = [(p, "float") for p in _PLY_FLOATS] + [("semantic", "uchar")]
    if n is None or props != expected:
        raise ValueError("PLY properties do not match the splat layout")
    body = data[end + len(b"end_header\n"):]
    if len(body) != n * _PLY_DTYPE.itemsize:
        raise ValueError(f"PLY body has {len(body)} bytes, expected {n * _PLY_DTYPE.itemsize}")
    rec = np.frombuffer(body, dtype=_PLY_DTYPE, count=n)
    return SplatCloud(
        xyz=np.stack([rec[c] for c in "xyz"], axis=1),
        f_dc=np.stack([rec[f"f_dc_{i}"] for i in range(3)], axis=1),
        opacity=rec["opacity"].copy(),
        log_scale=np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1),
        rot=np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1),
        semantic=rec["semantic"].copy(),
    )


def export_splat_ply(g: GaussianSet, path) -> None:
    write_splat_ply(SplatCloud.from_gaussians(g), path)


def import_splat_ply(path) -> GaussianSet:
    return read_splat_ply(path).to_gaussians()


# ---------------------------------------------------------------------------
# Applications


def _same_topology(a: AvatarBundle, b: AvatarBundle) -> None:
    ta, tb = a.template, b.template
    if ta.faces.shape != tb.faces.shape or not torch.equal(ta.faces, tb.faces):
        raise BundleError("avatars use different template topologies")
    if not torch.equal(ta.scalp_faces, tb.scalp_faces) or not torch.equal(ta.uv_coords, tb.uv_coords):
        raise BundleError("avatars use different scalp UV layouts")
    if (a.cfg.scalp_uv, a.cfg.C, a.cfg.C_hair, a.cfg.S) != (b.cfg.scalp_uv, b.cfg.C, b.cfg.C_hair, b.cfg.S):
        raise BundleError("avatars use incompatible hair configurations")


def transfer_hair(a: AvatarBundle, b: AvatarBundle) -> AvatarBundle:
    """A's face with B's hair.

    Roots are re-bound to A's scalp, which moves each root by the shaped
    vertex offset between the identities at its anchor. A per-strand rest
    rotation keeps B's rest strand shape, while animation follows A's
    scalp frames.
    """
    _same_topology(a, b)
    rest = b.hair_rest
    va = a.template.vertices + a.shape_offsets
    vb = b.template.vertices + b.shape_offsets
    if not torch.equal(va, vb):
        fi, _ = a.scalp_binding.flat_valid()
        ra = triangle_frames(va, a.template.faces).rotation[fi]
        rb = triangle_frames(vb, b.template.faces).rotation[fi]
        q = ra.transpose(-1, -2) @ rb
        rest = q if rest is None else q @ rest
    weights = {k: v for k, v in a.weights.items() if k.startswith("face_decoder.")}
    weights.update({k: v for k, v in b.weights.items() if k.startswith("hair_decoder.")})
    cfg = replace(a.cfg, hair_branch=b.cfg.hair_branch, gamma_coeff=b.cfg.gamma_coeff, S0=b.cfg.S0, r0=b.cfg.r0)
    return AvatarBundle(
        cfg=cfg, template=a.template, shape_offsets=a.shape_offsets,
        head_tokens=a.head_tokens, hair_tokens=b.hair_tokens, hair_base=b.hair_base, weights=weights,
        frontal=a.frontal, seed=b.seed, hair_rest=rest, face_edits=a.face_edits, hair_edits=b.hair_edits,
        meta=dict(a.meta) if a is b else {**a.meta, "hair_from": b.meta.get("identity", "unknown")},
    )


def edit_texture(bundle: AvatarBundle, overlay: Tensor, mask: Tensor, region: str = "head") -> AvatarBundle:
    """Composite a UV overlay onto decoded colors; head edits the face branch, scalp the hair colors."""
    cfg = bundle.cfg
    size = {"head": cfg.head_uv, "scalp": cfg.scalp_uv}.get(region)
    if size is None:
        raise ValueError(f"unknown edit region {region!r}")
    overlay = torch.as_tensor(overlay, dtype=torch.float32)
    mask = torch.as_tensor(mask, dtype=torch.float32)
    if tuple(overlay.shape) != (size, size, 3) or tuple(mask.shape) != (size, size):
        raise ValueError(f"{region} edit must be {size}x{size}, got overlay {tuple(overlay.shape)} and mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        return bundle
    e = TextureEdit(overlay.clamp(0, 1), mask.clamp(0, 1))
    if region == "head":
        return replace(bundle, face_edits=bundle.face_edits + (e,))
    return replace(bundle, hair_edits=bundle.hair_edits + (e,))


def semantic_counts(g: GaussianSet) -> Dict[str, int]:
    return {"face": int((g.semantic == FACE).sum()), "hair": int((g.semantic == HAIR).sum())}
