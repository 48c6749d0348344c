"""Procedural ground-truth avatars and the on-disk multi-view dataset.

Each identity is a shaped toy head with a procedural skin texture (one
planar Gaussian per head-UV pixel) and parametric strands grown from the
scalp pixels. Ground truth uses the same binding and strand machinery as
the model, so a perfect prediction reproduces the images.

Dataset layout::

    <root>/dataset.json                     {"format", "version", "seed", "identities": [...]}
    <root>/<identity>/manifest.json         frames: image/mask paths, camera, psi, split
    <root>/<identity>/images/*.png          8-bit RGB
    <root>/<identity>/masks/hair_*.png      8-bit binary hair mask
    <root>/<identity>/masks/seg_*.png       8-bit RGB, R = face coverage, G = hair coverage
    <root>/<identity>/gt.hsa                ground-truth arrays (archive kind "gt_avatar")
    <root>/<identity>/gt_expr<k>.ply        ground-truth Gaussians per expression
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .archive import read_archive, write_archive
from .avatar_io import export_splat_ply
from .config import ModelConfig
from .face_decoder import FaceLocalGaussians
from .gaussians import FACE, GaussianSet
from .geometry import REGION_SCALP, TemplateMesh, bind_and_pose_gaussians, pose_mesh, triangle_frames, uv_position_map
from .hair_decoder import build_hair
from .render import Camera, orbit_camera, render
from .tokenizers import CaptureSet

log = logging.getLogger(__name__)

DATASET_FORMAT = "hairsplat-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class HairStyle:
    name: str = "long"
    length: float = 1.16  # mean strand arc length, world units
    length_jitter: float = 0.08
    curl_amp: float = 0.0
    curl_freq: float = 0.0
    gravity: float = 0.12
    color: tuple = (0.32, 0.2, 0.12)
    color_var: float = 0.15
    opacity: float = 0.92


STYLES = {
    "long": HairStyle(),
    "medium": HairStyle(name="medium", length=1.0, gravity=0.1, color=(0.12, 0.1, 0.09)),
    "short_curly": HairStyle(name="short_curly", length=0.6, curl_amp=0.6, curl_freq=9.0, gravity=0.05,
                             color=(0.45, 0.3, 0.16)),
}

SKIN_TONES = [(0.86, 0.68, 0.56), (0.72, 0.52, 0.40), (0.93, 0.78, 0.68), (0.55, 0.38, 0.28)]


@dataclass
class GTAvatar:
    shape_offsets: Tensor  # V x 3
    face: FaceLocalGaussians
    hair_dirs: Tensor  # M x S x 3, root-frame local
    density: Tensor  # H_s x W_s
    hair_alpha: Tensor  # H_s x W_s
    hair_color: Tensor  # H_s x W_s x 3
    seed: int = 0

    def gaussians(self, template: TemplateMesh, cfg: ModelConfig, psi, with_hair: bool = True) -> GaussianSet:
        posed = pose_mesh(template, psi, self.shape_offsets)
        _, hb = uv_position_map(template, cfg.head_uv, cfg.head_uv, "head")
        fi, bary = hb.flat_valid()
        f = self.face
        means, scales, quats = bind_and_pose_gaussians(f.offsets, f.scales, f.quats, fi, bary, posed)
        face = GaussianSet(means, scales, quats, f.opacities, f.colors,
                           torch.full((len(means),), FACE, dtype=torch.int64), fi, bary)
        if not with_hair:
            return face
        _, sb = uv_position_map(template, cfg.scalp_uv, cfg.scalp_uv, "scalp")
        hair, _ = build_hair(self.hair_dirs, self.density, self.hair_alpha, self.hair_color, sb, posed, cfg, self.seed)
        return GaussianSet.concat(face, hair)

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {"shape_offsets": self.shape_offsets, "hair_dirs": self.hair_dirs, "density": self.density,
               "hair_alpha": self.hair_alpha, "hair_color": self.hair_color}
        for k in ("offsets", "scales", "quats", "opacities", "colors"):
            out["face." + k] = getattr(self.face, k)
        return {k: v.numpy() for k, v in out.items()}

    @classmethod
    def from_arrays(cls, a: Dict[str, np.ndarray], seed: int = 0) -> "GTAvatar":
        T = lambda k: torch.from_numpy(a[k].copy())
        face = FaceLocalGaussians(*(T("face." + k) for k in ("offsets", "scales", "quats", "opacities", "colors")))
        return cls(T("shape_offsets"), face, T("hair_dirs"), T("density"), T("hair_alpha"), T("hair_color"), seed)


# ---------------------------------------------------------------------------
# Procedural content


def _smooth(lo, hi, x):
    t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def shape_field(template: TemplateMesh, rng: np.random.Generator, amp: float = 0.04) -> Tensor:
    v = template.vertices.numpy().astype(np.float64)
    d = v / np.linalg.norm(v, axis=1, keepdims=True)
    out = np.zeros_like(v)
    for _ in range(4):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        w = np.exp(-np.sum((d - c) ** 2, axis=1) / (2 * 0.45**2))
        out += w[:, None] * d * rng.uniform(-amp, amp)
    return torch.from_numpy(out.astype(np.float32))


def face_texture(p: np.ndarray, scalp: np.ndarray, skin, hair_color, rng: np.random.Generator) -> np.ndarray:
    """Procedural albedo at canonical positions p (K x 3)."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    col = np.tile(np.asarray(skin, dtype=np.float64), (len(p), 1))
    for _ in range(3):
        k = rng.normal(size=3) * 3.0
        ph = rng.uniform(0, 2 * np.pi)
        col *= (1 + 0.04 * np.sin(p @ k + ph))[:, None]
    front = _smooth(0.2, 0.5, z)
    # cheeks
    for sx in (-1, 1):
        w = np.exp(-((x - 0.42 * sx) ** 2 + (y + 0.12) ** 2) / (2 * 0.12**2)) * front
        col = col * (1 - 0.35 * w[:, None]) + 0.35 * w[:, None] * np.array([0.9, 0.45, 0.45])
    # lips
    r_lip = ((x / 0.2) ** 2 + ((y + 0.48) / 0.07) ** 2)
    w = (1 - _smooth(0.7, 1.0, r_lip)) * front
    col = col * (1 - w[:, None]) + w[:, None] * np.array([0.72, 0.2, 0.22])
    # eyes and brows
    for sx in (-1, 1):
        r = np.sqrt((x - 0.3 * sx) ** 2 + (y - 0.2) ** 2)
        w = (1 - _smooth(0.09, 0.12, r)) * front
        col = col * (1 - w[:, None]) + w[:, None] * np.array([0.95, 0.95, 0.92])
        w = (1 - _smooth(0.04, 0.06, r)) * front
        col = col * (1 - w[:, None]) + w[:, None] * np.array([0.15, 0.25, 0.35])
        brow = (1 - _smooth(0.025, 0.04, np.abs(y - 0.38 - 0.05 * (1 - ((x - 0.3 * sx) / 0.15) ** 2))))
        brow *= (1 - _smooth(0.13, 0.16, np.abs(x - 0.3 * sx))) * front
        col = col * (1 - brow[:, None]) + brow[:, None] * np.asarray(hair_color) * 0.7
    # nose shading
    w = np.exp(-((np.abs(x) - 0.1) ** 2 / (2 * 0.03**2) + (y + 0.05) ** 2 / (2 * 0.12**2))) * front
    col *= (1 - 0.25 * w)[:, None]
    col[scalp] = 0.6 * np.asarray(hair_color) + 0.4 * col[scalp] * 0.5
    return np.clip(col, 0.0, 1.0)


def _vertex_radius(verts: np.ndarray):
    r = np.linalg.norm(verts, axis=1)
    return verts / r[:, None], r


def grow_strands(roots: np.ndarray, normals: np.ndarray, verts: np.ndarray, style: HairStyle, S: int,
                 rng: np.random.Generator) -> np.ndarray:
    """World-space segment vectors (M x S x 3) of strands grown with gravity, curl and head collision."""
    M = len(roots)
    vdir, vrad = _vertex_radius(verts.astype(np.float64))
    L = style.length * (1 + style.length_jitter * rng.uniform(-1, 1, size=M))
    seg = (L / S)[:, None]
    side = np.sign(roots[:, 0]) * np.minimum(np.abs(roots[:, 0]) * 1.5, 1.0)
    # comb frontal roots backwards so the face stays visible
    front = _smooth(0.0, 0.6, roots[:, 2])
    g = np.stack([0.35 * side, -np.ones(M), -0.45 - 1.6 * front], axis=1)
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=M)
    p = roots.astype(np.float64).copy()
    d = normals.astype(np.float64).copy()
    out = np.zeros((M, S, 3))
    for s in range(S):
        d = d + style.gravity * g
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        step = d
        if style.curl_amp > 0:
            u = np.cross(d, g)
            u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-9)
            v = np.cross(d, u)
            ang = style.curl_freq * 2 * np.pi * s / S + phase
            step = d + style.curl_amp * (np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v)
            step /= np.linalg.norm(step, axis=1, keepdims=True)
        q = p + seg * step
        qn = np.linalg.norm(q, axis=1)
        nearest = np.argmax((q / qn[:, None]) @ vdir.T, axis=1)
        shell = 1.04 * vrad[nearest] + 0.01
        inside = qn < shell
        if inside.any():
            q[inside] = q[inside] / qn[inside, None] * shell[inside, None]
        step = q - p
        step = step / np.linalg.norm(step, axis=1, keepdims=True) * seg
        out[:, s] = step
        p = p + step
    return out


def build_gt_avatar(template: TemplateMesh, cfg: ModelConfig, seed: int, style: HairStyle,
                    skin=None) -> GTAvatar:
    rng = np.random.default_rng(seed)
    shape = shape_field(template, rng)
    verts = template.vertices + shape
    hp, hb = uv_position_map(template, cfg.head_uv, cfg.head_uv, "head", verts)
    skin = SKIN_TONES[seed % len(SKIN_TONES)] if skin is None else skin
    valid = hb.valid
    p = hp[valid].numpy().astype(np.float64)
    scalp = hb.region[valid].numpy() == REGION_SCALP
    colors = face_texture(p, scalp, skin, style.color, rng)
    fi, _ = hb.flat_valid()
    frames = triangle_frames(verts, template.faces)
    fscale = frames.scale[fi].numpy().astype(np.float64)
    K = len(p)
    world_sigma = np.array([0.055, 0.055, 0.01])
    face = FaceLocalGaussians(
        offsets=torch.zeros(K, 3),
        scales=torch.from_numpy((world_sigma[None, :] / fscale[:, None]).astype(np.float32)),
        quats=torch.tensor([[1.0, 0.0, 0.0, 0.0]]).repeat(K, 1),
        opacities=torch.full((K,), 0.97),
        colors=torch.from_numpy(colors.astype(np.float32)),
    )

    sp, sb = uv_position_map(template, cfg.scalp_uv, cfg.scalp_uv, "scalp", verts)
    sfi, _ = sb.flat_valid()
    roots = sp[sb.valid].numpy().astype(np.float64)
    R = frames.rotation[sfi].numpy().astype(np.float64)
    world = grow_strands(roots, R[:, :, 2], verts.numpy(), style, cfg.S, rng)
    local = np.einsum("mji,msj->msi", R, world)  # R^T d

    Hs = cfg.scalp_uv
    uu, vv = np.meshgrid((np.arange(Hs) + 0.5) / Hs, (np.arange(Hs) + 0.5) / Hs)
    pos = sp.numpy().astype(np.float64)
    # thinner at the frontal hairline
    frontness = pos[..., 2] - 0.6 * pos[..., 1]
    density = 1.0 - 0.7 * _smooth(0.1, 0.45, frontness)
    density = density * sb.valid.numpy()
    shade = 1 + style.color_var * (np.sin(5 * uu + 2 * vv) * 0.6 + rng.uniform(-0.4, 0.4, size=uu.shape))
    hair_color = np.clip(np.asarray(style.color)[None, None, :] * shade[..., None], 0, 1)
    return GTAvatar(
        shape_offsets=shape, face=face,
        hair_dirs=torch.from_numpy(local.astype(np.float32)),
        density=torch.from_numpy(density.astype(np.float32)),
        hair_alpha=torch.full((Hs, Hs), style.opacity),
        hair_color=torch.from_numpy(hair_color.astype(np.float32)),
        seed=seed,
    )


def expression_set(n: int, E: int, rng: np.random.Generator) -> np.ndarray:
    """Expression 0 is neutral; the rest open the jaw and mix the other blendshapes."""
    psis = np.zeros((n, E), dtype=np.float32)
    for k in range(1, n):
        psis[k, 0] = rng.uniform(0.5, 1.2)
        psis[k, 1:] = np.clip(rng.normal(scale=0.8, size=E - 1), -2, 2)
    return psis


CAMERA_RIG = {"radius": 5.0, "fov_deg": 40.0, "target": (0.0, -0.1, 0.0)}


def train_cameras(n_views: int, size: int, elevation: float = 10.0) -> List[Camera]:
    return [orbit_camera(k * 360.0 / n_views, elevation, size=size, **CAMERA_RIG) for k in range(n_views)]


def heldout_cameras(n_views: int, size: int, elevation: float = 10.0) -> List[Camera]:
    """Ring at half-step azimuth offsets and a different elevation."""
    step = 360.0 / n_views
    return [orbit_camera(step / 2 + k * step, elevation - 5.0, size=size, **CAMERA_RIG) for k in range(n_views)]


# ---------------------------------------------------------------------------
# Disk I/O


def to_png(img: Tensor) -> np.ndarray:
    return np.clip(np.rint(img.detach().numpy().astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: Tensor) -> None:
    arr = to_png(img)
    Image.fromarray(arr).save(path)


def load_png(path) -> Tensor:
    arr = np.asarray(Image.open(path))
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def _camera_json(cam: Camera) -> dict:
    return {"K": cam.K.tolist(), "w2c": cam.w2c.tolist(), "height": cam.height, "width": cam.width}


def camera_from_json(d: dict) -> Camera:
    return Camera(torch.tensor(d["K"], dtype=torch.float32), torch.tensor(d["w2c"], dtype=torch.float32),
                  int(d["height"]), int(d["width"]))


def render_frame(g: GaussianSet, cam: Camera, bg=(0.0, 0.0, 0.0)):
    with torch.no_grad():
        out = render(g, cam, bg, semantic=True)
    return out.rgb, out.semantic


def generate_identity(out_dir, template: TemplateMesh, cfg: ModelConfig, seed: int, style: HairStyle,
                      n_views: int = 6, n_expressions: int = 2, n_heldout: Optional[int] = None,
                      bg=(0.0, 0.0, 0.0), name: Optional[str] = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    gt = build_gt_avatar(template, cfg, seed, style)
    psis = expression_set(n_expressions, cfg.E, np.random.default_rng(seed + 7919))
    n_heldout = n_views if n_heldout is None else n_heldout
    cams = {"train": train_cameras(n_views, cfg.image_size), "heldout": heldout_cameras(n_heldout, cfg.image_size)}
    frames = []
    gt_arrays = gt.arrays()
    for e, psi in enumerate(psis):
        g = gt.gaussians(template, cfg, torch.from_numpy(psi))
        export_splat_ply(g, out / f"gt_expr{e}.ply")
        for k, v in (("means", g.means), ("scales", g.scales), ("quats", g.quats), ("opacities", g.opacities),
                     ("colors", g.colors), ("semantic", g.semantic)):
            gt_arrays[f"gaussians.{e}.{k}"] = v.numpy()
        for split, cam_list in cams.items():
            for v, cam in enumerate(cam_list):
                rgb, sem = render_frame(g, cam, bg)
                stem = f"{split}_e{e}_v{v}"
                save_png(out / "images" / f"{stem}.png", rgb)
                hair = (sem[..., 1] > 0.5).float()
                save_png(out / "masks" / f"hair_{stem}.png", hair)
                seg = torch.cat([sem, torch.zeros_like(sem[..., :1])], dim=-1)
                save_png(out / "masks" / f"seg_{stem}.png", seg)
                frames.append({
                    "image": f"images/{stem}.png", "hair_mask": f"masks/hair_{stem}.png",
                    "seg_mask": f"masks/seg_{stem}.png", "camera": _camera_json(cam),
                    "psi": [float(x) for x in psi], "expression": e, "view": v, "split": split,
                })
    write_archive(out / "gt.hsa", gt_arrays, {"seed": seed, "style": asdict(style)}, kind="gt_avatar")
    manifest = {"identity": name or out.name, "seed": seed, "style": asdict(style), "bg": list(bg),
                "n_views": n_views, "n_expressions": n_expressions, "frames": frames}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def generate_synthetic_dataset(root, seed: int = 0, n_identities: int = 1, n_views: int = 6, n_expressions: int = 2,
                               styles: Optional[Sequence[str]] = None, cfg: Optional[ModelConfig] = None,
                               template: Optional[TemplateMesh] = None, bg=(0.0, 0.0, 0.0)) -> Path:
    from .geometry import build_toy_head_template

    cfg = cfg or ModelConfig()
    template = template or build_toy_head_template(cfg.template_seed, cfg.E)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    styles = list(styles) if styles else ["long"]
    ids = []
    for i in range(n_identities):
        style = STYLES[styles[i % len(styles)]]
        name = f"id_{i:03d}"
        generate_identity(root / name, template, cfg, seed * 1000 + i, style, n_views, n_expressions, bg=bg, name=name)
        ids.append(name)
    meta = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "seed": seed, "identities": ids,
            "image_size": cfg.image_size, "n_views": n_views, "n_expressions": n_expressions}
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


# ---------------------------------------------------------------------------
# Loading


@dataclass
class IdentityData:
    name: str
    train: CaptureSet
    heldout: CaptureSet
    train_meta: List[dict]
    heldout_meta: List[dict]
    bg: tuple = (0.0, 0.0, 0.0)
    gt: Optional[GTAvatar] = None
    gt_gaussians: Dict[int, GaussianSet] = field(default_factory=dict)

    def frames(self, split: str = "train"):
        return self.train_meta if split == "train" else self.heldout_meta


def _captures(base: Path, frames: List[dict], shape_offsets: Optional[Tensor]) -> CaptureSet:
    images = torch.stack([load_png(base / f["image"]) for f in frames])
    hair = torch.stack([load_png(base / f["hair_mask"]) for f in frames])
    seg = torch.stack([load_png(base / f["seg_mask"])[..., :2] for f in frames])
    return CaptureSet(images=images, cameras=[camera_from_json(f["camera"]) for f in frames],
                      psi=torch.tensor([f["psi"] for f in frames], dtype=torch.float32),
                      hair_masks=hair, seg_masks=seg, shape_offsets=shape_offsets)


def load_identity(path) -> IdentityData:
    base = Path(path)
    try:
        manifest = json.loads((base / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read identity manifest in {base}: {exc}") from exc
    gt, gts, shape = None, {}, None
    if (base / "gt.hsa").exists():
        arrays, meta = read_archive(base / "gt.hsa", kind="gt_avatar")
        gt = GTAvatar.from_arrays(arrays, int(meta.get("seed", 0)))
        shape = gt.shape_offsets
        for e in range(int(manifest.get("n_expressions", 0))):
            pre = f"gaussians.{e}."
            if pre + "means" in arrays:
                T = lambda k: torch.from_numpy(arrays[pre + k].copy())
                gts[e] = GaussianSet(T("means"), T("scales"), T("quats"), T("opacities"), T("colors"), T("semantic"))
    train = [f for f in manifest["frames"] if f["split"] == "train"]
    held = [f for f in manifest["frames"] if f["split"] == "heldout"]
    if not train:
        raise ValueError(f"identity {base} has no training frames")
    return IdentityData(
        name=manifest.get("identity", base.name),
        train=_captures(base, train, shape), heldout=_captures(base, held, shape) if held else None,
        train_meta=train, heldout_meta=held, bg=tuple(manifest.get("bg", (0.0, 0.0, 0.0))), gt=gt, gt_gaussians=gts,
    )


def load_dataset(root) -> List[IdentityData]:
    root = Path(root)
    try:
        meta = json.loads((root / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read dataset index {root / 'dataset.json'}: {exc}") from exc
    if meta.get("format") != DATASET_FORMAT:
        raise ValueError(f"{root} is not a {DATASET_FORMAT} directory")
    return [load_identity(root / name) for name in meta["identities"]]
