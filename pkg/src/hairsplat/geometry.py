"""Template head geometry, UV binding and expression posing.

Conventions: world space is y-up with the face looking down +z. UV
coordinates live in a single [0, 1]^2 atlas holding two disk charts, one for
the face/neck surface and one for the scalp cap. The ``scalp`` UV region is
the bounding square of the scalp chart, resampled onto its own grid.

Face offsets decoded per UV pixel are expressed in the bound triangle's local
frame (multiples of the frame scale), so they follow the mesh under
expression changes and scale with it.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from torch import Tensor

from .archive import read_archive, write_archive
from .rotations import quat_multiply, quat_normalize, rotmat_to_quat

REGION_FACE = 0
REGION_SCALP = 1

# atlas layout: (center_u, center_v, radius)
FACE_CHART = (0.34, 0.34, 0.33)
SCALP_CHART = (0.75, 0.75, 0.24)
REGION_RECTS = {
    "head": (0.0, 0.0, 1.0, 1.0),
    "scalp": (SCALP_CHART[0] - SCALP_CHART[2], SCALP_CHART[1] - SCALP_CHART[2],
              SCALP_CHART[0] + SCALP_CHART[2], SCALP_CHART[1] + SCALP_CHART[2]),
}


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TemplateMesh:
    vertices: Tensor  # V x 3
    faces: Tensor  # F x 3 (int64)
    uv_coords: Tensor  # F x 3 x 2, per face corner
    scalp_faces: Tensor  # indices into faces
    blend_basis: Tensor  # V x 3 x E

    @property
    def E(self) -> int:
        return int(self.blend_basis.shape[-1])

    @property
    def num_vertices(self) -> int:
        return int(self.vertices.shape[0])

    def scalp_mask(self) -> np.ndarray:
        m = np.zeros(self.faces.shape[0], dtype=bool)
        m[self.scalp_faces.numpy()] = True
        return m

    def mean_edge_length(self) -> float:
        v = self.vertices.double()
        f = self.faces
        e = torch.cat([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]], v[f[:, 0]] - v[f[:, 2]]])
        return float(e.norm(dim=-1).mean())

    def validate(self) -> None:
        V = self.vertices.shape[0]
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise GeometryError("vertices must be V x 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError("faces must be F x 3")
        if int(self.faces.min()) < 0 or int(self.faces.max()) >= V:
            raise GeometryError("face index out of range")
        F = self.faces.shape[0]
        if tuple(self.uv_coords.shape) != (F, 3, 2):
            raise GeometryError("uv_coords must be F x 3 x 2")
        if len(self.scalp_faces) == 0 or int(self.scalp_faces.min()) < 0 or int(self.scalp_faces.max()) >= F:
            raise GeometryError("scalp_faces must be a nonempty subset of faces")
        if self.blend_basis.ndim != 3 or self.blend_basis.shape[:2] != (V, 3):
            raise GeometryError("blend_basis must be V x 3 x E")
        if not torch.isfinite(self.blend_basis).all():
            raise GeometryError("blend_basis has non-finite entries")
        uv = self.uv_coords.double()
        area = _signed_area(uv[:, 0], uv[:, 1], uv[:, 2]).abs()
        bad = torch.nonzero(area <= 1e-12).flatten()
        if len(bad):
            raise GeometryError(f"degenerate UV triangle(s): faces {bad[:8].tolist()}")


def _signed_area(a: Tensor, b: Tensor, c: Tensor) -> Tensor:
    return 0.5 * ((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (c[..., 0] - a[..., 0]) * (b[..., 1] - a[..., 1]))


def build_toy_head_template(seed: int = 0, E: int = 8, n_lat: int = 24, n_lon: int = 32) -> TemplateMesh:
    """Procedural head: a bumped ellipsoid on a polar grid tilted up-and-back.

    The grid pole sits on the crown, so the scalp is the top block of
    latitude rings and both UV charts are polar disks without seams.
    Column 0 of the blend basis opens the jaw; the remaining columns are
    seeded smooth displacement fields.
    """
    E = int(max(1, min(E, 64)))
    n_lat = int(max(8, n_lat))
    n_lon = int(max(8, n_lon))
    rng = np.random.default_rng(seed)

    tilt = np.deg2rad(25.0)
    axis = np.array([0.0, np.cos(tilt), -np.sin(tilt)])
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = np.cross(axis, e1)

    thetas = np.arange(1, n_lat) * np.pi / n_lat
    phis = np.arange(n_lon) * 2 * np.pi / n_lon
    dirs = [axis]
    polar = [(0.0, 0.0)]
    for th in thetas:
        for ph in phis:
            dirs.append(np.cos(th) * axis + np.sin(th) * (np.cos(ph) * e1 + np.sin(ph) * e2))
            polar.append((th, ph))
    dirs.append(-axis)
    polar.append((np.pi, 0.0))
    dirs = np.asarray(dirs)
    polar = np.asarray(polar)

    semi = np.array([0.80, 1.0, 0.88])
    verts = dirs * semi
    # nose, brow and chin bumps plus seeded low-frequency wobble
    bumps = [((0.0, -0.05, 1.0), 0.10, 0.28), ((0.0, 0.35, 0.95), 0.04, 0.35), ((0.0, -0.75, 0.7), 0.05, 0.35)]
    radial = np.zeros(len(dirs))
    for c, amp, width in bumps:
        c = np.asarray(c) / np.linalg.norm(c)
        radial += amp * np.exp(-np.sum((dirs - c) ** 2, axis=1) / (2 * width**2))
    for _ in range(4):
        c = rng.normal(size=3)
        c /= np.linalg.norm(c)
        radial += rng.uniform(-0.02, 0.02) * np.exp(-np.sum((dirs - c) ** 2, axis=1) / (2 * 0.5**2))
    verts = verts + radial[:, None] * dirs

    def ring(k, j):
        return 1 + (k - 1) * n_lon + (j % n_lon)

    bottom = len(dirs) - 1
    faces = []
    ring_of_face = []
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        ring_of_face.append(0)
    for k in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(k, j), ring(k, j + 1), ring(k + 1, j), ring(k + 1, j + 1)
            faces.append((a, c, d))
            faces.append((a, d, b))
            ring_of_face += [k, k]
    for j in range(n_lon):
        faces.append((bottom, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
        ring_of_face.append(n_lat - 1)
    faces = np.asarray(faces, dtype=np.int64)
    ring_of_face = np.asarray(ring_of_face)

    # outward orientation
    tri = verts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.sum(n * tri.mean(axis=1), axis=1) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    # scalp: the top ~3/8 of the latitude bands
    scalp_rings = int(round(0.375 * n_lat))
    theta_s = scalp_rings * np.pi / n_lat
    is_scalp = ring_of_face < scalp_rings
    scalp_faces = np.nonzero(is_scalp)[0]

    uv = np.zeros((len(faces), 3, 2))
    for fi, face in enumerate(faces):
        for ci, vi in enumerate(face):
            th, ph = polar[vi]
            if is_scalp[fi]:
                # the crown vertex belongs to every fan face; its phi is irrelevant at r=0
                r = np.sin(th / 2) / np.sin(theta_s / 2)
                cu, cv, R = SCALP_CHART
                uv[fi, ci] = (cu + R * r * np.cos(ph), cv + R * r * np.sin(ph))
            else:
                beta = np.pi - th
                r = np.sin(beta / 2) / np.sin((np.pi - theta_s) / 2)
                cu, cv, R = FACE_CHART
                uv[fi, ci] = (cu + R * r * np.cos(ph), cv - R * r * np.sin(ph))

    basis = np.zeros((len(verts), 3, E))
    # jaw: lower front vertices move down and slightly back
    w = _smoothstep(-0.15, -0.55, verts[:, 1]) * _smoothstep(0.0, 0.45, verts[:, 2])
    basis[:, :, 0] = 0.12 * w[:, None] * np.array([0.0, -1.0, -0.25])
    for e in range(1, E):
        field = np.zeros((len(verts), 3))
        for _ in range(3):
            c = rng.normal(size=3)
            c[2] = abs(c[2]) + 0.5
            c /= np.linalg.norm(c)
            amp = rng.normal(scale=0.03, size=3)
            field += np.exp(-np.sum((dirs - c) ** 2, axis=1) / (2 * 0.35**2))[:, None] * amp
        basis[:, :, e] = field

    mesh = TemplateMesh(
        vertices=torch.from_numpy(verts.astype(np.float32)),
        faces=torch.from_numpy(faces),
        uv_coords=torch.from_numpy(uv.astype(np.float32)),
        scalp_faces=torch.from_numpy(scalp_faces.astype(np.int64)),
        blend_basis=torch.from_numpy(basis.astype(np.float32)),
    )
    mesh.validate()
    return mesh


def _smoothstep(edge0: float, edge1: float, x: np.ndarray) -> np.ndarray:
    t = np.clip((x - edge0) / (edge1 - edge0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def save_template(mesh: TemplateMesh, path) -> None:
    write_archive(
        path,
        {
            "vertices": mesh.vertices.numpy(),
            "faces": mesh.faces.numpy(),
            "uv_coords": mesh.uv_coords.numpy(),
            "scalp_faces": mesh.scalp_faces.numpy(),
            "blend_basis": mesh.blend_basis.numpy(),
        },
        {"E": mesh.E},
        kind="template",
    )


def load_template(path) -> TemplateMesh:
    """Load any template asset that satisfies the TemplateMesh invariants."""
    arrays, _ = read_archive(path, kind="template")
    try:
        mesh = TemplateMesh(
            vertices=torch.from_numpy(arrays["vertices"].astype(np.float32)),
            faces=torch.from_numpy(arrays["faces"].astype(np.int64)),
            uv_coords=torch.from_numpy(arrays["uv_coords"].astype(np.float32)),
            scalp_faces=torch.from_numpy(arrays["scalp_faces"].astype(np.int64)),
            blend_basis=torch.from_numpy(arrays["blend_basis"].astype(np.float32)),
        )
    except KeyError as exc:
        raise GeometryError(f"template asset missing array {exc}") from exc
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# UV maps


@dataclass(frozen=True)
class BindingTable:
    face_index: Tensor  # H x W int64, -1 where invalid
    bary: Tensor  # H x W x 3
    valid: Tensor  # H x W bool
    region: Tensor  # H x W uint8, REGION_FACE or REGION_SCALP

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.valid.shape)

    def flat_valid(self) -> Tuple[Tensor, Tensor]:
        """Face indices and barycentrics of valid pixels in row-major order."""
        m = self.valid.flatten()
        return self.face_index.flatten()[m], self.bary.reshape(-1, 3)[m]


def region_faces(mesh: TemplateMesh, region: str) -> np.ndarray:
    if region == "head":
        return np.arange(mesh.faces.shape[0])
    if region == "scalp":
        return mesh.scalp_faces.numpy()
    raise GeometryError(f"unknown region {region!r}")


def pixel_uv(H: int, W: int, region: str) -> np.ndarray:
    """Atlas UV of every pixel center of a region grid, H x W x 2 (u along W)."""
    u0, v0, u1, v1 = REGION_RECTS[region]
    u = u0 + (u1 - u0) * (np.arange(W) + 0.5) / W
    v = v0 + (v1 - v0) * (np.arange(H) + 0.5) / H
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def locate_uv(mesh: TemplateMesh, uv: np.ndarray, region: str = "head", eps: float = 1e-9):
    """Find containing face and barycentrics for atlas points (K x 2).

    Returns (face_index K, bary K x 3); face_index is -1 outside the atlas.
    Points on shared edges go to the lowest face index.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    faces = region_faces(mesh, region)
    tri = mesh.uv_coords.numpy().astype(np.float64)[faces]
    mesh.validate()
    out_f = np.full(len(uv), -1, dtype=np.int64)
    out_b = np.zeros((len(uv), 3))
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    for k, fi in enumerate(faces):
        cand = np.nonzero(
            (out_f < 0)
            & (uv[:, 0] >= lo[k, 0] - eps) & (uv[:, 0] <= hi[k, 0] + eps)
            & (uv[:, 1] >= lo[k, 1] - eps) & (uv[:, 1] <= hi[k, 1] + eps)
        )[0]
        if len(cand) == 0:
            continue
        b = _barycentric(uv[cand], tri[k])
        inside = (b >= -eps).all(axis=1)
        idx = cand[inside]
        bb = np.clip(b[inside], 0.0, None)
        out_f[idx] = fi
        out_b[idx] = bb / bb.sum(axis=1, keepdims=True)
    return out_f, out_b


def _barycentric(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    a, b, c = tri
    v0, v1 = b - a, c - a
    v2 = p - a
    den = v0[0] * v1[1] - v1[0] * v0[1]
    l1 = (v2[:, 0] * v1[1] - v1[0] * v2[:, 1]) / den
    l2 = (v0[0] * v2[:, 1] - v2[:, 0] * v0[1]) / den
    return np.stack([1 - l1 - l2, l1, l2], axis=1)


def interpolate(vertices: Tensor, faces: Tensor, face_index: Tensor, bary: Tensor) -> Tensor:
    """Barycentric interpolation of per-vertex values at (face, bary) anchors."""
    tri = vertices[faces[face_index]]  # K x 3 x D
    return (tri * bary[..., None].to(vertices.dtype)).sum(dim=-2)


def uv_position_map(mesh: TemplateMesh, H: int, W: int, region: str = "head",
                    vertices: Optional[Tensor] = None) -> Tuple[Tensor, BindingTable]:
    """Canonical 3D position per UV pixel plus the pixel-to-triangle binding.

    ``vertices`` defaults to the canonical template; pass shaped vertices to
    sample an identity-specific surface on the same binding.
    """
    if H < 8 or W < 8:
        raise GeometryError("UV map needs H, W >= 8")
    uv = pixel_uv(H, W, region).reshape(-1, 2)
    f, b = locate_uv(mesh, uv, region)
    valid = f >= 0
    verts = (mesh.vertices if vertices is None else vertices).double()
    pos = torch.zeros(H * W, 3, dtype=torch.float64)
    fi = torch.from_numpy(np.where(valid, f, 0))
    bt = torch.from_numpy(b)
    pos[torch.from_numpy(valid)] = interpolate(verts, mesh.faces, fi[valid], bt[valid])
    scalp = mesh.scalp_mask()
    reg = np.where(valid & scalp[np.where(valid, f, 0)], REGION_SCALP, REGION_FACE).astype(np.uint8)
    binding = BindingTable(
        face_index=torch.from_numpy(np.where(valid, f, -1).reshape(H, W)),
        bary=bt.float().reshape(H, W, 3),
        valid=torch.from_numpy(valid.reshape(H, W)),
        region=torch.from_numpy(reg.reshape(H, W)),
    )
    return pos.float().reshape(H, W, 3), binding


# ---------------------------------------------------------------------------
# Posing


def apply_expression(mesh: TemplateMesh, psi, shape_offsets: Optional[Tensor] = None) -> Tensor:
    """Linear blendshapes: canonical (+ identity offsets) + basis . psi."""
    psi = torch.as_tensor(psi, dtype=mesh.blend_basis.dtype)
    if psi.ndim != 1 or psi.shape[0] != mesh.E:
        raise GeometryError(f"expression has dimension {tuple(psi.shape)}, template expects {mesh.E}")
    if not torch.isfinite(psi).all() or psi.abs().max() > 5.0:
        raise GeometryError("expression coefficients must be finite with |psi| <= 5")
    verts = mesh.vertices if shape_offsets is None else mesh.vertices + shape_offsets
    return verts + mesh.blend_basis @ psi


@dataclass(frozen=True)
class TriangleFrames:
    origin: Tensor  # F x 3
    rotation: Tensor  # F x 3 x 3, columns (e1, e2, normal)
    scale: Tensor  # F


def triangle_frames(vertices: Tensor, faces: Tensor) -> TriangleFrames:
    tri = vertices[faces]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    cross = torch.cross(b - a, c - a, dim=-1)
    area2 = cross.norm(dim=-1)
    bad = torch.nonzero(area2 <= 2e-12).flatten()
    if len(bad):
        raise GeometryError(f"degenerate triangle at face {int(bad[0])}")
    n = cross / area2[:, None]
    e1 = (b - a) / (b - a).norm(dim=-1, keepdim=True)
    e2 = torch.cross(n, e1, dim=-1)
    R = torch.stack([e1, e2, n], dim=-1)
    return TriangleFrames(origin=tri.mean(dim=1), rotation=R, scale=torch.sqrt(area2))


@dataclass(frozen=True)
class PosedMesh:
    vertices: Tensor
    faces: Tensor
    frames: TriangleFrames
    quats: Tensor  # F x 4, frame rotations as quaternions


def pose_mesh(mesh: TemplateMesh, psi, shape_offsets: Optional[Tensor] = None) -> PosedMesh:
    verts = apply_expression(mesh, psi, shape_offsets)
    return posed_from_vertices(verts, mesh.faces)


def posed_from_vertices(verts: Tensor, faces: Tensor) -> PosedMesh:
    frames = triangle_frames(verts, faces)
    return PosedMesh(vertices=verts, faces=faces, frames=frames, quats=rotmat_to_quat(frames.rotation))


def bind_and_pose_gaussians(offsets: Tensor, scales: Tensor, quats: Tensor, face_index: Tensor,
                            bary: Tensor, posed: PosedMesh):
    """Carry per-pixel local attributes into posed world space.

    Position is the pixel's barycentric anchor on the posed triangle plus the
    frame-rotated, frame-scaled offset; with the pixel anchored at the
    centroid and zero offset the Gaussian sits on the centroid.

    Returns (means, scales, quats) in world space.
    """
    if (face_index < 0).any():
        raise GeometryError("invalid UV pixel passed to binding")
    anchor = interpolate(posed.vertices, posed.faces, face_index, bary)
    R = posed.frames.rotation[face_index]
    s = posed.frames.scale[face_index][:, None]
    means = anchor + s * torch.einsum("kij,kj->ki", R, offsets)
    world_scales = s * scales
    world_quats = quat_normalize(quat_multiply(posed.quats[face_index], quats))
    return means, world_scales, world_quats
