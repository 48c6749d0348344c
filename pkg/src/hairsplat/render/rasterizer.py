"""Differentiable Gaussian splatting.

``project_gaussians`` performs the EWA projection in torch (autograd);
compositing is done either by the compiled tile kernels (``backend="tile"``,
default) or by a dense torch evaluation of every pixel against every
Gaussian (``backend="reference"``), which is only practical for small scenes
and exists to check the fast path.

Both backends share the same per-pixel model: Gaussians composite front to
back in depth order (ties by index), each contributes opacity times a 2D
Gaussian falloff that is shifted down so it reaches exactly zero on the
3-sigma ellipse, per-primitive alpha is capped at 0.999 and compositing
stops once transmittance drops below 1e-4.
"""

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from ..gaussians import FACE, HAIR, GaussianSet
from ..rotations import quat_to_rotmat
from . import _kernels
from .camera import Camera

EPS2D = 0.3
NEAR = 0.01


class RenderError(ValueError):
    pass


@dataclass
class RenderOutput:
    rgb: Tensor  # H x W x 3
    alpha: Tensor  # H x W
    semantic: Optional[Tensor] = None  # H x W x 2 (face, hair)


@dataclass
class Projected:
    means2d: Tensor  # M x 2
    cov2d: Tensor  # M x 2 x 2
    conics: Tensor  # M x 3 (a, b, c) of the inverse covariance
    depths: Tensor  # M
    radii: Tensor  # M x 2, half extents of the 3-sigma ellipse in pixels
    index: Tensor  # M, indices into the input set, depth-sorted


def _set_threads():
    n = os.environ.get("HAIRSPLAT_THREADS")
    if n:
        import numba

        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


_set_threads()


def cov_factor(scales: Tensor, quats: Tensor) -> Tensor:
    """M with cov3d = M M^T."""
    return quat_to_rotmat(quats) * scales[..., None, :]


def compute_cov3d(scales: Tensor, quats: Tensor) -> Tensor:
    M = cov_factor(scales, quats)
    return M @ M.transpose(-1, -2)


def project_gaussian(means: Tensor, cov3d: Tensor, camera: Camera):
    """EWA projection of world-space Gaussians. Returns (mean2d, cov2d, depth)."""
    mean2d, W, z = _linearize(means, camera)
    cov2d = W @ cov3d @ W.transpose(-1, -2)
    return mean2d, cov2d + EPS2D * torch.eye(2, dtype=means.dtype), z


def _project_factored(means: Tensor, M: Tensor, camera: Camera):
    mean2d, W, z = _linearize(means, camera)
    A = W @ M
    cov2d = A @ A.transpose(-1, -2)
    return mean2d, cov2d + EPS2D * torch.eye(2, dtype=means.dtype), z


def _linearize(means: Tensor, camera: Camera):
    """Projected means, the 2x3 world-to-image Jacobian and camera depth."""
    R = camera.R.to(means.dtype)
    t = camera.t.to(means.dtype)
    K = camera.K.to(means.dtype)
    pc = means @ R.T + t
    z = pc[:, 2]
    zs = z.clamp_min(NEAR)
    fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
    mean2d = torch.stack([fx * pc[:, 0] / zs + cx, fy * pc[:, 1] / zs + cy], dim=-1)
    lim_x = 1.3 * 0.5 * camera.width / fx
    lim_y = 1.3 * 0.5 * camera.height / fy
    tx = zs * (pc[:, 0] / zs).clamp(-lim_x, lim_x)
    ty = zs * (pc[:, 1] / zs).clamp(-lim_y, lim_y)
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [torch.stack([fx / zs, zero, -fx * tx / (zs * zs)], -1), torch.stack([zero, fy / zs, -fy * ty / (zs * zs)], -1)],
        dim=-2,
    )
    return mean2d, J @ R, z


def project_gaussians(g: GaussianSet, camera: Camera) -> Projected:
    bad = ~(
        torch.isfinite(g.means).all(-1) & torch.isfinite(g.scales).all(-1) & torch.isfinite(g.quats).all(-1)
        & torch.isfinite(g.opacities) & torch.isfinite(g.colors).all(-1)
    )
    if bad.any():
        idx = torch.nonzero(bad).flatten()[:10].tolist()
        raise RenderError(f"non-finite Gaussian attributes at indices {idx}")
    mean2d, cov2d, depth = _project_factored(g.means, cov_factor(g.scales, g.quats), camera)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = torch.stack([c / det, -b / det, a / det], dim=-1)
    with torch.no_grad():
        radii = 3.0 * torch.sqrt(torch.stack([a, c], dim=-1).clamp_min(0.0))
        m2 = mean2d.detach()
        keep = (
            (depth > NEAR) & (det > 0)
            & (m2[:, 0] + radii[:, 0] > 0) & (m2[:, 0] - radii[:, 0] < camera.width)
            & (m2[:, 1] + radii[:, 1] > 0) & (m2[:, 1] - radii[:, 1] < camera.height)
        )
        idx = torch.nonzero(keep).flatten()
        order = torch.argsort(depth.detach()[idx], stable=True)
        idx = idx[order]
    return Projected(mean2d[idx], cov2d[idx], conics[idx], depth[idx], radii[idx], idx)


class _TileRasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means2d, conics, opac, colors, bg, radii, height, width):
        m = means2d.detach().cpu().numpy()
        cn = conics.detach().cpu().numpy()
        op = opac.detach().cpu().numpy()
        col = np.ascontiguousarray(colors.detach().cpu().numpy())
        bgn = bg.detach().cpu().numpy().astype(col.dtype)
        offsets, ids = _kernels.bin_gaussians(m, np.ascontiguousarray(radii.detach().cpu().numpy().astype(m.dtype)), height, width)
        out, t_final, n_contrib = _kernels.rasterize_forward(m, cn, op, col, bgn, offsets, ids, height, width)
        ctx.state = (m, cn, op, col, bgn, offsets, ids, height, width, t_final, n_contrib)
        ctx.dtype = colors.dtype
        rgb = torch.from_numpy(out)
        alpha = torch.from_numpy(1.0 - t_final)
        return rgb, alpha

    @staticmethod
    def backward(ctx, grad_out, grad_alpha):
        m, cn, op, col, bgn, offsets, ids, height, width, t_final, n_contrib = ctx.state
        ga = np.zeros((height, width), dtype=np.float64) if grad_alpha is None else grad_alpha.double().numpy()
        go = np.zeros((height, width, col.shape[1])) if grad_out is None else grad_out.double().contiguous().numpy()
        g_mean, g_conic, g_opac, g_color = _kernels.rasterize_backward(
            m, cn, op, col, bgn, offsets, ids, height, width, t_final, n_contrib, go, ga
        )
        dt = ctx.dtype
        return (
            torch.from_numpy(g_mean).to(dt),
            torch.from_numpy(g_conic).to(dt),
            torch.from_numpy(g_opac).to(dt),
            torch.from_numpy(g_color).to(dt),
            None,
            None,
            None,
            None,
        )


def _composite_reference(means2d, conics, opac, colors, bg, height, width):
    dt = means2d.dtype
    jj, ii = torch.meshgrid(torch.arange(width, dtype=dt) + 0.5, torch.arange(height, dtype=dt) + 0.5, indexing="xy")
    pix = torch.stack([jj.flatten(), ii.flatten()], dim=-1)  # P x 2
    if means2d.shape[0] == 0:
        rgb = bg.to(dt).expand(height * width, -1).reshape(height, width, -1).clone()
        return rgb, torch.zeros(height, width, dtype=dt)
    d = pix[:, None, :] - means2d[None]  # P x M x 2
    q = 0.5 * (conics[:, 0] * d[..., 0] ** 2 + 2 * conics[:, 1] * d[..., 0] * d[..., 1] + conics[:, 2] * d[..., 1] ** 2)
    inside = (q <= _kernels.CUTOFF) & (q >= 0)
    G = (torch.exp(-q) - _kernels.EDGE) / (1 - _kernels.EDGE)
    a = torch.where(inside, opac[None] * G, torch.zeros_like(G))
    a = a.clamp(max=_kernels.MAX_ALPHA)
    one_minus = 1 - a
    T_before = torch.cumprod(torch.cat([torch.ones_like(a[:, :1]), one_minus[:, :-1]], dim=1), dim=1)
    live = (T_before >= _kernels.MIN_T).to(dt)
    a = a * live
    T_before = torch.cumprod(torch.cat([torch.ones_like(a[:, :1]), (1 - a)[:, :-1]], dim=1), dim=1)
    w = a * T_before
    T_final = torch.prod(1 - a, dim=1)
    rgb = w @ colors + T_final[:, None] * bg.to(dt)[None]
    return rgb.reshape(height, width, -1), (1 - T_final).reshape(height, width)


def composite(proj: Projected, opacities: Tensor, colors: Tensor, bg: Tensor, height: int, width: int,
              backend: str = "tile"):
    """Composite projected Gaussians; ``opacities``/``colors`` are per input primitive."""
    opac = opacities[proj.index]
    col = colors[proj.index]
    bg = torch.as_tensor(bg, dtype=colors.dtype)
    if backend == "reference":
        return _composite_reference(proj.means2d, proj.conics, opac, col, bg, height, width)
    if backend != "tile":
        raise RenderError(f"unknown backend {backend!r}")
    if proj.means2d.shape[0] == 0:
        rgb = bg.expand(height * width, -1).reshape(height, width, -1).clone()
        if colors.requires_grad:
            rgb = rgb + 0.0 * colors.sum()
        return rgb, torch.zeros(height, width, dtype=colors.dtype)
    return _TileRasterize.apply(proj.means2d, proj.conics, opac, col.contiguous(), bg, proj.radii, height, width)


def semantic_colors(g: GaussianSet) -> Tensor:
    sem = g.semantic
    if sem is None or ((sem != FACE) & (sem != HAIR)).any():
        raise RenderError("every Gaussian needs a face or hair label for semantic rendering")
    onehot = torch.zeros(len(g), 2, dtype=g.colors.dtype)
    onehot[sem == FACE, 0] = 1.0
    onehot[sem == HAIR, 1] = 1.0
    return onehot


def render(g: GaussianSet, camera: Camera, bg=(0.0, 0.0, 0.0), semantic: bool = False,
           backend: str = "tile") -> RenderOutput:
    """Render RGB and alpha; with ``semantic`` also the face/hair coverage in the same pass."""
    proj = project_gaussians(g, camera)
    colors = g.colors
    bgt = torch.as_tensor(bg, dtype=colors.dtype)
    if semantic:
        colors = torch.cat([colors, semantic_colors(g)], dim=-1)
        bgt = torch.cat([bgt, torch.zeros(2, dtype=colors.dtype)])
    img, alpha = composite(proj, g.opacities, colors, bgt, camera.height, camera.width, backend)
    if semantic:
        return RenderOutput(img[..., :3], alpha, img[..., 3:5])
    return RenderOutput(img, alpha)


def rasterize(g: GaussianSet, camera: Camera, bg=(0.0, 0.0, 0.0), backend: str = "tile") -> RenderOutput:
    return render(g, camera, bg, semantic=False, backend=backend)


def render_subset(g: GaussianSet, labels: Optional[Sequence[int]], camera: Camera, bg=(0.0, 0.0, 0.0),
                  backend: str = "tile") -> RenderOutput:
    """Render only Gaussians whose label is in ``labels`` (None = all)."""
    if labels is None:
        return rasterize(g, camera, bg, backend)
    mask = torch.zeros(len(g), dtype=torch.bool)
    for lab in labels:
        mask |= g.semantic == lab
    return rasterize(g.select(mask), camera, bg, backend)


def render_semantic(g: GaussianSet, camera: Camera, backend: str = "tile") -> Tensor:
    proj = project_gaussians(g, camera)
    img, _ = composite(proj, g.opacities, semantic_colors(g), torch.zeros(2, dtype=g.colors.dtype),
                       camera.height, camera.width, backend)
    return img
