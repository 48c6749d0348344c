"""Quaternion helpers. Quaternions are stored (w, x, y, z)."""

import torch
from torch import Tensor


def quat_normalize(q: Tensor, eps: float = 1e-12) -> Tensor:
    return q / q.norm(dim=-1, keepdim=True).clamp_min(eps)


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a*b (apply b first, then a)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_rotmat(q: Tensor) -> Tensor:
    q = quat_normalize(q)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], dim=-2)


def rotmat_to_quat(R: Tensor) -> Tensor:
    """Convert rotation matrices (..., 3, 3) to unit quaternions with w >= 0.

    Uses the largest-diagonal branch per matrix, which keeps the square root
    argument away from zero.
    """
    m = R.reshape(-1, 3, 3)
    m00, m11, m22 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    trace = m00 + m11 + m22
    cands = torch.stack([trace, m00, m11, m22], dim=-1)
    branch = cands.argmax(dim=-1)

    out = torch.empty(m.shape[0], 4, dtype=R.dtype, device=R.device)
    for k in range(4):
        sel = branch == k
        if not sel.any():
            continue
        s = m[sel]
        if k == 0:
            r = torch.sqrt((1.0 + s[:, 0, 0] + s[:, 1, 1] + s[:, 2, 2]).clamp_min(1e-12)) * 2
            q = torch.stack(
                [0.25 * r, (s[:, 2, 1] - s[:, 1, 2]) / r, (s[:, 0, 2] - s[:, 2, 0]) / r, (s[:, 1, 0] - s[:, 0, 1]) / r], -1
            )
        elif k == 1:
            r = torch.sqrt((1.0 + s[:, 0, 0] - s[:, 1, 1] - s[:, 2, 2]).clamp_min(1e-12)) * 2
            q = torch.stack(
                [(s[:, 2, 1] - s[:, 1, 2]) / r, 0.25 * r, (s[:, 0, 1] + s[:, 1, 0]) / r, (s[:, 0, 2] + s[:, 2, 0]) / r], -1
            )
        elif k == 2:
            r = torch.sqrt((1.0 - s[:, 0, 0] + s[:, 1, 1] - s[:, 2, 2]).clamp_min(1e-12)) * 2
            q = torch.stack(
                [(s[:, 0, 2] - s[:, 2, 0]) / r, (s[:, 0, 1] + s[:, 1, 0]) / r, 0.25 * r, (s[:, 1, 2] + s[:, 2, 1]) / r], -1
            )
        else:
            r = torch.sqrt((1.0 - s[:, 0, 0] - s[:, 1, 1] + s[:, 2, 2]).clamp_min(1e-12)) * 2
            q = torch.stack(
                [(s[:, 1, 0] - s[:, 0, 1]) / r, (s[:, 0, 2] + s[:, 2, 0]) / r, (s[:, 1, 2] + s[:, 2, 1]) / r, 0.25 * r], -1
            )
        out[sel] = q
    out = torch.where(out[:, :1] < 0, -out, out)
    return quat_normalize(out).reshape(*R.shape[:-2], 4)


def quat_from_x_axis(d: Tensor, eps: float = 1e-12) -> Tensor:
    """Minimal rotation taking +x onto the direction of ``d`` (..., 3)."""
    n = d / d.norm(dim=-1, keepdim=True).clamp_min(eps)
    w = 1.0 + n[..., 0]
    # axis = x cross n = (0, -n_z, n_y)
    q = torch.stack([w, torch.zeros_like(w), -n[..., 2], n[..., 1]], dim=-1)
    # antiparallel: rotate pi about z
    flip = w < 1e-9
    if flip.any():
        q = torch.where(flip[..., None], torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=d.dtype, device=d.device), q)
    return quat_normalize(q)
