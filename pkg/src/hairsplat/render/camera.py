import math
from dataclasses import dataclass
from typing import List

import torch
from torch import Tensor


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV convention (x right, y down, z forward).

    Pixel (row i, col j) has its center at image coordinates (j + 0.5, i + 0.5).
    """

    K: Tensor  # 3 x 3
    w2c: Tensor  # 3 x 4
    height: int
    width: int

    def __post_init__(self):
        K = self.K.double()
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("focal length must be positive")
        R = self.w2c[:, :3].double()
        if (R.T @ R - torch.eye(3, dtype=torch.float64)).abs().max() > 1e-4:
            raise CameraError("camera rotation is not orthonormal")

    @property
    def R(self) -> Tensor:
        return self.w2c[:, :3]

    @property
    def t(self) -> Tensor:
        return self.w2c[:, 3]

    @property
    def center(self) -> Tensor:
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> Tensor:
        """Viewing direction in world space."""
        return self.R[2]

    def to(self, dtype) -> "Camera":
        return Camera(self.K.to(dtype), self.w2c.to(dtype), self.height, self.width)


def intrinsics(fov_deg: float, height: int, width: int) -> Tensor:
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return torch.tensor([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Tensor:
    eye = torch.as_tensor(eye, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    up = torch.as_tensor(up, dtype=torch.float64)
    z = target - eye
    z = z / z.norm()
    x = torch.linalg.cross(z, up)
    if x.norm() < 1e-9:
        x = torch.linalg.cross(z, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
    x = x / x.norm()
    y = torch.linalg.cross(z, x)
    R = torch.stack([x, y, z])
    t = -R @ eye
    return torch.cat([R, t[:, None]], dim=1).float()


def orbit_camera(azimuth_deg: float, elevation_deg: float = 0.0, radius: float = 4.0, fov_deg: float = 40.0,
                 size: int = 128, target=(0.0, 0.1, 0.0)) -> Camera:
    """Camera on a sphere around ``target``; azimuth 0 looks at the face (+z side)."""
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = (
        target[0] + radius * math.cos(el) * math.sin(az),
        target[1] + radius * math.sin(el),
        target[2] + radius * math.cos(el) * math.cos(az),
    )
    return Camera(intrinsics(fov_deg, size, size), look_at(eye, target), size, size)


def ring_cameras(n: int, elevation_deg: float = 0.0, offset_deg: float = 0.0, **kw) -> List[Camera]:
    """n cameras evenly spaced by 360/n degrees of azimuth."""
    return [orbit_camera(offset_deg + k * 360.0 / n, elevation_deg, **kw) for k in range(n)]
