from .camera import Camera, CameraError, intrinsics, look_at, orbit_camera, ring_cameras
from .rasterizer import (
    EPS2D,
    RenderError,
    RenderOutput,
    compute_cov3d,
    project_gaussian,
    project_gaussians,
    rasterize,
    render,
    render_semantic,
    render_subset,
)
