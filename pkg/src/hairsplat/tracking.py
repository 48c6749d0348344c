"""Landmark-driven helpers for expression tracking.

A motion-aware schedule picks how many fitting iterations each frame gets,
and two structural losses compare eye and lip landmarks together with their
opening distances. The full mesh fitter these plug into is not part of this
package; ``track_demo`` drives the schedule over a synthetic sequence.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

GAMMA = 0.95
_FLOOR_EPS = 1e-9  # keeps e.g. 10 * (2.3 - 2.0) from flooring to 2


class TrackingError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleParams:
    N0: int = 50
    delta: float = 10.0
    d_th: float = 2.0  # in inter-eye distances
    lam: float = 0.8
    N_max: int = 150

    def validate(self) -> None:
        if self.N0 > self.N_max:
            raise TrackingError(f"N0={self.N0} exceeds N_max={self.N_max}")
        if not (0.0 <= self.lam < 1.0):
            raise TrackingError(f"smoothing weight must lie in [0, 1), got {self.lam}")
        if self.delta < 0:
            raise TrackingError("delta must be non-negative")


@dataclass
class ScheduleState:
    params: ScheduleParams = field(default_factory=ScheduleParams)
    N_prev: Optional[int] = None  # None before the first frame: start from N0

    def __post_init__(self):
        self.params.validate()
        if self.N_prev is None:
            self.N_prev = self.params.N0


def motion_iters_proposal(d_lmk: float, params: ScheduleParams = ScheduleParams()) -> int:
    """Iteration proposal for one frame from its normalized landmark motion."""
    if not math.isfinite(d_lmk) or d_lmk < 0:
        raise TrackingError(f"landmark distance must be finite and >= 0, got {d_lmk}")
    if d_lmk > params.d_th:
        return params.N0 + int(math.floor(params.delta * (d_lmk - params.d_th) + _FLOOR_EPS))
    return params.N0


def smooth_iters(state: ScheduleState, n_cur: int) -> int:
    """Exponentially smoothed, capped iteration count; updates ``state.N_prev``."""
    p = state.params
    n = min(int(math.floor(p.lam * state.N_prev + (1.0 - p.lam) * n_cur + _FLOOR_EPS)), p.N_max)
    state.N_prev = n
    return n


def schedule(distances: Iterable[float], params: ScheduleParams = ScheduleParams()) -> List[Tuple[int, int]]:
    """(N_cur, N_t) per frame."""
    state = ScheduleState(params)
    out = []
    for d in distances:
        n_cur = motion_iters_proposal(float(d), params)
        out.append((n_cur, smooth_iters(state, n_cur)))
    return out


# ---------------------------------------------------------------------------
# Landmarks


@dataclass(frozen=True)
class LandmarkLayout:
    """Which landmark indices form the eye and lip subsets.

    ``eye_pairs``/``lip_pairs`` are (upper, lower) index pairs whose mean
    separation gives the lid and lip opening. ``left_eye``/``right_eye`` give
    the inter-eye distance used to normalize motion.
    """

    n_points: int
    eye: Tuple[int, ...]
    lip: Tuple[int, ...]
    eye_pairs: Tuple[Tuple[int, int], ...]
    lip_pairs: Tuple[Tuple[int, int], ...]
    left_eye: Tuple[int, ...]
    right_eye: Tuple[int, ...]

    def validate(self) -> None:
        if set(self.eye) & set(self.lip):
            raise TrackingError("eye and lip subsets overlap")
        idx = [*self.eye, *self.lip, *self.left_eye, *self.right_eye,
               *(i for p in self.eye_pairs + self.lip_pairs for i in p)]
        if any(i < 0 or i >= self.n_points for i in idx):
            raise TrackingError(f"landmark index out of range for {self.n_points} points")
        if not self.eye or not self.lip or not self.left_eye or not self.right_eye:
            raise TrackingError("eye, lip and both eye-center subsets must be non-empty")

    def to_dict(self) -> dict:
        return {"n_points": self.n_points, "eye": list(self.eye), "lip": list(self.lip),
                "eye_pairs": [list(p) for p in self.eye_pairs], "lip_pairs": [list(p) for p in self.lip_pairs],
                "left_eye": list(self.left_eye), "right_eye": list(self.right_eye)}

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkLayout":
        try:
            lay = cls(int(d["n_points"]), tuple(d["eye"]), tuple(d["lip"]),
                      tuple(tuple(p) for p in d["eye_pairs"]), tuple(tuple(p) for p in d["lip_pairs"]),
                      tuple(d["left_eye"]), tuple(d["right_eye"]))
        except (KeyError, TypeError) as exc:
            raise TrackingError(f"bad landmark layout: {exc}") from exc
        lay.validate()
        return lay


@dataclass
class LandmarkFrame:
    landmarks: Tensor  # K x 2 px
    eye: Tuple[int, ...]
    lip: Tuple[int, ...]
    d_eye: float
    d_lip: float

    def __post_init__(self):
        self.landmarks = torch.as_tensor(self.landmarks, dtype=torch.float64)
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 2:
            raise TrackingError(f"landmarks must be K x 2, got {tuple(self.landmarks.shape)}")
        if set(self.eye) & set(self.lip):
            raise TrackingError("eye and lip subsets overlap")
        if not (self.d_eye >= 0 and self.d_lip >= 0):
            raise TrackingError("eye/lip distances must be >= 0")

    @classmethod
    def from_layout(cls, landmarks, layout: LandmarkLayout) -> "LandmarkFrame":
        lm = torch.as_tensor(landmarks, dtype=torch.float64)
        return cls(lm, layout.eye, layout.lip, _opening(lm, layout.eye_pairs), _opening(lm, layout.lip_pairs))


def _opening(lm: Tensor, pairs) -> float:
    if not pairs:
        return 0.0
    up = lm[[p[0] for p in pairs]]
    lo = lm[[p[1] for p in pairs]]
    return float((up - lo).norm(dim=-1).mean())


def inter_eye_distance(landmarks, layout: LandmarkLayout) -> float:
    lm = torch.as_tensor(landmarks, dtype=torch.float64)
    return float((lm[list(layout.left_eye)].mean(0) - lm[list(layout.right_eye)].mean(0)).norm())


def landmark_motion(landmarks, reference, layout: LandmarkLayout) -> float:
    """Mean landmark distance to the reference frame, in reference inter-eye distances."""
    lm = torch.as_tensor(landmarks, dtype=torch.float64)
    ref = torch.as_tensor(reference, dtype=torch.float64)
    scale = inter_eye_distance(ref, layout)
    if scale <= 0:
        raise TrackingError("reference frame has zero inter-eye distance")
    return float((lm - ref).norm(dim=-1).mean()) / scale


def _structural(pred_pts: Tensor, gt_pts: Tensor, d_pred, d_gt, gamma: float) -> Tensor:
    if pred_pts.shape != gt_pts.shape:
        raise TrackingError(f"subset shapes differ: {tuple(pred_pts.shape)} vs {tuple(gt_pts.shape)}")
    diff = pred_pts - gt_pts
    # sqrt(x + 0) has an infinite slope at 0; mask so matched points give zero gradient
    sq = (diff * diff).sum(-1)
    dist = torch.where(sq > 0, sq.clamp_min(1e-300).sqrt(), torch.zeros_like(sq))
    d_pred = torch.as_tensor(d_pred, dtype=dist.dtype)
    d_gt = torch.as_tensor(d_gt, dtype=dist.dtype)
    return gamma * dist.mean() + (1.0 - gamma) * (d_pred - d_gt).abs()


def eye_closure_loss(pred: LandmarkFrame, gt: LandmarkFrame, gamma: float = GAMMA) -> Tensor:
    idx = list(gt.eye)
    return _structural(pred.landmarks[idx], gt.landmarks[idx], pred.d_eye, gt.d_eye, gamma)


def lip_align_loss(pred: LandmarkFrame, gt: LandmarkFrame, gamma: float = GAMMA) -> Tensor:
    idx = list(gt.lip)
    return _structural(pred.landmarks[idx], gt.landmarks[idx], pred.d_lip, gt.d_lip, gamma)


# ---------------------------------------------------------------------------
# Landmark sequence files
#
# Line 1 is "# " followed by the layout as JSON, then a CSV header
# frame_id,x0,y0,...; one row per frame.


def write_landmarks(path, frames: Sequence[np.ndarray], layout: LandmarkLayout,
                    frame_ids: Optional[Sequence[int]] = None) -> None:
    layout.validate()
    ids = list(range(len(frames))) if frame_ids is None else list(frame_ids)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(layout.to_dict(), sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["frame_id"] + [f"{a}{k}" for k in range(layout.n_points) for a in "xy"])
        for fid, lm in zip(ids, frames):
            lm = np.asarray(lm, dtype=np.float64)
            if lm.shape != (layout.n_points, 2):
                raise TrackingError(f"frame {fid}: expected {layout.n_points} x 2 landmarks, got {lm.shape}")
            w.writerow([fid] + [repr(float(v)) for v in lm.reshape(-1)])


def read_landmarks(path) -> Tuple[LandmarkLayout, List[int], np.ndarray]:
    """Returns (layout, frame ids, T x K x 2 array)."""
    p = Path(path)
    try:
        lines = p.read_text().splitlines()
    except OSError as exc:
        raise TrackingError(f"cannot read landmark file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("#"):
        raise TrackingError(f"{path}: missing layout header line")
    try:
        layout = LandmarkLayout.from_dict(json.loads(lines[0][1:]))
    except json.JSONDecodeError as exc:
        raise TrackingError(f"{path}: bad layout header: {exc}") from exc
    rows = list(csv.reader(lines[2:]))
    ids, pts = [], []
    for n, r in enumerate(rows):
        if len(r) != 1 + 2 * layout.n_points:
            raise TrackingError(f"{path}: row {n + 1} has {len(r)} columns, expected {1 + 2 * layout.n_points}")
        ids.append(int(r[0]))
        pts.append([float(v) for v in r[1:]])
    arr = np.asarray(pts, dtype=np.float64).reshape(len(rows), layout.n_points, 2)
    if not np.isfinite(arr).all():
        raise TrackingError(f"{path}: non-finite landmark coordinates")
    return layout, ids, arr


# ---------------------------------------------------------------------------
# Synthetic sequence and demo

# 20 points: 4 per eye (outer, upper, inner, lower), 4 lip (left, upper, right, lower), 8 contour/nose
_BASE = np.array([
    [-34, -12], [-24, -18], [-14, -12], [-24, -6],
    [14, -12], [24, -18], [34, -12], [24, -6],
    [-18, 34], [0, 28], [18, 34], [0, 40],
    [-52, -10], [-48, 22], [-30, 50], [0, 60], [30, 50], [48, 22], [52, -10], [0, 10],
], dtype=np.float64)

DEMO_LAYOUT = LandmarkLayout(
    n_points=20, eye=tuple(range(8)), lip=(8, 9, 10, 11),
    eye_pairs=((1, 3), (5, 7)), lip_pairs=((9, 11),),
    left_eye=(0, 1, 2, 3), right_eye=(4, 5, 6, 7),
)


def synthetic_landmark_sequence(n_frames: int = 120, seed: int = 0, center=(128.0, 128.0)) -> np.ndarray:
    """Head sway with a few rapid turns, blinks and mouth openings; T x 20 x 2 px."""
    rng = np.random.default_rng(seed)
    out = np.empty((n_frames, 20, 2))
    bursts = rng.choice(max(n_frames - 10, 1), size=max(1, n_frames // 40), replace=False)
    for t in range(n_frames):
        lm = _BASE.copy()
        blink = max(0.0, math.cos(2 * math.pi * t / 37.0)) ** 20
        lm[[1, 5], 1] += 6.0 * blink
        lm[[3, 7], 1] -= 6.0 * blink
        mouth = 0.5 + 0.5 * math.sin(2 * math.pi * t / 53.0)
        lm[11, 1] += 10.0 * mouth
        lm[9, 1] -= 2.0 * mouth
        yaw = 0.15 * math.sin(2 * math.pi * t / 90.0)
        shift = np.array([20.0 * math.sin(2 * math.pi * t / 70.0), 8.0 * math.sin(2 * math.pi * t / 45.0)])
        for b in bursts:
            if b <= t < b + 10:
                shift += np.array([140.0, 30.0]) * math.sin(math.pi * (t - b) / 10.0)
        c, s = math.cos(yaw), math.sin(yaw)
        lm = lm @ np.array([[c, s], [-s, c]]) + shift + np.asarray(center)
        out[t] = lm + rng.normal(0.0, 0.3, size=lm.shape)
    return out


@dataclass
class DemoRow:
    frame: int
    d_lmk: float
    n_cur: int
    n_t: int
    eye_loss: float
    lip_loss: float


def track_demo(frames: np.ndarray, layout: LandmarkLayout = DEMO_LAYOUT, params: ScheduleParams = ScheduleParams(),
               gamma: float = GAMMA, reference: int = 0, seed: int = 0, fit_noise: float = 0.5,
               frame_ids: Optional[Sequence[int]] = None) -> List[DemoRow]:
    """Drive the schedule over a landmark sequence.

    The structural losses compare each frame with a stand-in fit: the same
    landmarks plus seeded Gaussian noise of ``fit_noise`` px.
    """
    layout.validate()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (layout.n_points, 2):
        raise TrackingError(f"expected T x {layout.n_points} x 2 landmarks, got {frames.shape}")
    if not (0 <= reference < len(frames)):
        raise TrackingError(f"reference frame {reference} out of range")
    rng = np.random.default_rng(seed)
    ids = list(range(len(frames))) if frame_ids is None else list(frame_ids)
    state = ScheduleState(params)
    rows = []
    for t, lm in enumerate(frames):
        d = landmark_motion(lm, frames[reference], layout)
        n_cur = motion_iters_proposal(d, params)
        n_t = smooth_iters(state, n_cur)
        gt = LandmarkFrame.from_layout(lm, layout)
        pred = LandmarkFrame.from_layout(lm + rng.normal(0.0, fit_noise, size=lm.shape), layout)
        rows.append(DemoRow(ids[t], d, n_cur, n_t, float(eye_closure_loss(pred, gt, gamma)),
                            float(lip_align_loss(pred, gt, gamma))))
    return rows


def write_demo_csv(path, rows: Sequence[DemoRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "d_lmk", "n_cur", "n_t", "eye_loss", "lip_loss"])
        for r in rows:
            w.writerow([r.frame, f"{r.d_lmk:.6f}", r.n_cur, r.n_t, f"{r.eye_loss:.6f}", f"{r.lip_loss:.6f}"])
