import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hairsplat.tracking import (
    DEMO_LAYOUT, GAMMA, LandmarkFrame, ScheduleParams, ScheduleState, TrackingError, eye_closure_loss,
    inter_eye_distance, landmark_motion, lip_align_loss, motion_iters_proposal, read_landmarks, schedule,
    smooth_iters, synthetic_landmark_sequence, track_demo, write_landmarks,
)

P = ScheduleParams()


def test_defaults():
    assert (P.N0, P.delta, P.d_th, P.lam, P.N_max) == (50, 10.0, 2.0, 0.8, 150)
    assert GAMMA == 0.95


def test_proposal_examples():
    assert motion_iters_proposal(1.5, P) == 50
    assert motion_iters_proposal(3.4, P) == 64
    assert motion_iters_proposal(2.0, P) == 50  # strict inequality
    assert motion_iters_proposal(2.3, P) == 53  # 10 * 0.3 is 2.9999... in floating point


def test_smoothing_examples():
    st_ = ScheduleState(ScheduleParams(N_max=60), N_prev=50)
    assert smooth_iters(st_, 64) == 52
    assert st_.N_prev == 52
    st_ = ScheduleState(P, N_prev=70)
    assert smooth_iters(st_, 70) == 70  # fixed point
    st_ = ScheduleState(P, N_prev=50)
    assert smooth_iters(st_, 10 ** 9) == P.N_max


def test_param_validation():
    with pytest.raises(TrackingError):
        ScheduleState(ScheduleParams(N0=200, N_max=150))
    with pytest.raises(TrackingError):
        ScheduleState(ScheduleParams(lam=1.0))
    with pytest.raises(TrackingError):
        motion_iters_proposal(float("nan"), P)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50))
def test_proposal_monotone(a, b):
    lo, hi = sorted((a, b))
    assert motion_iters_proposal(lo, P) <= motion_iters_proposal(hi, P)


def test_cap_over_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(1, 12))
        d = rng.exponential(rng.uniform(0.5, 30.0), size=n)
        for n_cur, n_t in schedule(d, P):
            assert n_t <= P.N_max
            assert n_cur >= P.N0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 150), st.integers(0, 10_000))
def test_smoothing_contracts_toward_proposal(prev, cur):
    s = ScheduleState(P, N_prev=prev)
    n = smooth_iters(s, cur)
    unclipped = math.floor(P.lam * prev + (1 - P.lam) * cur + 1e-9)
    assert n == min(unclipped, P.N_max)
    assert abs(unclipped - cur) <= abs(prev - cur)


def _frame(seed=0):
    return synthetic_landmark_sequence(3, seed)[1]


def test_losses_zero_on_match_and_example():
    lm = _frame()
    gt = LandmarkFrame.from_layout(lm, DEMO_LAYOUT)
    assert float(eye_closure_loss(gt, gt)) == 0.0
    assert float(lip_align_loss(gt, gt)) == 0.0
    pred = LandmarkFrame(gt.landmarks.clone(), gt.eye, gt.lip, gt.d_eye + 0.2, gt.d_lip)
    assert float(eye_closure_loss(pred, gt, 0.95)) == pytest.approx(0.01, abs=1e-12)


def test_loss_is_mean_point_distance():
    lm = _frame()
    gt = LandmarkFrame.from_layout(lm, DEMO_LAYOUT)
    moved = gt.landmarks.clone()
    moved[list(DEMO_LAYOUT.lip)] += torch.tensor([3.0, 4.0])
    pred = LandmarkFrame(moved, gt.eye, gt.lip, gt.d_eye, gt.d_lip)
    assert float(lip_align_loss(pred, gt, 0.95)) == pytest.approx(0.95 * 5.0)
    assert float(eye_closure_loss(pred, gt)) == 0.0  # lip points are outside the eye subset


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 3), st.floats(-1, 1), st.booleans())
def test_losses_zero_iff_match(seed, scale, dd, perturb):
    rng = np.random.default_rng(seed)
    lm = _frame(seed % 7)
    gt = LandmarkFrame.from_layout(lm, DEMO_LAYOUT)
    pts = gt.landmarks.clone()
    if perturb:
        pts = pts + torch.from_numpy(rng.normal(0, 1, pts.shape)) * scale
    pred = LandmarkFrame(pts, gt.eye, gt.lip, max(0.0, gt.d_eye + dd), max(0.0, gt.d_lip + dd))
    for f in (eye_closure_loss, lip_align_loss):
        v = float(f(pred, gt))
        assert v >= 0.0
        sub = list(gt.eye if f is eye_closure_loss else gt.lip)
        d_p = pred.d_eye if f is eye_closure_loss else pred.d_lip
        d_g = gt.d_eye if f is eye_closure_loss else gt.d_lip
        match = torch.equal(pred.landmarks[sub], gt.landmarks[sub]) and d_p == d_g
        assert (v == 0.0) == match


def test_loss_gradient_finite_at_match():
    lm = torch.from_numpy(_frame()).requires_grad_(True)
    gt = LandmarkFrame.from_layout(lm.detach(), DEMO_LAYOUT)
    pred = LandmarkFrame(lm, gt.eye, gt.lip, gt.d_eye, gt.d_lip)
    eye_closure_loss(pred, gt).backward()
    assert torch.isfinite(lm.grad).all()


def test_frame_validation():
    with pytest.raises(TrackingError):
        LandmarkFrame(torch.zeros(4, 2), (0, 1), (1, 2), 0.0, 0.0)
    with pytest.raises(TrackingError):
        LandmarkFrame(torch.zeros(4, 2), (0,), (1,), -1.0, 0.0)


def test_motion_normalized_by_inter_eye_distance():
    lm = _frame()
    iod = inter_eye_distance(lm, DEMO_LAYOUT)
    moved = lm + np.array([3.0 * iod, 0.0])
    assert landmark_motion(moved, lm, DEMO_LAYOUT) == pytest.approx(3.0)
    assert landmark_motion(lm, lm, DEMO_LAYOUT) == 0.0


def test_csv_round_trip(tmp_path):
    seq = synthetic_landmark_sequence(12, 3)
    p = tmp_path / "lm.csv"
    write_landmarks(p, seq, DEMO_LAYOUT, frame_ids=range(100, 112))
    layout, ids, arr = read_landmarks(p)
    assert layout == DEMO_LAYOUT
    assert ids == list(range(100, 112))
    assert np.array_equal(arr, seq)


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("frame_id,x0\n0,1\n")
    with pytest.raises(TrackingError, match="header"):
        read_landmarks(p)
    with pytest.raises(TrackingError):
        read_landmarks(tmp_path / "missing.csv")


def test_demo_trace():
    seq = synthetic_landmark_sequence(120, 0)
    rows = track_demo(seq)
    assert len(rows) == 120
    assert all(P.N0 <= r.n_t <= P.N_max for r in rows)
    assert max(r.n_cur for r in rows) > P.N0  # the rapid turns trigger extra iterations
    assert rows[0].d_lmk == 0.0
    assert all(r.eye_loss > 0 and r.lip_loss > 0 for r in rows)
    assert [r.n_t for r in track_demo(seq)] == [r.n_t for r in rows]
