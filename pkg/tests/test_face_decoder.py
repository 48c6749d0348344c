import pytest
import torch

from hairsplat.face_decoder import FaceDecoder, apply_color_edit, decode_face_gaussians, face_branch
from hairsplat.gaussians import FACE
from hairsplat.geometry import pose_mesh, uv_position_map


def _setup(cfg, template):
    _, b = uv_position_map(template, cfg.head_uv, cfg.head_uv)
    dec = FaceDecoder(cfg)
    tok = torch.randn(cfg.head_uv, cfg.head_uv, cfg.C)
    return dec, b, tok


def test_zero_heads_fixed_points(cfg, template):
    dec, b, tok = _setup(cfg, template)
    for head in dec.heads.values():
        for p in head[-1].parameters():
            torch.nn.init.zeros_(p)
    loc = decode_face_gaussians(tok, b, dec)
    assert torch.equal(loc.offsets, torch.zeros_like(loc.offsets))
    assert torch.equal(loc.quats, torch.tensor([[1.0, 0, 0, 0]]).expand_as(loc.quats))
    assert torch.allclose(loc.opacities, torch.full_like(loc.opacities, 0.5))
    assert torch.allclose(loc.colors, torch.full_like(loc.colors, 0.5))
    assert torch.allclose(loc.scales, torch.full_like(loc.scales, cfg.sigma_floor), atol=1e-5)


def test_count_equals_valid_pixels(cfg, template):
    dec, b, tok = _setup(cfg, template)
    assert len(decode_face_gaussians(tok, b, dec)) == int(b.valid.sum())


def test_count_scales_with_resolution(template):
    n = {}
    for res in (32, 64):
        _, b = uv_position_map(template, res, res)
        n[res] = int(b.valid.sum())
    assert 3.5 <= n[64] / n[32] <= 4.5


def test_range_invariants_fuzz(cfg, template):
    dec, b, _ = _setup(cfg, template)
    for s in range(10):
        tok = 30.0 * torch.randn(cfg.head_uv, cfg.head_uv, cfg.C, generator=torch.Generator().manual_seed(s))
        loc = decode_face_gaussians(tok, b, dec)
        assert (loc.scales > 0).all()
        assert (loc.scales[:, 2] <= cfg.planar_ratio * cfg.sigma_cap + cfg.sigma_floor).all()
        assert (loc.scales[:, :2] <= cfg.sigma_cap + cfg.sigma_floor).all()
        assert ((loc.quats.norm(dim=-1) - 1).abs() < 1e-6).all()
        for t in (loc.opacities, loc.colors):
            assert (t >= 0).all() and (t <= 1).all()
        assert (loc.offsets.abs() <= cfg.offset_bound).all()


def test_initial_scale(cfg, template):
    dec, b, tok = _setup(cfg, template)
    loc = decode_face_gaussians(tok, b, dec)
    assert torch.allclose(loc.scales[:, 0], torch.full_like(loc.scales[:, 0], cfg.sigma_init), rtol=0.05)


def test_nan_and_grid_errors(cfg, template):
    dec, b, tok = _setup(cfg, template)
    bad = tok.clone()
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        decode_face_gaussians(bad, b, dec)
    with pytest.raises(ValueError):
        decode_face_gaussians(tok[:-1], b, dec)


def test_face_branch_binding(cfg, template):
    dec, b, tok = _setup(cfg, template)
    posed0 = pose_mesh(template, torch.zeros(8))
    g0 = face_branch(tok, b, posed0, dec)
    assert (g0.semantic == FACE).all()
    fi, bary = b.flat_valid()
    anchor = (posed0.vertices[posed0.faces[fi]] * bary[..., None]).sum(1)
    bound = cfg.offset_bound * posed0.frames.scale[fi] * 3 ** 0.5
    assert ((g0.means - anchor).norm(dim=-1) <= bound + 1e-6).all()
    psi = torch.zeros(8)
    psi[0] = 1.0
    g1 = face_branch(tok, b, pose_mesh(template, psi), dec)
    assert torch.equal(g0.opacities, g1.opacities) and torch.equal(g0.colors, g1.colors)
    assert (g0.means - g1.means).abs().max() > 1e-3


def test_color_edit(cfg, template):
    dec, b, tok = _setup(cfg, template)
    loc = decode_face_gaussians(tok, b, dec)
    H = cfg.head_uv
    red = torch.zeros(H, H, 3)
    red[..., 0] = 1
    full = apply_color_edit(loc, b, red, torch.ones(H, H))
    assert torch.equal(full.colors, torch.tensor([[1.0, 0, 0]]).expand_as(full.colors))
    assert torch.equal(full.offsets, loc.offsets) and torch.equal(full.scales, loc.scales)
    none = apply_color_edit(loc, b, red, torch.zeros(H, H))
    assert torch.equal(none.colors, loc.colors)
    with pytest.raises(ValueError):
        apply_color_edit(loc, b, red[:-1], torch.ones(H - 1, H))


def test_paper_scale_grid(template):
    _, b = uv_position_map(template, 224, 224)
    assert b.valid.shape == (224, 224)
    assert 0 < int(b.valid.sum()) <= 224 * 224
