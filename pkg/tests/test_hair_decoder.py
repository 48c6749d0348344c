import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from hairsplat.config import ModelConfig
from hairsplat.gaussians import HAIR
from hairsplat.geometry import pose_mesh, uv_position_map
from hairsplat.hair_decoder import (
    DensityMap, HairDecoder, HairLength, HairLengthClass, SamplingError, accumulate_strand, adaptive_sample,
    classify_hair_length, decode_directions, decode_hair_appearance, hair_branch, keep_probability,
    segment_count, strand_gaussians, strand_radius, subsample_vertices,
)
from hairsplat.render.rasterizer import compute_cov3d
from hairsplat.rotations import quat_to_rotmat

TOY = ModelConfig()


def test_accumulate_examples():
    v = accumulate_strand(torch.zeros(3), torch.tensor([[0, 0, 0.1], [0, 0.1, 0]]))
    assert torch.allclose(v, torch.tensor([[0, 0, 0], [0, 0, 0.1], [0, 0.1, 0.1]]))
    root = torch.tensor([1.0, 2.0, 3.0])
    assert torch.equal(accumulate_strand(root, torch.zeros(5, 3)), root.expand(6, 3))


def test_accumulate_oracle():
    g = torch.Generator().manual_seed(0)
    roots = torch.randn(100, 3, generator=g, dtype=torch.float64)
    d = 0.05 * torch.randn(100, 17, 3, generator=g, dtype=torch.float64)
    v = accumulate_strand(roots, d)
    assert torch.equal(v[:, 0], roots)
    for m in range(0, 100, 13):
        acc = roots[m].clone()
        for s in range(17):
            acc = acc + d[m, s]
            assert (v[m, s + 1] - acc).abs().max() < 1e-12


def test_segment_gaussian_example():
    v = torch.tensor([[0.0, 0, 0], [0, 0, 0.1]])
    mid, sc, q, keep = strand_gaussians(v, 0.002)
    assert torch.allclose(mid, torch.tensor([[0, 0, 0.05]]))
    assert torch.allclose(sc, torch.tensor([[0.05, 0.002, 0.002]]))
    x = quat_to_rotmat(q)[0] @ torch.tensor([1.0, 0, 0])
    assert torch.allclose(x, torch.tensor([0.0, 0, 1]), atol=1e-6)


def test_zero_segment_dropped():
    v = torch.tensor([[0.0, 0, 0], [0, 0, 0.1], [0, 0, 0.1], [0, 0.1, 0.1]])
    mid, sc, q, keep = strand_gaussians(v, 0.002)
    assert keep.tolist() == [True, False, True]
    assert len(mid) == 2
    with pytest.raises(ValueError):
        strand_gaussians(v, 0.0)


def test_strand_connectivity():
    g = torch.Generator().manual_seed(2)
    v = accumulate_strand(torch.zeros(3), 0.1 * torch.randn(9, 3, generator=g, dtype=torch.float64))
    mid, sc, q, _ = strand_gaussians(v, 0.01)
    axis = (quat_to_rotmat(q) @ torch.tensor([1.0, 0, 0], dtype=torch.float64))
    ends_hi = mid + sc[:, :1] * axis
    ends_lo = mid - sc[:, :1] * axis
    assert (ends_hi[:-1] - ends_lo[1:]).abs().max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_strand_rigid_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    v = accumulate_strand(torch.randn(3, generator=g, dtype=torch.float64),
                          0.1 * torch.randn(6, 3, generator=g, dtype=torch.float64))
    q = torch.randn(4, generator=g, dtype=torch.float64)
    R = quat_to_rotmat(q / q.norm())
    a = strand_gaussians(v, 0.01)
    b = strand_gaussians(v @ R.T, 0.01)
    assert torch.allclose(b[0], a[0] @ R.T, atol=1e-12)
    assert torch.allclose(b[1], a[1], atol=1e-12)
    ca = compute_cov3d(a[1], a[2])
    cb = compute_cov3d(b[1], b[2])
    assert torch.allclose(cb, R @ ca @ R.T, atol=1e-12)


def _decoder(cfg, template, seed=0):
    torch.manual_seed(seed)
    _, b = uv_position_map(template, cfg.scalp_uv, cfg.scalp_uv, "scalp")
    return HairDecoder(cfg), b


def test_directions_shape_and_gamma_zero(template):
    cfg = small_config(S=64)
    dec, b = _decoder(cfg, template)
    torch.nn.init.normal_(dec.proj.weight)
    tok = torch.randn(cfg.scalp_uv, cfg.scalp_uv, cfg.C)
    base = torch.randn(cfg.scalp_uv, cfg.scalp_uv, cfg.C_hair)
    d = decode_directions(tok, base, 0.1, dec, b.valid)
    assert tuple(d.shape) == (int(b.valid.sum()), 64, 3)
    d0 = decode_directions(tok, base, 0.0, dec, b.valid)
    d1 = decode_directions(torch.randn_like(tok), base, 0.0, dec, b.valid)
    assert torch.equal(d0, d1)
    assert not torch.equal(d, d0)
    with pytest.raises(ValueError):
        decode_directions(tok[:-1], base, 0.1, dec, b.valid)


def test_paper_strand_count():
    from hairsplat.config import paper_scale

    assert paper_scale().S == 256
    assert paper_scale().S0 == 24


def test_appearance(cfg, template):
    dec, b = _decoder(cfg, template)
    tok = torch.randn(cfg.scalp_uv, cfg.scalp_uv, cfg.C)
    a, c = decode_hair_appearance(tok, dec)
    assert a.shape == b.valid.shape and c.shape == (*b.valid.shape, 3)
    for head in (dec.opacity, dec.color):
        for p in head[-1].parameters():
            torch.nn.init.zeros_(p)
    a, c = decode_hair_appearance(tok, dec)
    assert torch.equal(a, torch.full_like(a, 0.5)) and torch.equal(c, torch.full_like(c, 0.5))


def _dirs_with_mean_len(mean_len, S=64, M=50, cfg=TOY):
    # straight strands whose arc length / length_norm is mean_len
    d = torch.zeros(M, S, 3, dtype=torch.float64)
    d[..., 2] = mean_len * cfg.length_norm / S
    return d


@pytest.mark.parametrize("ml,cls", [(0.121, HairLength.SHORT), (0.201, HairLength.MEDIUM),
                                    (0.228, HairLength.LONG)])
def test_classify_table_cases(ml, cls):
    c = classify_hair_length(_dirs_with_mean_len(ml), TOY)
    assert c.cls is cls
    assert c.mean_len == pytest.approx(ml)


@pytest.mark.parametrize("ml,s", [(0.121, 21), (0.201, 36), (0.228, 42)])
def test_segment_count_table(ml, s):
    assert abs(segment_count(ml, ModelConfig(S=256)) - s) <= 2


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.6), st.floats(0.0, 0.6))
def test_segment_count_monotone_radius_antitone(a, b):
    lo, hi = sorted((a, b))
    assert segment_count(lo, TOY) <= segment_count(hi, TOY)
    assert strand_radius(lo, TOY) >= strand_radius(hi, TOY)
    assert TOY.S_min <= segment_count(lo, TOY) <= TOY.S


def test_radius_rule():
    assert strand_radius(0.3, TOY) == TOY.r0
    assert strand_radius(0.0, TOY) == pytest.approx(TOY.r0 * (1 + TOY.eta))
    assert strand_radius(0.075, TOY) == pytest.approx(TOY.r0 * 1.5)


def test_adaptive_sample_determinism_and_errors():
    g = torch.Generator().manual_seed(0)
    dens = DensityMap(torch.rand(16, 16, generator=g))
    cls = HairLengthClass(HairLength.LONG, 0.23)
    k1, s1, r1 = adaptive_sample(dens, cls, TOY, seed=3)
    k2, s2, r2 = adaptive_sample(dens, cls, TOY, seed=3)
    assert torch.equal(k1, k2) and s1 == s2 and r1 == r2
    k3, _, _ = adaptive_sample(dens, cls, TOY, seed=4)
    assert not torch.equal(k1, k3)
    with pytest.raises(SamplingError, match="all strands sampled away"):
        adaptive_sample(DensityMap(torch.zeros(8, 8)), cls, TOY)
    with pytest.raises(ValueError):
        DensityMap(torch.tensor([[-1.0]]))


def test_short_density_scale_keeps_more():
    g = torch.Generator().manual_seed(0)
    v = torch.rand(64, 64, generator=g)
    p1 = keep_probability(DensityMap(v, 1.0))
    p2 = keep_probability(DensityMap(v, 1.235))
    assert (p2 >= p1).all() and p2.sum() > p1.sum()
    assert p2.max() <= 1.0


def test_subsample_vertices():
    v = torch.arange(65, dtype=torch.float64)[:, None].expand(65, 3)
    sub = subsample_vertices(v, 21)
    assert sub.shape[0] == 22
    assert torch.equal(sub[0], v[0]) and torch.equal(sub[-1], v[-1])
    assert (sub[1:, 0] > sub[:-1, 0]).all()


def _branch(cfg, template, psi=None, seed=0):
    dec, b = _decoder(cfg, template)
    tok = torch.randn(cfg.scalp_uv, cfg.scalp_uv, cfg.C, generator=torch.Generator().manual_seed(1))
    base = torch.randn(cfg.scalp_uv, cfg.scalp_uv, cfg.C_hair, generator=torch.Generator().manual_seed(2))
    base[..., -1] = base[..., -1].abs() + 0.1
    posed = pose_mesh(template, torch.zeros(8) if psi is None else psi)
    return hair_branch(tok, base, b, posed, dec, seed), b


def test_hair_branch_counts(cfg, template):
    (g, strands), b = _branch(cfg, template)
    assert (g.semantic == HAIR).all()
    n_kept = int(strands.keep_mask.sum())
    assert len(g) == n_kept * strands.S_eff  # no zero-length segments at init
    assert strands.S_eff <= cfg.S and strands.radius > 0
    assert torch.equal(strands.vertices[:, 0], strands.roots)
    # all segments of one strand share opacity/color
    for sid in g.strand.unique()[:5]:
        m = g.strand == sid
        assert (g.opacities[m] == g.opacities[m][0]).all()
        assert (g.colors[m] == g.colors[m][0]).all()


def test_hair_branch_rigid_follow(cfg, template):
    (g0, s0), _ = _branch(cfg, template)
    psi = torch.zeros(8)
    psi[1] = 1.5
    (g1, s1), b = _branch(cfg, template, psi)
    fi, _ = b.flat_valid()
    R0 = pose_mesh(template, torch.zeros(8)).frames.rotation[fi]
    R1 = pose_mesh(template, psi).frames.rotation[fi]
    loc0 = torch.einsum("mji,msj->msi", R0, s0.directions)
    loc1 = torch.einsum("mji,msj->msi", R1, s1.directions)
    assert (loc0 - loc1).abs().max() < 1e-5
    assert torch.equal(s0.keep_mask, s1.keep_mask)


def test_hair_branch_seed_determinism(cfg, template):
    (ga, sa), _ = _branch(cfg, template, seed=5)
    (gb, sb), _ = _branch(cfg, template, seed=5)
    assert torch.equal(ga.means, gb.means) and torch.equal(sa.keep_mask, sb.keep_mask)
