import numpy as np
import pytest
import torch

from conftest import small_config
from hairsplat.config import TrainConfig
from hairsplat.layers import checksum
from hairsplat.model import FROZEN_IN_REFINE, HairSplatModel
from hairsplat.render import render
from hairsplat.synthetic import load_dataset, to_png
from hairsplat.training import (
    Trainer, TrainingError, augment, evaluate_bundle, fast_refine, load_model, lr_at, mean_psnr,
    pretrain_hair_prior, reconstruct, refine_lr_at, render_bundle, sample_training_batch,
)


def _model(seed=0):
    torch.manual_seed(seed)
    return HairSplatModel(small_config())


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr == 1e-4 and cfg.warmup_iters == 600 and cfg.refine_epochs == 100
    assert lr_at(0, cfg) < lr_at(300, cfg) < lr_at(599, cfg) == pytest.approx(cfg.lr)
    assert lr_at(600, cfg) == pytest.approx(cfg.lr)
    assert lr_at(1300, cfg) == pytest.approx(cfg.lr / 2)
    assert lr_at(cfg.iters, cfg) == pytest.approx(0.0, abs=1e-15)
    assert refine_lr_at(0, 100, cfg) == pytest.approx(cfg.refine_lr)
    assert refine_lr_at(99, 100, cfg) == pytest.approx(0.1 * cfg.refine_lr)


def test_augment_off_and_on():
    imgs = torch.rand(4, 8, 8, 3)
    rng = np.random.default_rng(0)
    assert torch.equal(augment(imgs, rng, TrainConfig(aug_prob=0.0)), imgs)
    out = augment(imgs, rng, TrainConfig(aug_prob=1.0))
    assert not torch.equal(out, imgs)
    assert out.min() >= 0 and out.max() <= 1


def test_batch_contract(tiny_identity):
    rng = np.random.default_rng(0)
    cfg = TrainConfig()
    counts = set()
    for _ in range(200):
        b = sample_training_batch(tiny_identity, rng, cfg)
        counts.add(len(b.inputs))
        assert 1 <= len(b.inputs) <= 6
        assert len(b.targets) == 4
        assert (b.targets.psi == b.targets.psi[0]).all()
        assert torch.equal(b.psi, b.targets.psi[0])
    assert counts == set(range(1, 7))


def test_batch_without_augmentation_is_source(tiny_identity):
    rng = np.random.default_rng(3)
    b = sample_training_batch(tiny_identity, rng, TrainConfig(aug_prob=0.0))
    imgs = tiny_identity.train.images
    for img in b.inputs.images:
        assert any(torch.equal(img, x) for x in imgs)


def test_batch_skips_thin_identity(tiny_identity):
    rng = np.random.default_rng(0)
    assert sample_training_batch(tiny_identity, rng, TrainConfig(n_supervision=7)) is None


def test_fit_without_usable_identity_raises(tiny_identity):
    tr = Trainer(_model(), TrainConfig(n_supervision=7, iters=3))
    with pytest.raises(TrainingError, match="no identity"):
        tr.fit([tiny_identity], log_every=0)


def test_train_step_clip_and_record(tiny_identity):
    model = _model()
    tr = Trainer(model, TrainConfig(lr=1e-3, warmup_iters=5, iters=10))
    rec = tr.train_step(sample_training_batch(tiny_identity, tr.rng, tr.cfg))
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    post = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g) for g in grads])))
    assert post <= 1 + 1e-6
    assert set(rec.losses) == {"total", "hair", "photo", "reg"}
    assert rec.lr == pytest.approx(lr_at(0, tr.cfg)) and tr.step == 1


def test_non_finite_loss_aborts(tiny_identity):
    tr = Trainer(_model(), TrainConfig())
    b = sample_training_batch(tiny_identity, tr.rng, tr.cfg)
    b.targets.images[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError, match="non-finite loss"):
        tr.train_step(b)


def test_loss_decreases(tiny_identity):
    drops = []
    for seed in range(3):
        tr = Trainer(_model(seed), TrainConfig(lr=1e-3, warmup_iters=20, iters=200, seed=seed))
        hist = tr.fit([tiny_identity], log_every=0)
        losses = [r.losses["total"] for r in hist]
        drops.append(np.mean(losses[:20]) - np.mean(losses[-20:]))
    assert np.median(drops) > 0


def test_checkpoint_round_trip(tiny_identity, tmp_path):
    tr = Trainer(_model(), TrainConfig(iters=2, checkpoint_every=1, lr=1e-3, warmup_iters=1))
    tr.fit([tiny_identity], out_dir=tmp_path, log_every=0)
    assert (tmp_path / "checkpoint_000001.pt").exists() and (tmp_path / "train_log.csv").exists()
    m = load_model(tmp_path / "checkpoint_final.pt")
    for (k, a), (_, b) in zip(m.state_dict().items(), tr.model.state_dict().items()):
        assert torch.equal(a, b), k
    tr2 = Trainer(_model(5), tr.cfg)
    tr2.load_checkpoint(tmp_path / "checkpoint_final.pt")
    assert tr2.step == 2


def test_training_is_deterministic(tiny_identity):
    runs = []
    for _ in range(2):
        tr = Trainer(_model(1), TrainConfig(lr=1e-3, warmup_iters=2, iters=4, seed=2))
        runs.append([r.losses["total"] for r in tr.fit([tiny_identity], log_every=0)])
    assert runs[0] == runs[1]


def test_prior_pretraining_reduces_loss(tiny_identity):
    model = _model()
    before = checksum(model.image_encoder)
    hist = pretrain_hair_prior(model, [tiny_identity], TrainConfig(), iters=60)
    assert np.mean(hist[-10:]) < np.mean(hist[:10])
    assert checksum(model.image_encoder) == before


def test_reconstruct_cache_and_determinism(tiny_identity):
    model = _model()
    caps = tiny_identity.train
    a = reconstruct(model, caps.subset([0, 1, 2]))
    b = reconstruct(model, caps.subset([0, 1, 2]))
    assert torch.equal(a.head_tokens, b.head_tokens) and torch.equal(a.hair_tokens, b.hair_tokens)
    for k in a.weights:
        assert torch.equal(a.weights[k], b.weights[k])
    for n in range(1, 7):
        bundle = reconstruct(model, caps.subset(list(range(n))))
        assert bundle.meta["n_inputs"] == n
    # rendering under new expressions touches only the decoders
    model.backbone.forward = None
    img0 = render_bundle(a, torch.zeros(8), caps.cameras[0])
    img1 = render_bundle(a, torch.ones(8), caps.cameras[0])
    assert img0.shape == (32, 32, 3) and not torch.equal(img0, img1)


def test_fast_refine_freezes_and_improves(tiny_identity):
    caps = tiny_identity.train.subset([0, 1, 2, 3, 4, 5])
    for seed in range(3):
        model = _model(seed)
        sums = {n: checksum(m) for n, m in zip(FROZEN_IN_REFINE, model.submodules(FROZEN_IN_REFINE))}
        bundle = reconstruct(model, caps)
        refined, rep = fast_refine(bundle, caps, TrainConfig(refine_lr=1e-3), epochs=8, model=model, seed=seed)
        assert rep.loss_after <= rep.loss_before
        assert rep.steps == 8
        for n, m in zip(FROZEN_IN_REFINE, model.submodules(FROZEN_IN_REFINE)):
            assert checksum(m) == sums[n]
        assert torch.equal(refined.hair_base, bundle.hair_base)
    before = mean_psnr(evaluate_bundle(bundle, caps))
    after = mean_psnr(evaluate_bundle(refined, caps))
    assert after >= before


def test_refine_chunks_large_input_sets(tiny_identity):
    caps = tiny_identity.train  # 12 frames -> two chunks per epoch
    bundle = reconstruct(_model(), caps.subset([0]))
    _, rep = fast_refine(bundle, caps, TrainConfig(refine_lr=1e-3), epochs=2)
    assert rep.steps == 4


# --- synthetic data -------------------------------------------------------

def test_dataset_layout(tiny_dataset, tiny_identity):
    d = tiny_identity
    assert len(d.train) == 12 and len(d.heldout) == 12
    assert {(f["view"], f["expression"]) for f in d.train_meta} == {(v, e) for v in range(6) for e in range(2)}
    assert load_dataset(tiny_dataset)[0].name == "id_000"
    with pytest.raises(ValueError):
        load_dataset(tiny_dataset / "id_000")


def test_masks_match_semantics(tiny_dataset, tiny_identity):
    d = tiny_identity
    for i in (0, 3, 7):
        f = d.train_meta[i]
        g = d.gt_gaussians[f["expression"]]
        out = render(g, d.train.cameras[i], d.bg, semantic=True)
        hair = (out.semantic[..., 1] > 0.5).float()
        assert torch.equal(d.train.hair_masks[i], hair)
        assert int(hair.sum()) > 0


def test_stored_gaussians_reproduce_images(tiny_dataset, tiny_identity):
    d = tiny_identity
    for i, f in enumerate(d.train_meta):
        g = d.gt_gaussians[f["expression"]]
        rgb = render(g, d.train.cameras[i], d.bg).rgb
        stored = np.asarray(__import__("PIL.Image").Image.open(tiny_dataset / "id_000" / f["image"]))
        assert np.array_equal(to_png(rgb), stored)


def test_gt_avatar_rebuilds_stored_gaussians(tiny_identity):
    d = tiny_identity
    from hairsplat.geometry import build_toy_head_template

    cfg = small_config()
    tmpl = build_toy_head_template(cfg.template_seed, cfg.E)
    g = d.gt.gaussians(tmpl, cfg, torch.tensor(d.train_meta[0]["psi"]))
    ref = d.gt_gaussians[d.train_meta[0]["expression"]]
    assert torch.equal(g.means, ref.means) and torch.equal(g.colors, ref.colors)


def test_generation_deterministic(tmp_path, tiny_dataset):
    from hairsplat.synthetic import generate_synthetic_dataset

    generate_synthetic_dataset(tmp_path, seed=0, n_identities=1, n_views=6, n_expressions=2, styles=["long"],
                               cfg=small_config())
    for name in ("images/train_e1_v4.png", "masks/hair_heldout_e0_v2.png", "manifest.json", "gt.hsa"):
        assert (tmp_path / "id_000" / name).read_bytes() == (tiny_dataset / "id_000" / name).read_bytes()
