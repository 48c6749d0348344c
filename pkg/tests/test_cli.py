import csv
import hashlib
import json
from dataclasses import asdict, fields

import numpy as np
import pytest
import torch

from conftest import small_config
from hairsplat.avatar_io import load_bundle, read_splat_ply
from hairsplat.cli import build_parser, main
from hairsplat.config import ModelConfig, TrainConfig
from hairsplat.render import render
from hairsplat.render.camera import orbit_camera
from hairsplat.synthetic import CAMERA_RIG, load_png, save_png, to_png


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {"model": asdict(small_config()),
           "train": {"iters": 3, "warmup_iters": 1, "lr": 1e-3, "prior_iters": 5, "checkpoint_every": 2}}
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for cls, sec in ((ModelConfig, "model"), (TrainConfig, "train")):
        for f in fields(cls):
            assert f"{sec}.{f.name}" in text
    assert "HAIRSPLAT_THREADS" in text


def test_subcommand_help_has_common_flags(capsys):
    with pytest.raises(SystemExit):
        main(["eval", "--help"])
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--model.C"):
        assert flag in text


def test_missing_inputs_usage(capsys):
    with pytest.raises(SystemExit) as e:
        main(["reconstruct", "--out", "x"])
    assert e.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_key_flag(capsys):
    with pytest.raises(SystemExit) as e:
        main(["track-demo", "--model.bogus", "3"])
    assert e.value.code == 2
    assert "--model.bogus" in capsys.readouterr().err


def test_unknown_key_in_config_file(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"model": {"bogus": 1}}))
    assert run("track-demo", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err.strip()
    assert err == "error: ConfigError: unknown config key: model.bogus"


def test_bad_value_one_line(tmp_path, capsys):
    assert run("track-demo", "--model.C", "abc", "--out", tmp_path) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ConfigError:") and "model.C" in err[0]


def test_missing_file_error(tmp_path, capsys):
    assert run("export-ply", "--bundle", tmp_path / "nope.hsa", "--out", tmp_path / "x.ply") == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: BundleError:") and "\n" not in err


def test_gen_data_reproducible(work):
    for name in ("d1", "d2"):
        assert run("gen-data", "--config", work / "cfg.json", "--seed", 3, "--out", work / name,
                   "--views", 6, "--expressions", 2, "--styles", "long") == 0
    assert tree_hash(work / "d1") == tree_hash(work / "d2")
    assert run("gen-data", "--config", work / "cfg.json", "--seed", 4, "--out", work / "d3") == 0
    assert tree_hash(work / "d1") != tree_hash(work / "d3")


def test_gen_data_bad_style(work, capsys):
    assert run("gen-data", "--out", work / "bad", "--styles", "mohawk") == 1
    assert "mohawk" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(work):
    out = work / "run"
    assert run("train", "--config", work / "cfg.json", "--data", work / "d1", "--out", out, "--log-every", 0) == 0
    return out


def test_train_outputs(trained):
    assert (trained / "checkpoint_final.pt").exists() and (trained / "checkpoint_000002.pt").exists()
    rows = list(csv.DictReader(open(trained / "train_log.csv")))
    assert len(rows) == 3
    assert json.loads((trained / "config.json").read_text())["model"]["C"] == 16


@pytest.fixture(scope="module")
def bundle(work, trained):
    path = work / "a.hsa"
    assert run("reconstruct", "--checkpoint", trained / "checkpoint_final.pt", "--images", work / "d1" / "id_000",
               "--expressions", "0", "--inputs", 3, "--out", path) == 0
    return path


def test_reconstruct_then_animate(work, bundle):
    out = work / "anim"
    assert run("animate", "--bundle", bundle, "--frames", 3, "--out", out) == 0
    assert sorted(p.name for p in out.iterdir()) == ["frame_0000.png", "frame_0001.png", "frame_0002.png"]
    b = load_bundle(bundle)
    cam = orbit_camera(0.0, 10.0, CAMERA_RIG["radius"], CAMERA_RIG["fov_deg"], b.cfg.image_size, CAMERA_RIG["target"])
    direct = to_png(render(b.gaussians(torch.zeros(b.cfg.E)), cam).rgb)
    stored = (load_png(out / "frame_0000.png").numpy() * 255).round().astype(np.uint8)
    assert np.array_equal(direct, stored)


def test_animate_expression_file(work, bundle):
    (work / "psi.json").write_text(json.dumps([[0.0] * 8, [1.0] + [0.0] * 7]))
    assert run("animate", "--bundle", bundle, "--frames", 2, "--expressions", work / "psi.json",
               "--out", work / "anim2") == 0
    (work / "bad_psi.json").write_text(json.dumps([[0.0] * 3]))
    assert run("animate", "--bundle", bundle, "--expressions", work / "bad_psi.json", "--out", work / "anim3") == 1


def test_refine(work, bundle, trained, capsys):
    out = work / "r.hsa"
    assert run("refine", "--bundle", bundle, "--images", work / "d1" / "id_000", "--checkpoint",
               trained / "checkpoint_final.pt", "--epochs", 2, "--expressions", "0", "--inputs", 3,
               "--out", out) == 0
    assert load_bundle(out).meta["stage"] == "refine"
    assert "refined 2 steps" in capsys.readouterr().out


def test_eval_gt_cap(work, capsys):
    out = work / "gt_eval.csv"
    assert run("eval", "--gt", "--images", work / "d1" / "id_000", "--out", out) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 12 and list(rows[0]) == ["index", "view", "expression", "psnr", "ssim"]
    assert all(float(r["psnr"]) == 100.0 for r in rows)
    assert all(float(r["ssim"]) == pytest.approx(1.0, abs=1e-6) for r in rows)
    assert "mean PSNR 100.000" in capsys.readouterr().out


def test_eval_bundle(work, bundle):
    out = work / "eval.csv"
    assert run("eval", "--bundle", bundle, "--images", work / "d1" / "id_000", "--out", out) == 0
    rows = list(csv.DictReader(open(out)))
    assert len(rows) == 12 and all(0 < float(r["psnr"]) < 100 for r in rows)


def test_transfer_and_export(work, bundle, trained):
    other = work / "b.hsa"
    assert run("reconstruct", "--checkpoint", trained / "checkpoint_final.pt", "--images", work / "d3" / "id_000",
               "--out", other) == 0
    merged = work / "m.hsa"
    assert run("transfer-hair", "--face", bundle, "--hair", other, "--out", merged) == 0
    assert run("export-ply", "--bundle", merged, "--out", work / "m.ply") == 0
    c = read_splat_ply(work / "m.ply")
    assert set(np.unique(c.semantic).tolist()) == {0, 1}
    assert run("export-ply", "--bundle", merged, "--psi", "1,2", "--out", work / "bad.ply") == 1


def test_edit_texture(work, bundle):
    H = small_config().head_uv
    overlay = torch.zeros(H, H, 3)
    overlay[..., 0] = 1
    save_png(work / "ov.png", overlay)
    save_png(work / "mask.png", torch.ones(H, H))
    out = work / "e.hsa"
    assert run("edit-texture", "--bundle", bundle, "--overlay", work / "ov.png", "--mask", work / "mask.png",
               "--out", out) == 0
    g = load_bundle(out).gaussians()
    assert torch.equal(g.colors[g.semantic == 0], torch.tensor([1.0, 0, 0]).expand(int((g.semantic == 0).sum()), 3))
    save_png(work / "small.png", torch.ones(4, 4))
    assert run("edit-texture", "--bundle", bundle, "--overlay", work / "ov.png", "--mask", work / "small.png",
               "--out", out) == 1


def test_track_demo(tmp_path):
    assert run("track-demo", "--frames", 40, "--seed", 1, "--out", tmp_path / "a") == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "schedule.csv")))
    assert len(rows) == 40 and all(int(r["n_t"]) <= 150 for r in rows)
    # replaying the written landmark file gives the same trace
    assert run("track-demo", "--landmarks", tmp_path / "a" / "landmarks.csv", "--seed", 1, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "schedule.csv").read_bytes() == (tmp_path / "b" / "schedule.csv").read_bytes()


def test_parser_builds():
    p = build_parser()
    ns = p.parse_args(["reconstruct", "--checkpoint", "c", "--images", "i", "--views", "0,2"])
    assert ns.views == [0, 2] and ns.inputs == 6
