"""Command-line interface: ``hairsplat <command> [options]``.

Every config key is also a flag (``--model.C 64``, ``--train.lr 3e-4``);
``--config`` loads a JSON file first and flags override it. Errors print a
single ``error: <Type>: <message>`` line to stderr and exit with status 1.
"""

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import Config, ConfigError, ModelConfig, TrainConfig

log = logging.getLogger("hairsplat")

COMMANDS = ("gen-data", "train", "reconstruct", "refine", "animate", "transfer-hair", "edit-texture", "eval",
            "track-demo", "export-ply")


def _config_keys():
    for sec, cls in (("model", ModelConfig), ("train", TrainConfig)):
        for f in fields(cls):
            yield sec, f.name, f.default


def _int_list(s: str) -> List[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="JSON config file with 'model' and 'train' sections")
    g.add_argument("--seed", type=int, default=None, help="seed for data generation, training and sampling")
    g.add_argument("--out", type=Path, help="output file or directory")
    c = p.add_argument_group("config keys (override --config)")
    for sec, name, default in _config_keys():
        shown = ",".join(str(v) for v in default) if isinstance(default, tuple) else default
        c.add_argument(f"--{sec}.{name}", dest=f"cfg__{sec}__{name}", metavar="V", default=None,
                       help=f"default {shown}")
    return p


def _selection(p: argparse.ArgumentParser, inputs_default: Optional[int] = None):
    p.add_argument("--views", type=_int_list, help="comma-separated view indices to use")
    p.add_argument("--expressions", type=_int_list, help="comma-separated expression indices to use")
    p.add_argument("--inputs", type=int, default=inputs_default, help="use the first N selected frames")


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {sec}.{name} = {default}" for sec, name, default in _config_keys())
    parser = argparse.ArgumentParser(
        prog="hairsplat", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Feed-forward face + hair Gaussian head avatars on synthetic data.",
        epilog=f"config keys (set with --<key> V on any command):\n{keys}\n\n"
               "environment: HAIRSPLAT_THREADS sets the rasterizer/torch thread count",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    common = _common()

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = add("gen-data", "render a synthetic multi-view dataset")
    p.add_argument("--identities", type=int, default=1)
    p.add_argument("--views", type=int, default=6, help="training views per expression")
    p.add_argument("--expressions", type=int, default=2)
    p.add_argument("--styles", default=None, help="comma-separated hair styles, cycled over identities")

    p = add("train", "train the feed-forward model")
    p.add_argument("--data", type=Path, required=True, help="dataset root or single identity directory")
    p.add_argument("--iters", type=int, default=None, help="total training steps (default train.iters)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--log-every", type=int, default=50)

    p = add("reconstruct", "build an avatar bundle from captures in one forward pass")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True, help="identity directory (PNG frames + manifest.json)")
    p.add_argument("--split", default="train", choices=("train", "heldout"))
    _selection(p, inputs_default=6)

    p = add("refine", "fast refinement of a bundle on its input captures")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None, help="model to checksum frozen parts against")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--split", default="train", choices=("train", "heldout"))
    _selection(p)

    p = add("animate", "render an expression/camera trajectory to PNG frames")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--expressions", type=Path, default=None, help="JSON list of psi vectors (default: jaw sweep)")
    p.add_argument("--orbit", type=float, default=0.0, help="total camera azimuth sweep in degrees")
    p.add_argument("--size", type=int, default=None)

    p = add("transfer-hair", "put the hairstyle of one bundle on another")
    p.add_argument("--face", type=Path, required=True, help="bundle providing face and identity shape")
    p.add_argument("--hair", type=Path, required=True, help="bundle providing the hairstyle")

    p = add("edit-texture", "apply a UV texture overlay to a bundle")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--overlay", type=Path, required=True, help="RGB PNG at UV resolution")
    p.add_argument("--mask", type=Path, required=True, help="grayscale PNG at UV resolution")
    p.add_argument("--region", default="head", choices=("head", "scalp"))

    p = add("eval", "PSNR/SSIM table over held-out views, as CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--bundle", type=Path)
    src.add_argument("--gt", action="store_true", help="evaluate the stored ground-truth Gaussians")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--split", default="heldout", choices=("train", "heldout"))

    p = add("track-demo", "run the motion-aware tracking schedule over a landmark sequence")
    p.add_argument("--landmarks", type=Path, default=None, help="landmark CSV (default: synthetic sequence)")
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--gamma", type=float, default=None)

    p = add("export-ply", "write the Gaussians of a bundle under one expression as a splat PLY")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--psi", default=None, help="comma-separated expression coefficients")
    return parser


# ---------------------------------------------------------------------------


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    over = {}
    for k, v in vars(args).items():
        if k.startswith("cfg__") and v is not None:
            _, sec, name = k.split("__", 2)
            over[f"{sec}.{name}"] = v
    if args.seed is not None:
        over["train.seed"] = args.seed
    return cfg.override(**over) if over else cfg


def _need_out(args, what: str) -> Path:
    if args.out is None:
        raise ValueError(f"--out is required ({what})")
    return args.out


def _select(data, split: str, views, expressions, inputs):
    caps = data.train if split == "train" else data.heldout
    meta = data.train_meta if split == "train" else data.heldout_meta
    if caps is None:
        raise ValueError(f"identity {data.name} has no {split} frames")
    idx = [i for i, f in enumerate(meta)
           if (views is None or int(f["view"]) in views) and (expressions is None or int(f["expression"]) in expressions)]
    if inputs is not None:
        idx = idx[:inputs]
    if not idx:
        raise ValueError("frame selection is empty")
    return caps.subset(idx), [meta[i] for i in idx]


def cmd_gen_data(args, cfg: Config) -> None:
    from .synthetic import STYLES, generate_synthetic_dataset

    out = _need_out(args, "dataset directory")
    styles = None
    if args.styles:
        styles = [s.strip() for s in args.styles.split(",") if s.strip()]
        bad = [s for s in styles if s not in STYLES]
        if bad:
            raise ValueError(f"unknown hair style {bad[0]!r}; choose from {sorted(STYLES)}")
    seed = cfg.train.seed if args.seed is None else args.seed
    generate_synthetic_dataset(out, seed=seed, n_identities=args.identities, n_views=args.views,
                               n_expressions=args.expressions, styles=styles, cfg=cfg.model)
    print(f"wrote {args.identities} identities to {out}")


def _load_identities(path: Path):
    from .synthetic import load_dataset, load_identity

    if (path / "dataset.json").exists():
        return load_dataset(path)
    if (path / "manifest.json").exists():
        return [load_identity(path)]
    raise FileNotFoundError(f"{path} holds neither dataset.json nor manifest.json")


def cmd_train(args, cfg: Config) -> None:
    from .model import HairSplatModel
    from .training import Trainer, pretrain_hair_prior

    out = _need_out(args, "checkpoint directory")
    ids = _load_identities(args.data)
    torch.manual_seed(cfg.train.seed)
    model = HairSplatModel(cfg.model)
    trainer = Trainer(model, cfg.train)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    elif cfg.train.prior_iters > 0 and cfg.model.hair_branch:
        hist = pretrain_hair_prior(model, ids, cfg.train, seed=cfg.train.seed)
        log.info("hair prior: loss %.4f -> %.4f", hist[0], hist[-1])
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    t0 = time.perf_counter()
    trainer.fit(ids, iters=args.iters, out_dir=out, log_every=args.log_every)
    last = trainer.history[-1].losses["total"] if trainer.history else float("nan")
    print(f"trained to step {trainer.step} in {time.perf_counter() - t0:.1f}s, last loss {last:.5f}; "
          f"checkpoint {out / 'checkpoint_final.pt'}")


def cmd_reconstruct(args, cfg: Config) -> None:
    from .avatar_io import save_bundle
    from .synthetic import load_identity
    from .training import load_model, reconstruct

    out = _need_out(args, "bundle path")
    model = load_model(args.checkpoint)
    data = load_identity(args.images)
    caps, _ = _select(data, args.split, args.views, args.expressions, args.inputs)
    t0 = time.perf_counter()
    bundle = reconstruct(model, caps, seed=cfg.train.seed, identity=data.name)
    dt = time.perf_counter() - t0
    save_bundle(bundle, out)
    print(f"reconstructed {data.name} from {len(caps)} images in {dt:.2f}s -> {out}")


def cmd_refine(args, cfg: Config) -> None:
    from .avatar_io import load_bundle, save_bundle
    from .synthetic import load_identity
    from .training import fast_refine, load_model

    out = _need_out(args, "bundle path")
    bundle = load_bundle(args.bundle)
    data = load_identity(args.images)
    caps, _ = _select(data, args.split, args.views, args.expressions, args.inputs)
    model = load_model(args.checkpoint) if args.checkpoint else None
    t0 = time.perf_counter()
    refined, rep = fast_refine(bundle, caps, cfg.train, epochs=args.epochs, model=model, seed=cfg.train.seed)
    save_bundle(refined, out)
    print(f"refined {rep.steps} steps in {time.perf_counter() - t0:.1f}s: loss {rep.loss_before:.5f} -> "
          f"{rep.loss_after:.5f} -> {out}")


def _trajectory(args, E: int):
    n = max(1, args.frames)
    if args.expressions is not None:
        psis = json.loads(Path(args.expressions).read_text())
        arr = torch.tensor(psis, dtype=torch.float32)
        if arr.ndim != 2 or arr.shape[1] != E:
            raise ValueError(f"expression file must hold a list of length-{E} vectors")
        return [arr[i % len(arr)] for i in range(n)]
    out = []
    for i in range(n):
        psi = torch.zeros(E)
        psi[0] = float(np.sin(np.pi * i / max(n - 1, 1)))  # jaw open and close; frame 0 is neutral
        out.append(psi)
    return out


def cmd_animate(args, cfg: Config) -> None:
    from .avatar_io import load_bundle
    from .render import render
    from .render.camera import orbit_camera
    from .synthetic import CAMERA_RIG, save_png

    out = _need_out(args, "frame directory")
    bundle = load_bundle(args.bundle)
    size = args.size or bundle.cfg.image_size
    out.mkdir(parents=True, exist_ok=True)
    psis = _trajectory(args, bundle.cfg.E)
    t0 = time.perf_counter()
    for i, psi in enumerate(psis):
        az = args.orbit * i / max(len(psis) - 1, 1)
        cam = orbit_camera(az, 10.0, CAMERA_RIG["radius"], CAMERA_RIG["fov_deg"], size, CAMERA_RIG["target"])
        with torch.no_grad():
            img = render(bundle.gaussians(psi), cam).rgb
        save_png(out / f"frame_{i:04d}.png", img)
    dt = time.perf_counter() - t0
    print(f"rendered {len(psis)} frames in {dt:.2f}s ({len(psis) / dt:.2f} FPS incl. decode and PNG write) -> {out}")


def cmd_transfer_hair(args, cfg: Config) -> None:
    from .avatar_io import load_bundle, save_bundle, transfer_hair

    out = _need_out(args, "bundle path")
    merged = transfer_hair(load_bundle(args.face), load_bundle(args.hair))
    save_bundle(merged, out)
    print(f"transferred hair -> {out}")


def cmd_edit_texture(args, cfg: Config) -> None:
    from .avatar_io import edit_texture, load_bundle, save_bundle
    from .synthetic import load_png

    out = _need_out(args, "bundle path")
    bundle = load_bundle(args.bundle)
    overlay = load_png(args.overlay)
    mask = load_png(args.mask)
    if mask.ndim == 3:
        mask = mask.mean(-1)
    edited = edit_texture(bundle, overlay[..., :3], mask, args.region)
    save_bundle(edited, out)
    print(f"applied {args.region} edit -> {out}")


def cmd_eval(args, cfg: Config) -> None:
    from .avatar_io import load_bundle
    from .objectives import psnr, ssim
    from .render import render
    from .synthetic import load_identity, to_png
    from .training import evaluate_bundle

    out = _need_out(args, "CSV path")
    data = load_identity(args.images)
    caps, meta = _select(data, args.split, None, None, None)
    if args.gt:
        if not data.gt_gaussians:
            raise ValueError(f"{args.images} has no stored ground-truth Gaussians")
        rows = []
        for i, cam in enumerate(caps.cameras):
            with torch.no_grad():
                pred = render(data.gt_gaussians[int(meta[i]["expression"])], cam, data.bg).rgb
            # through the same 8-bit codec as the stored frames
            pred = torch.from_numpy(to_png(pred).astype(np.float32) / 255.0)
            rows.append((i, meta[i]["view"], meta[i]["expression"], psnr(pred, caps.images[i]),
                         float(ssim(pred, caps.images[i]))))
    else:
        rows = [(r.index, r.view, r.expression, r.psnr, r.ssim)
                for r in evaluate_bundle(load_bundle(args.bundle), caps, meta, data.bg)]
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "view", "expression", "psnr", "ssim"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], f"{r[3]:.4f}", f"{r[4]:.6f}"])
    m_psnr = float(np.mean([r[3] for r in rows]))
    m_ssim = float(np.mean([r[4] for r in rows]))
    print(f"{len(rows)} views: mean PSNR {m_psnr:.3f} dB, mean SSIM {m_ssim:.4f} -> {out}")


def cmd_track_demo(args, cfg: Config) -> None:
    from .tracking import (DEMO_LAYOUT, GAMMA, read_landmarks, synthetic_landmark_sequence, track_demo,
                           write_demo_csv, write_landmarks)

    out = _need_out(args, "output directory")
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.train.seed
    if args.landmarks:
        layout, ids, frames = read_landmarks(args.landmarks)
    else:
        layout, frames = DEMO_LAYOUT, synthetic_landmark_sequence(args.frames, seed)
        ids = list(range(len(frames)))
        write_landmarks(out / "landmarks.csv", frames, layout, ids)
    gamma = GAMMA if args.gamma is None else args.gamma
    rows = track_demo(frames, layout, gamma=gamma, seed=seed, frame_ids=ids)
    write_demo_csv(out / "schedule.csv", rows)
    n = [r.n_t for r in rows]
    print(f"{len(rows)} frames: N_t min {min(n)} max {max(n)} total {sum(n)} -> {out / 'schedule.csv'}")


def cmd_export_ply(args, cfg: Config) -> None:
    from .avatar_io import export_splat_ply, load_bundle, semantic_counts

    out = _need_out(args, "PLY path")
    bundle = load_bundle(args.bundle)
    psi = None
    if args.psi:
        psi = torch.tensor([float(x) for x in args.psi.split(",")])
        if psi.shape[0] != bundle.cfg.E:
            raise ValueError(f"--psi needs {bundle.cfg.E} values, got {psi.shape[0]}")
    g = bundle.gaussians(psi)
    export_splat_ply(g, out)
    c = semantic_counts(g)
    print(f"wrote {len(g)} Gaussians ({c['face']} face, {c['hair']} hair) -> {out}")


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "reconstruct": cmd_reconstruct, "refine": cmd_refine,
    "animate": cmd_animate, "transfer-hair": cmd_transfer_hair, "edit-texture": cmd_edit_texture,
    "eval": cmd_eval, "track-demo": cmd_track_demo, "export-ply": cmd_export_ply,
}


def _set_threads() -> None:
    n = os.environ.get("HAIRSPLAT_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        _set_threads()
        cfg = _load_config(args)
        HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"error: ConfigError: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line report for every failure
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
