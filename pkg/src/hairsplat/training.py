"""Training loop, batch sampling, hair prior pretraining, single-pass reconstruction and fast refinement."""

from collections import Counter
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .avatar_io import AvatarBundle, decoder_weights
from .config import Config, TrainConfig
from .gaussians import HAIR
from .layers import checksum
from .model import FROZEN_IN_REFINE, HairSplatModel, decode_avatar
from .objectives import LossWeights, loss_total, psnr, ssim
from .render import render, render_subset
from .synthetic import IdentityData
from .tokenizers import CaptureSet, TokenSet, select_frontal

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedules and augmentation


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up followed by cosine decay to zero at ``cfg.iters``."""
    if step < cfg.warmup_iters:
        return cfg.lr * (step + 1) / cfg.warmup_iters
    span = max(1, cfg.iters - cfg.warmup_iters)
    t = min(1.0, (step - cfg.warmup_iters) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))


def refine_lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    """Linear decay from refine_lr to refine_decay * refine_lr."""
    t = step / max(1, total - 1)
    return cfg.refine_lr * (1.0 - (1.0 - cfg.refine_decay) * t)


def augment(images: Tensor, rng: np.random.Generator, cfg: TrainConfig) -> Tensor:
    """Per-image color jitter (brightness, contrast, saturation), each image triggered with aug_prob."""
    out = []
    for img in images:
        if rng.random() >= cfg.aug_prob:
            out.append(img)
            continue
        b = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        c = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        s = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
        x = img * b
        x = (x - x.mean()) * c + x.mean()
        gray = x.mean(dim=-1, keepdim=True)
        x = gray + (x - gray) * s
        out.append(x.clamp(0.0, 1.0))
    return torch.stack(out)


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    inputs: CaptureSet
    targets: CaptureSet
    psi: Tensor
    identity: str


def _has_supervision(data: IdentityData, cfg: TrainConfig) -> bool:
    counts = Counter(int(f["expression"]) for f in data.train_meta)
    return any(n >= cfg.n_supervision for n in counts.values())


def sample_training_batch(data: IdentityData, rng: np.random.Generator, cfg: TrainConfig) -> Optional[Batch]:
    """Random 1..6 inputs (mixed views and expressions) and n_supervision views of one target expression."""
    frames = data.train_meta
    by_expr: Dict[int, List[int]] = {}
    for i, f in enumerate(frames):
        by_expr.setdefault(int(f["expression"]), []).append(i)
    eligible = [e for e, idx in by_expr.items() if len(idx) >= cfg.n_supervision]
    if not eligible:
        log.warning("identity %s has fewer than %d views per expression, skipped", data.name, cfg.n_supervision)
        return None
    hi = min(cfg.max_inputs, len(frames))
    n_in = int(rng.integers(cfg.min_inputs, hi + 1))
    inp = sorted(rng.choice(len(frames), size=n_in, replace=False).tolist())
    e = int(eligible[rng.integers(len(eligible))])
    tgt = sorted(rng.choice(by_expr[e], size=cfg.n_supervision, replace=False).tolist())
    inputs = data.train.subset(inp)
    if cfg.aug_prob > 0:
        inputs = CaptureSet(augment(inputs.images, rng, cfg), inputs.cameras, inputs.psi,
                            inputs.hair_masks, inputs.seg_masks, inputs.shape_offsets)
    targets = data.train.subset(tgt)
    return Batch(inputs, targets, targets.psi[0], data.name)


# ---------------------------------------------------------------------------
# Losses


@dataclass
class ViewLosses:
    total: Tensor
    parts: Dict[str, float]


def render_losses(gaussians, face_offsets_world, targets: CaptureSet, weights: LossWeights, region_loss: bool,
                  bg=(0.0, 0.0, 0.0)) -> ViewLosses:
    """Average loss_total over the target views of one posed Gaussian set."""
    totals = []
    parts = {"total": 0.0, "hair": 0.0, "photo": 0.0, "reg": 0.0}
    n = len(targets)
    for i, cam in enumerate(targets.cameras):
        out = render(gaussians, cam, bg, semantic=region_loss)
        kw = {}
        if region_loss and targets.hair_masks is not None:
            hair_only = render_subset(gaussians, [HAIR], cam, bg).rgb
            kw = dict(pred_hair=hair_only, gt_hair=targets.images[i] * targets.hair_masks[i][..., None],
                      pred_seg=out.semantic, gt_seg=targets.seg_masks[i])
        br = loss_total(out.rgb, targets.images[i], face_offsets_world, gaussians.scales, weights, **kw)
        totals.append(br.total)
        for k, v in br.as_floats().items():
            parts[k] += v / n
    return ViewLosses(torch.stack(totals).mean(), parts)


# ---------------------------------------------------------------------------
# Trainer


@dataclass
class StepRecord:
    step: int
    lr: float
    grad_norm: float
    losses: Dict[str, float]
    seconds: float


class Trainer:
    def __init__(self, model: HairSplatModel, cfg: TrainConfig, weights: Optional[LossWeights] = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.weights = weights or LossWeights.for_template(model.template.mean_edge_length())
        self.opt = torch.optim.Adam(model.parameters(), lr=lr_at(0, cfg), betas=cfg.betas)
        self.step = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.history: List[StepRecord] = []

    def train_step(self, batch: Batch) -> StepRecord:
        t0 = time.perf_counter()
        cfg = self.cfg
        lr = lr_at(self.step, cfg)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        tokens, _ = self.model.encode(batch.inputs)
        dec = self.model.decode(tokens, batch.psi, batch.inputs.shape_offsets, seed=0)
        vl = render_losses(dec.gaussians, dec.face_offsets_world, batch.targets, self.weights, cfg.region_loss, cfg.bg)
        if not torch.isfinite(vl.total):
            raise TrainingError(f"non-finite loss at step {self.step}: {vl.parts}")
        vl.total.backward()
        params = [p for p in self.model.parameters() if p.grad is not None]
        gn = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip))
        if not math.isfinite(gn):
            raise TrainingError(f"non-finite gradient norm at step {self.step}")
        self.opt.step()
        rec = StepRecord(self.step, lr, gn, vl.parts, time.perf_counter() - t0)
        self.history.append(rec)
        self.step += 1
        return rec

    def fit(self, identities: Sequence[IdentityData], iters: Optional[int] = None, out_dir=None,
            log_every: int = 50, callback=None) -> List[StepRecord]:
        iters = self.cfg.iters if iters is None else iters
        out = Path(out_dir) if out_dir else None
        writer = None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            fh = open(out / "train_log.csv", "a" if self.step else "w", newline="")
            writer = csv.writer(fh)
            if not self.step:
                writer.writerow(["step", "lr", "grad_norm", "total", "photo", "hair", "reg", "seconds"])
        usable = [d for d in identities if _has_supervision(d, self.cfg)]
        for d in identities:
            if not _has_supervision(d, self.cfg):
                log.warning("identity %s has fewer than %d views per expression, skipped", d.name,
                            self.cfg.n_supervision)
        if not usable and self.step < iters:
            raise TrainingError(f"no identity has {self.cfg.n_supervision} views of any one expression")
        try:
            while self.step < iters:
                data = usable[int(self.rng.integers(len(usable)))]
                batch = sample_training_batch(data, self.rng, self.cfg)
                if batch is None:
                    continue
                rec = self.train_step(batch)
                if writer:
                    L = rec.losses
                    writer.writerow([rec.step, f"{rec.lr:.6g}", f"{rec.grad_norm:.6g}", f"{L['total']:.6g}",
                                     f"{L['photo']:.6g}", f"{L['hair']:.6g}", f"{L['reg']:.6g}", f"{rec.seconds:.3f}"])
                if log_every and rec.step % log_every == 0:
                    log.info("step %d lr %.2e loss %.4f grad %.3f (%.2fs)", rec.step, rec.lr, rec.losses["total"],
                             rec.grad_norm, rec.seconds)
                if out and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save_checkpoint(out / f"checkpoint_{self.step:06d}.pt")
                if callback:
                    callback(self, rec)
        finally:
            if writer:
                fh.close()
        if out:
            self.save_checkpoint(out / "checkpoint_final.pt")
        return self.history

    def save_checkpoint(self, path, extra: Optional[dict] = None) -> None:
        torch.save({"model": self.model.state_dict(), "optimizer": self.opt.state_dict(), "step": self.step,
                    "config": Config(self.model.cfg, self.cfg).to_dict(), **(extra or {})}, path)

    def load_checkpoint(self, path) -> None:
        ck = torch.load(path, weights_only=False)
        self.model.load_state_dict(ck["model"])
        self.opt.load_state_dict(ck["optimizer"])
        self.step = int(ck["step"])


def load_model(path) -> HairSplatModel:
    """Model from a checkpoint file, configured from the checkpoint's stored config."""
    ck = torch.load(path, weights_only=False)
    cfg = Config.from_dict(ck["config"])
    model = HairSplatModel(cfg.model)
    model.load_state_dict(ck["model"])
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Hair prior


def pretrain_hair_prior(model: HairSplatModel, identities: Sequence[IdentityData], cfg: TrainConfig,
                        iters: Optional[int] = None, seed: int = 0) -> List[float]:
    """Fit the monocular hair prior (frontal-image encoder + strand generator) to ground-truth strands.

    Stands in for a prior pretrained on synthetic hair: directions and the
    density channel are regressed directly; no rendering is involved.
    """
    iters = cfg.prior_iters if iters is None else iters
    rng = np.random.default_rng(seed)
    params = list(model.hair_encoder.parameters()) + list(model.hair_decoder.generator.parameters())
    opt = torch.optim.Adam(params, lr=cfg.prior_lr)
    sb = model.scalp_binding
    valid = sb.valid
    items = []
    for data in identities:
        if data.gt is None:
            raise TrainingError(f"identity {data.name} has no ground-truth strands for prior training")
        items.append(data)
    history = []
    for it in range(iters):
        data = items[int(rng.integers(len(items)))]
        idx = select_frontal(data.train.cameras)
        same_view = [i for i, f in enumerate(data.train_meta) if f["view"] == data.train_meta[idx]["view"]]
        i = same_view[int(rng.integers(len(same_view)))]
        img = augment(data.train.images[i:i + 1], rng, cfg)[0]
        lr = cfg.prior_lr * 0.5 * (1 + math.cos(math.pi * it / max(1, iters)))
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        base = model.hair_encoder(img)
        dirs = model.hair_decoder.generator(base[valid], model.cfg.S)
        gt = data.gt.hair_dirs
        scale = float(gt.norm(dim=-1).mean())
        loss_dir = ((dirs - gt) ** 2).mean() / scale**2
        loss_den = ((base[..., -1] - data.gt.density) ** 2)[valid].mean()
        loss = loss_dir + loss_den
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        history.append(loss.item())
    return history


# ---------------------------------------------------------------------------
# Reconstruction and refinement


def reconstruct(model: HairSplatModel, captures: CaptureSet, seed: int = 0, identity: str = "") -> AvatarBundle:
    """Single forward pass: cache fused tokens and decoder weights, no optimization."""
    model.eval()
    with torch.no_grad():
        tokens, frontal = model.encode(captures)
    shape = captures.shape_offsets if captures.shape_offsets is not None else torch.zeros_like(model.template.vertices)
    return AvatarBundle(
        cfg=model.cfg, template=model.template, shape_offsets=shape.clone(),
        head_tokens=tokens.head_tokens.clone(), hair_tokens=tokens.hair_tokens.clone(),
        hair_base=tokens.hair_base.clone(), weights=decoder_weights(model.face_decoder, model.hair_decoder),
        frontal=int(frontal), seed=seed, meta={"identity": identity, "stage": "reconstruct", "n_inputs": len(captures)},
    )


@dataclass
class RefineReport:
    loss_before: float
    loss_after: float
    steps: int
    frozen_checksum: Optional[str] = None
    losses: List[float] = field(default_factory=list)


class _Parts:
    """Trainable view of a bundle: tokens as parameters, decoders copied."""

    def __init__(self, bundle: AvatarBundle):
        from .face_decoder import FaceDecoder
        from .hair_decoder import HairDecoder

        self.cfg = bundle.cfg
        self.template = bundle.template
        self.head_binding = bundle.head_binding
        self.scalp_binding = bundle.scalp_binding
        self.face_decoder = FaceDecoder(bundle.cfg)
        self.hair_decoder = HairDecoder(bundle.cfg)
        sd = bundle.weights
        self.face_decoder.load_state_dict({k[13:]: v for k, v in sd.items() if k.startswith("face_decoder.")})
        self.hair_decoder.load_state_dict({k[13:]: v for k, v in sd.items() if k.startswith("hair_decoder.")})
        self.head_tokens = torch.nn.Parameter(bundle.head_tokens.clone())
        self.hair_tokens = torch.nn.Parameter(bundle.hair_tokens.clone())

    def parameters(self):
        return [self.head_tokens, self.hair_tokens, *self.face_decoder.parameters(), *self.hair_decoder.parameters()]


def _capture_loss(parts, bundle: AvatarBundle, captures: CaptureSet, idx: Sequence[int], weights: LossWeights,
                  tcfg: TrainConfig) -> Tensor:
    tokens = TokenSet(torch.zeros(0, 0, bundle.cfg.C), parts.head_tokens, parts.hair_tokens, bundle.hair_base)
    groups: Dict[tuple, List[int]] = {}
    for i in idx:
        groups.setdefault(tuple(captures.psi[i].tolist()), []).append(i)
    total = 0.0
    for key, members in groups.items():
        dec = decode_avatar(parts, tokens, torch.tensor(key), bundle.shape_offsets, bundle.seed,
                            bundle.face_edits, bundle.hair_edits, bundle.hair_rest)
        vl = render_losses(dec.gaussians, dec.face_offsets_world, captures.subset(members), weights,
                           tcfg.region_loss and captures.hair_masks is not None, tcfg.bg)
        total = total + vl.total * len(members)
    return total / len(idx)


def fast_refine(bundle: AvatarBundle, captures: CaptureSet, cfg: TrainConfig, epochs: Optional[int] = None,
                model: Optional[HairSplatModel] = None, weights: Optional[LossWeights] = None,
                seed: int = 0) -> "tuple[AvatarBundle, RefineReport]":
    """Optimize cached tokens and both decoders on the input captures; encoders stay frozen.

    Inputs are processed in random chunks of at most ``max_inputs`` images per
    step. When ``model`` is given its frozen parts are checksummed before and
    after and a mismatch raises.
    """
    epochs = cfg.refine_epochs if epochs is None else epochs
    weights = weights or LossWeights.for_template(bundle.template.mean_edge_length())
    frozen = None
    if model is not None:
        frozen = "".join(checksum(m) for m in model.submodules(FROZEN_IN_REFINE))
    parts = _Parts(bundle)
    params = parts.parameters()
    opt = torch.optim.Adam(params, lr=cfg.refine_lr, betas=cfg.betas)
    rng = np.random.default_rng(seed)
    N = len(captures)
    chunk = max(1, cfg.max_inputs)
    n_chunks = math.ceil(N / chunk)
    total_steps = epochs * n_chunks

    with torch.no_grad():
        before = float(_capture_loss(parts, bundle, captures, range(N), weights, cfg))
    losses = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(N)
        for c in range(n_chunks):
            idx = order[c * chunk:(c + 1) * chunk].tolist()
            for g in opt.param_groups:
                g["lr"] = refine_lr_at(step, total_steps, cfg)
            opt.zero_grad(set_to_none=True)
            loss = _capture_loss(parts, bundle, captures, idx, weights, cfg)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
            step += 1
    with torch.no_grad():
        after = float(_capture_loss(parts, bundle, captures, range(N), weights, cfg))
    if model is not None:
        now = "".join(checksum(m) for m in model.submodules(FROZEN_IN_REFINE))
        if now != frozen:
            raise TrainingError("frozen encoder/backbone weights changed during refinement")
    refined = AvatarBundle(
        cfg=bundle.cfg, template=bundle.template, shape_offsets=bundle.shape_offsets,
        head_tokens=parts.head_tokens.detach().clone(), hair_tokens=parts.hair_tokens.detach().clone(),
        hair_base=bundle.hair_base, weights=decoder_weights(parts.face_decoder, parts.hair_decoder),
        frontal=bundle.frontal, seed=bundle.seed, hair_rest=bundle.hair_rest,
        face_edits=bundle.face_edits, hair_edits=bundle.hair_edits,
        meta={**bundle.meta, "stage": "refine", "refine_epochs": epochs},
    )
    return refined, RefineReport(before, after, step, frozen, losses)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalRow:
    index: int
    view: int
    expression: int
    psnr: float
    ssim: float


def render_bundle(bundle: AvatarBundle, psi, camera, bg=(0.0, 0.0, 0.0)) -> Tensor:
    with torch.no_grad():
        return render(bundle.gaussians(psi), camera, bg).rgb


def evaluate_bundle(bundle: AvatarBundle, captures: CaptureSet, meta: Optional[List[dict]] = None,
                    bg=(0.0, 0.0, 0.0)) -> List[EvalRow]:
    rows = []
    cache = {}
    for i, cam in enumerate(captures.cameras):
        key = tuple(captures.psi[i].tolist())
        if key not in cache:
            cache[key] = bundle.gaussians(captures.psi[i])
        with torch.no_grad():
            pred = render(cache[key], cam, bg).rgb.clamp(0, 1)
        gt = captures.images[i]
        m = meta[i] if meta else {"view": i, "expression": 0}
        rows.append(EvalRow(i, int(m["view"]), int(m["expression"]), psnr(pred, gt), float(ssim(pred, gt))))
    return rows


def mean_psnr(rows: Sequence[EvalRow]) -> float:
    return float(np.mean([r.psnr for r in rows]))
