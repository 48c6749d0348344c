"""Model and training configuration.

Toy defaults run on a laptop CPU; ``paper_scale()`` records the full-size
values next to them. Configs are stored as flat JSON objects with the two
sections ``model`` and ``train``.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Tuple


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    patch_size: int = 16
    C: int = 128
    C_hair: int = 32
    pe_bands: int = 6
    head_uv: int = 64
    scalp_uv: int = 32
    E: int = 8
    template_seed: int = 0
    # backbone
    n_blocks: int = 2
    n_self_heads: int = 4
    n_cross_heads: int = 4
    ffn_mult: int = 4
    # face decoder
    face_trunk: int = 64
    offset_bound: float = 1.0
    sigma_floor: float = 1e-4
    sigma_cap: float = 1.0
    planar_ratio: float = 0.2
    sigma_init: float = 0.35
    # hair decoder
    S: int = 64
    S0: int = 24
    r0: float = 0.02
    t_short: float = 0.15
    t_long: float = 0.22
    k: float = 180.0
    eta: float = 1.0
    S_min: int = 8
    short_density_scale: float = 1.235
    length_norm: float = 5.0
    gamma_coeff: float = 0.1
    drop_eps: float = 1e-6
    gen_hidden: int = 64
    gen_omega: float = 6.0
    dir_scale: float = 0.05
    hair_branch: bool = True

    def validate(self) -> None:
        if self.image_size % self.patch_size or self.patch_size % 4:
            raise ConfigError("image_size must be divisible by patch_size, and patch_size by 4")
        if self.C % self.n_self_heads or self.C % self.n_cross_heads:
            raise ConfigError("C must be divisible by both head counts")
        if self.S0 < 2 or self.S < 2:
            raise ConfigError("S and S0 must be >= 2")
        if not (0 < self.t_short < self.t_long):
            raise ConfigError("need 0 < t_short < t_long")
        if self.head_uv < 8 or self.scalp_uv < 8:
            raise ConfigError("UV grids must be at least 8x8")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    warmup_iters: int = 600
    iters: int = 2000
    betas: Tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    min_inputs: int = 1
    max_inputs: int = 6
    n_supervision: int = 4
    aug_prob: float = 0.6
    brightness: float = 0.2
    contrast: float = 0.15
    saturation: float = 0.15
    refine_epochs: int = 100
    refine_lr: float = 1e-4
    refine_decay: float = 0.1
    region_loss: bool = True
    prior_iters: int = 300
    prior_lr: float = 3e-3
    checkpoint_every: int = 500
    bg: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0 or self.refine_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not (1 <= self.min_inputs <= self.max_inputs):
            raise ConfigError("need 1 <= min_inputs <= max_inputs")
        if not (0.0 <= self.aug_prob <= 1.0):
            raise ConfigError("aug_prob must lie in [0, 1]")


def paper_scale() -> ModelConfig:
    """Full-size settings for reference; not trainable on a CPU."""
    return ModelConfig(image_size=512, patch_size=16, C=1024, head_uv=224, scalp_uv=112,
                       n_blocks=4, n_self_heads=8, n_cross_heads=16, S=256, S0=24)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {"model": asdict(self.model), "train": asdict(self.train)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "Config":
        unknown = set(d) - {"model", "train"}
        if unknown:
            raise ConfigError(f"unknown config section: {sorted(unknown)[0]}")
        return cls().override(**{f"{sec}.{k}": v for sec in ("model", "train") for k, v in d.get(sec, {}).items()})

    @classmethod
    def load(cls, path) -> "Config":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def override(self, **dotted) -> "Config":
        """Apply ``section.key=value`` overrides; keys may omit the section if unambiguous."""
        model, train = self.model, self.train
        mkeys = {f.name: f for f in fields(ModelConfig)}
        tkeys = {f.name: f for f in fields(TrainConfig)}
        upd_m, upd_t = {}, {}
        for key, val in dotted.items():
            sec, _, name = key.rpartition(".")
            if sec == "model" or (not sec and name in mkeys and name not in tkeys):
                if name not in mkeys:
                    raise ConfigError(f"unknown config key: {key}")
                upd_m[name] = _coerce(val, getattr(model, name), key)
            elif sec == "train" or (not sec and name in tkeys):
                if name not in tkeys:
                    raise ConfigError(f"unknown config key: {key}")
                upd_t[name] = _coerce(val, getattr(train, name), key)
            else:
                raise ConfigError(f"unknown config key: {key}")
        cfg = Config(replace(model, **upd_m), replace(train, **upd_t))
        cfg.model.validate()
        cfg.train.validate()
        return cfg

    def model_hash(self) -> str:
        return config_hash(self.model)


def config_hash(model: ModelConfig) -> str:
    text = json.dumps(asdict(model), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(val, default, key):
    if isinstance(default, bool):
        if isinstance(val, str):
            if val.lower() in ("1", "true", "yes", "on"):
                return True
            if val.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"bad boolean for {key}: {val!r}")
        return bool(val)
    if isinstance(default, tuple):
        if isinstance(val, str):
            val = [float(x) for x in val.split(",")]
        return tuple(type(d)(v) for d, v in zip(default, val))
    try:
        return type(default)(val)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {val!r}") from exc
