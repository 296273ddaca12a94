"""Run configuration: JSON tree with documented defaults, strict key
validation, dot-path overrides, and a content hash stamped into outputs."""

from __future__ import annotations

import copy
import hashlib
import json

from . import data as datamod
from .losses import KD_MODES, CmpmConfig, LossWeights
from .mhaf import FUSION_STRATEGIES
from .training import TrainConfig

DEFAULTS: dict = {
    "data": {
        "n_identities": 64,
        "views_per_identity": 4,
        "latent_dim": 16,
        "input_dim": 32,
        "view_offset_std": 0.5,
        "noise_std": 0.5,
        "seed": 0,
    },
    "encoder": {
        "d1": 32,
        "d": 64,
    },
    "mhaf": {
        "H": 16,
        "shared": True,
        "fusion": "mhaf",  # mhaf | mean | cross-attention
        "attn_scale": "d",  # "d" as printed, "dc" for per-head scaling
    },
    "losses": {
        "epsilon": 1e-8,
        "normalize_both": False,
        "lambda1": 1.0,
        "lambda2": 0.9,
        "lambda3": 1.0,
        "alpha": 0.2,
        "use_cr": False,
    },
    "training": {
        "epochs_teacher": 30,
        "epochs_student": 30,
        "P": 16,
        "K": 4,
        "K_t": 1,
        "K_v": 1,
        "support_mode": "exclude_self",  # exclude_self | duplicate_self
        "resample_support": True,
        "base_lr": 1e-3,
        # equal to base_lr by default: with both encoders trained from
        # scratch there is no pretrained backbone to protect, and a 10x
        # smaller visual lr leaves that encoder undertrained at this scale
        "student_visual_lr": 1e-3,
        "warmup_epochs": 1,
        # PK batches drawn per epoch (0 = one pass over the pairs)
        "steps_per_epoch": 16,
        # half-scale analogue of the 60-epoch reference schedules
        "decay_epochs_teacher": [15, 20, 25],
        "decay_epochs_student": [15, 23],
        "decay_factor": 0.1,
        "kd_mode": "tir",  # baseline | t | i | r | tr | ir | ti | tir
        "seed": 0,
    },
    "eval": {
        "feature_stage": "high",  # high | low | concat
        # view-offset/noise seed for the held-out evaluation set when no
        # feature file is supplied: same identities, fresh views
        "view_seed": 1000,
    },
}


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches, or invalid values."""


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here} must be a table")
            out[key] = _merge(defaults[key], val, here)
        else:
            out[key] = val
    return out


def _coerce(default, raw: str):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        return json.loads(raw)
    return raw


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    """Set ``a.b.c=value``, coercing the value to the default's type."""
    keys = dotted.split(".")
    node = cfg
    ref = DEFAULTS
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[k]
        ref = ref[k]
    leaf = keys[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key: {dotted}")
    node[leaf] = _coerce(ref[leaf], raw)


def load_config(path=None, overrides: list[str] | None = None) -> dict:
    """Defaults, optionally overlaid with a JSON file and KEY=VALUE pairs."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON in {path}: {exc}")
        cfg = _merge(DEFAULTS, user)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        key, _, val = item.partition("=")
        apply_override(cfg, key, val)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    d = cfg["encoder"]["d"]
    H = cfg["mhaf"]["H"]
    if cfg["mhaf"]["fusion"] not in FUSION_STRATEGIES:
        raise ConfigError(f"unknown fusion strategy {cfg['mhaf']['fusion']!r}")
    if cfg["mhaf"]["fusion"] != "mean" and d % H != 0:
        raise ConfigError(f"mhaf.H={H} must divide encoder.d={d}")
    if cfg["mhaf"]["attn_scale"] not in ("d", "dc"):
        raise ConfigError("mhaf.attn_scale must be 'd' or 'dc'")
    if cfg["training"]["kd_mode"] not in KD_MODES:
        raise ConfigError(f"unknown kd_mode {cfg['training']['kd_mode']!r}")
    if cfg["training"]["support_mode"] not in (datamod.EXCLUDE_SELF,
                                               datamod.DUPLICATE_SELF):
        raise ConfigError("training.support_mode must be exclude_self "
                          "or duplicate_self")
    if cfg["eval"]["feature_stage"] not in ("high", "low", "concat"):
        raise ConfigError("eval.feature_stage must be high, low, or concat")
    for key in ("n_identities", "views_per_identity", "latent_dim", "input_dim"):
        if cfg["data"][key] < 1:
            raise ConfigError(f"data.{key} must be >= 1")
    for key in ("epochs_teacher", "epochs_student", "P", "K"):
        if cfg["training"][key] < 1:
            raise ConfigError(f"training.{key} must be >= 1")
    if cfg["training"]["K_t"] < 0 or cfg["training"]["K_v"] < 0:
        raise ConfigError("support set sizes must be >= 0")
    if cfg["training"]["steps_per_epoch"] < 0:
        raise ConfigError("training.steps_per_epoch must be >= 0")
    if cfg["losses"]["epsilon"] <= 0:
        raise ConfigError("losses.epsilon must be positive")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def synthetic_config(cfg: dict) -> datamod.SyntheticConfig:
    return datamod.SyntheticConfig(**cfg["data"])


def train_config(cfg: dict, stage: str) -> TrainConfig:
    """Assemble the stage-specific training config from the full tree."""
    t = cfg["training"]
    if stage == "teacher":
        epochs, decay = t["epochs_teacher"], t["decay_epochs_teacher"]
    elif stage == "student":
        epochs, decay = t["epochs_student"], t["decay_epochs_student"]
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return TrainConfig(
        epochs=epochs,
        P=t["P"], K=t["K"], K_t=t["K_t"], K_v=t["K_v"],
        support_mode=t["support_mode"],
        resample_support=t["resample_support"],
        d1=cfg["encoder"]["d1"], d=cfg["encoder"]["d"],
        H=cfg["mhaf"]["H"], mhaf_shared=cfg["mhaf"]["shared"],
        fusion=cfg["mhaf"]["fusion"], attn_scale=cfg["mhaf"]["attn_scale"],
        weights=LossWeights(lambda1=cfg["losses"]["lambda1"],
                            lambda2=cfg["losses"]["lambda2"],
                            lambda3=cfg["losses"]["lambda3"],
                            alpha=cfg["losses"]["alpha"]),
        cmpm=CmpmConfig(epsilon=cfg["losses"]["epsilon"],
                        normalize_both=cfg["losses"]["normalize_both"]),
        use_cr=cfg["losses"]["use_cr"],
        kd_mode=t["kd_mode"],
        base_lr=t["base_lr"], student_visual_lr=t["student_visual_lr"],
        warmup_epochs=t["warmup_epochs"],
        decay_epochs=tuple(decay), decay_factor=t["decay_factor"],
        seed=t["seed"],
        steps_per_epoch=t["steps_per_epoch"],
        config_hash=config_hash(cfg),
    )
