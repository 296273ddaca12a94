"""Staged optimization: teacher (encoders + fusion) first, then a frozen
teacher supervising a fresh student through matching and distillation.

Both loops share the PK sampler, Adam with linear warmup and step decay,
and plain-text-manifest checkpoints.  Every run is fully determined by
(seed, config, dataset).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .encoders import EncoderParams, StageFeatures, encode, init_encoder
from .losses import (CmpmConfig, LossWeights, StudentFeatures, TeacherFeatures,
                     cr_loss, student_loss, teacher_loss)
from .mhaf import FUSION_MHAF, MhafParams, fuse_batch, init_mhaf
from .tensor import Tensor, backward

_CKPT_MAGIC = "LCR2S-CKPT v1"


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file fails structural validation."""


class NonFiniteLossError(FloatingPointError):
    """Raised when training produces a non-finite loss."""


class ConfigMismatchError(ValueError):
    """Raised when a checkpoint does not fit the requested configuration."""


@dataclass
class TrainConfig:
    epochs: int = 30
    P: int = 16
    K: int = 4
    K_t: int = 1
    K_v: int = 1
    support_mode: str = datamod.EXCLUDE_SELF
    resample_support: bool = True
    d1: int = 32
    d: int = 64
    H: int = 16
    mhaf_shared: bool = True
    fusion: str = FUSION_MHAF
    attn_scale: str = "d"  # "d" per the printed attention, "dc" conventional
    weights: LossWeights = field(default_factory=LossWeights)
    cmpm: CmpmConfig = field(default_factory=CmpmConfig)
    use_cr: bool = False
    kd_mode: str = "tir"
    base_lr: float = 1e-3
    student_visual_lr: float = 1e-3
    warmup_epochs: int = 1
    decay_epochs: tuple[int, ...] = (15, 20, 25)
    decay_factor: float = 0.1
    seed: int = 0
    # 0 = one pass over the pairs per epoch (n_pairs // batch_size)
    steps_per_epoch: int = 0
    config_hash: str = ""

    @property
    def batch_size(self) -> int:
        return self.P * self.K


@dataclass
class LrSchedule:
    base_lr: float
    warmup_steps: int
    decay_epochs: tuple[int, ...]
    decay_factor: float

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay_epochs must be strictly increasing")


def lr_at(schedule: LrSchedule, epoch: int, step_in_epoch: int,
          steps_per_epoch: int) -> float:
    """Linear warmup over the first warmup_steps global steps, then stepwise
    decay by decay_factor at each passed decay epoch."""
    gstep = epoch * steps_per_epoch + step_in_epoch
    if gstep < schedule.warmup_steps:
        return schedule.base_lr * (gstep + 1) / schedule.warmup_steps
    passed = sum(1 for e in schedule.decay_epochs if epoch >= e)
    return schedule.base_lr * schedule.decay_factor ** passed


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter dict."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != param shape {p.data.shape} "
                f"for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[...] = state.beta1 * m + (1.0 - state.beta1) * g
        v[...] = state.beta2 * v + (1.0 - state.beta2) * g ** 2
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    arrays: dict[str, np.ndarray]  # insertion order is file order


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    lines = [_CKPT_MAGIC, f"stage {ckpt.stage}", f"config {ckpt.config_hash}"]
    for name, arr in ckpt.arrays.items():
        dims = "x".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"param {name} {dims}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in ckpt.arrays.values():
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointFormatError("no manifest terminator found")
    manifest = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(marker):]
    if not manifest or manifest[0] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic: {manifest[:1]}")
    if len(manifest) < 3 or not manifest[1].startswith("stage ") \
            or not manifest[2].startswith("config "):
        raise CheckpointFormatError("manifest missing stage/config header")
    stage = manifest[1][len("stage "):]
    config_hash = manifest[2][len("config "):]

    entries: list[tuple[str, tuple[int, ...]]] = []
    for line in manifest[3:]:
        parts = line.split(" ")
        if len(parts) != 3 or parts[0] != "param":
            raise CheckpointFormatError(f"bad manifest line: {line!r}")
        shape = () if parts[2] == "scalar" else tuple(int(n) for n in parts[2].split("x"))
        entries.append((parts[1], shape))

    expected = sum(int(np.prod(shape, dtype=np.int64)) * 8 for _, shape in entries)
    if len(payload) != expected:
        raise CheckpointFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(payload)}")
    arrays: dict[str, np.ndarray] = {}
    off = 0
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += count * 8
    return Checkpoint(stage=stage, config_hash=config_hash, arrays=arrays)


# -- parameter plumbing ------------------------------------------------------


def _encoder_tensors(prefix: str, enc: EncoderParams) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": t for k, t in enc.tensors().items()}


def _mhaf_tensors(prefix: str, mh: MhafParams) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": t for k, t in mh.tensors().items()}


def _encoder_from_arrays(prefix: str, arrays: dict[str, np.ndarray],
                         requires_grad: bool = False) -> EncoderParams:
    try:
        return EncoderParams(
            W1=Tensor(arrays[f"{prefix}.W1"], requires_grad),
            b1=Tensor(arrays[f"{prefix}.b1"], requires_grad),
            W2=Tensor(arrays[f"{prefix}.W2"], requires_grad),
            b2=Tensor(arrays[f"{prefix}.b2"], requires_grad),
        )
    except KeyError as exc:
        raise ConfigMismatchError(f"checkpoint missing {exc} for {prefix}")


def _mhaf_from_arrays(prefix: str, arrays: dict[str, np.ndarray],
                      attn_scale_dim: int,
                      requires_grad: bool = False) -> MhafParams:
    H = 0
    while f"{prefix}.Wx{H}" in arrays:
        H += 1
    if H == 0:
        raise ConfigMismatchError(f"checkpoint has no fusion heads for {prefix}")
    mk = lambda k: Tensor(arrays[f"{prefix}.{k}"], requires_grad)
    return MhafParams(
        Wx=[mk(f"Wx{h}") for h in range(H)],
        Wy=[mk(f"Wy{h}") for h in range(H)],
        Wz=[mk(f"Wz{h}") for h in range(H)],
        fc_W=mk("fc_W"), fc_b=mk("fc_b"),
        attn_scale_dim=attn_scale_dim,
    )


@dataclass
class TeacherModel:
    visual: EncoderParams
    textual: EncoderParams
    mhaf_visual: MhafParams | None  # None under mean-pooling fusion
    mhaf_textual: MhafParams | None  # same object as visual when shared

    def tensors(self) -> dict[str, Tensor]:
        out = _encoder_tensors("visual", self.visual)
        out.update(_encoder_tensors("textual", self.textual))
        if self.mhaf_visual is not None:
            if self.mhaf_visual is self.mhaf_textual:
                out.update(_mhaf_tensors("mhaf", self.mhaf_visual))
            else:
                out.update(_mhaf_tensors("mhaf_v", self.mhaf_visual))
                out.update(_mhaf_tensors("mhaf_t", self.mhaf_textual))
        return out


def _attn_scale_dim(cfg: TrainConfig) -> int:
    if cfg.attn_scale == "d":
        return cfg.d
    if cfg.attn_scale == "dc":
        return cfg.d // cfg.H
    raise ValueError(f"unknown attn_scale {cfg.attn_scale!r}")


def init_teacher(input_dim: int, cfg: TrainConfig) -> TeacherModel:
    visual = init_encoder(input_dim, cfg.d1, cfg.d, seed=cfg.seed * 4 + 1)
    textual = init_encoder(input_dim, cfg.d1, cfg.d, seed=cfg.seed * 4 + 2)
    if cfg.fusion == "mean":
        return TeacherModel(visual, textual, None, None)
    scale = _attn_scale_dim(cfg)
    mh_v = init_mhaf(cfg.d, cfg.H, seed=cfg.seed * 4 + 3, attn_scale_dim=scale)
    if cfg.mhaf_shared:
        return TeacherModel(visual, textual, mh_v, mh_v)
    mh_t = init_mhaf(cfg.d, cfg.H, seed=cfg.seed * 4 + 4, attn_scale_dim=scale)
    return TeacherModel(visual, textual, mh_v, mh_t)


def teacher_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig,
                            requires_grad: bool = False) -> TeacherModel:
    visual = _encoder_from_arrays("visual", ckpt.arrays, requires_grad)
    textual = _encoder_from_arrays("textual", ckpt.arrays, requires_grad)
    if cfg.fusion == "mean":
        return TeacherModel(visual, textual, None, None)
    scale = _attn_scale_dim(cfg)
    if "mhaf.fc_W" in ckpt.arrays:
        mh = _mhaf_from_arrays("mhaf", ckpt.arrays, scale, requires_grad)
        return TeacherModel(visual, textual, mh, mh)
    mh_v = _mhaf_from_arrays("mhaf_v", ckpt.arrays, scale, requires_grad)
    mh_t = _mhaf_from_arrays("mhaf_t", ckpt.arrays, scale, requires_grad)
    return TeacherModel(visual, textual, mh_v, mh_t)


@dataclass
class StudentModel:
    visual: EncoderParams
    textual: EncoderParams

    def tensors(self) -> dict[str, Tensor]:
        out = _encoder_tensors("visual", self.visual)
        out.update(_encoder_tensors("textual", self.textual))
        return out


def student_from_checkpoint(ckpt: Checkpoint,
                            requires_grad: bool = False) -> StudentModel:
    return StudentModel(
        visual=_encoder_from_arrays("visual", ckpt.arrays, requires_grad),
        textual=_encoder_from_arrays("textual", ckpt.arrays, requires_grad),
    )


def _snapshot(tensors: dict[str, Tensor], stage: str,
              config_hash: str) -> Checkpoint:
    return Checkpoint(stage=stage, config_hash=config_hash,
                      arrays={k: t.data.copy() for k, t in tensors.items()})


# -- forward passes ----------------------------------------------------------


class _SupportCache:
    """Per-pair support membership, resampled per step or frozen per epoch."""

    def __init__(self, ds: datamod.Dataset, cfg: TrainConfig,
                 rng: np.random.Generator):
        self.ds = ds
        self.cfg = cfg
        self.rng = rng
        self._cache: dict[tuple[int, int], list[int]] = {}

    def new_epoch(self) -> None:
        self._cache.clear()

    def new_step(self) -> None:
        if self.cfg.resample_support:
            self._cache.clear()

    def members(self, pair: int, modality: int, K: int) -> list[int]:
        key = (pair, modality)
        if key not in self._cache:
            ss = datamod.build_support_set(
                self.ds, pair, modality, K, self.cfg.support_mode, self.rng)
            self._cache[key] = ss.members
        return self._cache[key]


def _stack_with_support(ds: datamod.Dataset, batch: datamod.Batch,
                        modality: int, K: int,
                        cache: _SupportCache) -> np.ndarray:
    """(N, K+1, input_dim) raw-feature stacks, anchor first."""
    anchors = batch.image_features if modality == datamod.IMAGE \
        else batch.text_features
    n = anchors.shape[0]
    out = np.empty((n, K + 1, ds.input_dim))
    out[:, 0, :] = anchors
    for i, pair in enumerate(batch.instance_indices):
        for k, inst in enumerate(cache.members(int(pair), modality, K)):
            out[i, k + 1, :] = ds.instances[inst].feature
    return out


def _encode_fused(enc: EncoderParams, mh: MhafParams | None, fusion: str,
                  stacked: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
    """Encode an anchor+support stack; returns (low, high, enriched) with the
    anchor's low/high stages and the fused embedding per batch row."""
    n, m, input_dim = stacked.shape
    feats = encode(enc, stacked.reshape(n * m, input_dim))
    d1 = feats.low.shape[-1]
    d = feats.high.shape[-1]
    low = feats.low.reshape(n, m, d1)[:, 0, :]
    high_all = feats.high.reshape(n, m, d)
    high = high_all[:, 0, :]
    enriched = fuse_batch(fusion, mh, high_all)
    return low, high, enriched


def teacher_forward(model: TeacherModel, ds: datamod.Dataset,
                    batch: datamod.Batch, cfg: TrainConfig,
                    cache: _SupportCache) -> TeacherFeatures:
    img = _stack_with_support(ds, batch, datamod.IMAGE, cfg.K_v, cache)
    txt = _stack_with_support(ds, batch, datamod.TEXT, cfg.K_t, cache)
    Vl, Vh, Vr = _encode_fused(model.visual, model.mhaf_visual, cfg.fusion, img)
    Tl, Th, Tr = _encode_fused(model.textual, model.mhaf_textual, cfg.fusion, txt)
    return TeacherFeatures(Vl=Vl, Vh=Vh, Vr=Vr, Tl=Tl, Th=Th, Tr=Tr,
                           labels=batch.labels)


def student_forward(model: StudentModel,
                    batch: datamod.Batch) -> StudentFeatures:
    vf: StageFeatures = encode(model.visual, batch.image_features)
    tf: StageFeatures = encode(model.textual, batch.text_features)
    return StudentFeatures(Vl_s=vf.low, Vh_s=vf.high,
                           Tl_s=tf.low, Th_s=tf.high, labels=batch.labels)


# -- training loops ----------------------------------------------------------


def _collect_grads(loss: Tensor,
                   params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    for t in params.values():
        t.grad = None
    backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in params.items()}


def _steps_per_epoch(ds: datamod.Dataset, cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch > 0:
        return cfg.steps_per_epoch
    return max(1, ds.n_pairs // cfg.batch_size)


def train_teacher(ds: datamod.Dataset, cfg: TrainConfig
                  ) -> tuple[Checkpoint, list[dict]]:
    """Optimize encoders + fusion under the combined matching objective."""
    model = init_teacher(ds.input_dim, cfg)
    params = model.tensors()
    state = AdamState()
    steps = _steps_per_epoch(ds, cfg)
    schedule = LrSchedule(cfg.base_lr, cfg.warmup_epochs * steps,
                          cfg.decay_epochs, cfg.decay_factor)
    rng = np.random.default_rng(cfg.seed)
    sampler = datamod.SamplerConfig(P=cfg.P, K=cfg.K, seed=cfg.seed)
    cache = _SupportCache(ds, cfg, rng)

    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        cache.new_epoch()
        epoch_losses = []
        lr = 0.0
        for step in range(steps):
            cache.new_step()
            batch = datamod.sample_pk_batch(ds, sampler, rng)
            feats = teacher_forward(model, ds, batch, cfg, cache)
            loss = teacher_loss(feats, cfg.weights, cfg.cmpm)
            if cfg.use_cr:
                loss = loss + cr_loss(feats)
            val = loss.item()
            if not np.isfinite(val):
                raise NonFiniteLossError(
                    f"non-finite teacher loss at epoch {epoch} step {step}")
            grads = _collect_grads(loss, params)
            lr = lr_at(schedule, epoch, step, steps)
            adam_step(params, grads, state, lr)
            epoch_losses.append(val)
        trace.append({"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                      "lr": lr})
    return _snapshot(params, "teacher", cfg.config_hash), trace


def train_student(ds: datamod.Dataset, teacher_ckpt: Checkpoint | None,
                  cfg: TrainConfig) -> tuple[Checkpoint, list[dict]]:
    """Train a fresh dual encoder under matching + distillation signals from
    a frozen teacher.  ``kd_mode='baseline'`` needs no teacher at all."""
    needs_teacher = cfg.kd_mode != "baseline"
    teacher = None
    if needs_teacher:
        if teacher_ckpt is None:
            raise ConfigMismatchError(
                f"kd_mode {cfg.kd_mode!r} requires a teacher checkpoint")
        teacher = teacher_from_checkpoint(teacher_ckpt, cfg)
        if teacher.visual.input_dim != ds.input_dim \
                or teacher.visual.d1 != cfg.d1 or teacher.visual.d != cfg.d:
            raise ConfigMismatchError(
                f"teacher dims ({teacher.visual.input_dim}, "
                f"{teacher.visual.d1}, {teacher.visual.d}) != configured "
                f"({ds.input_dim}, {cfg.d1}, {cfg.d})")

    student = StudentModel(
        visual=init_encoder(ds.input_dim, cfg.d1, cfg.d, seed=cfg.seed * 4 + 11),
        textual=init_encoder(ds.input_dim, cfg.d1, cfg.d, seed=cfg.seed * 4 + 12),
    )
    params = student.tensors()
    visual_names = {k for k in params if k.startswith("visual.")}
    state_vis = AdamState()
    state_rest = AdamState()
    steps = _steps_per_epoch(ds, cfg)
    sched_vis = LrSchedule(cfg.student_visual_lr, cfg.warmup_epochs * steps,
                           cfg.decay_epochs, cfg.decay_factor)
    sched_rest = LrSchedule(cfg.base_lr, cfg.warmup_epochs * steps,
                            cfg.decay_epochs, cfg.decay_factor)
    rng = np.random.default_rng(cfg.seed)
    sampler = datamod.SamplerConfig(P=cfg.P, K=cfg.K, seed=cfg.seed)
    cache = _SupportCache(ds, cfg, rng)

    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        cache.new_epoch()
        epoch_losses = []
        lr = 0.0
        for step in range(steps):
            cache.new_step()
            batch = datamod.sample_pk_batch(ds, sampler, rng)
            tfeats = None
            if needs_teacher:
                tfeats = teacher_forward(teacher, ds, batch, cfg, cache)
            sfeats = student_forward(student, batch)
            loss = student_loss(sfeats, tfeats, cfg.weights, cfg.cmpm,
                                kd_mode=cfg.kd_mode)
            val = loss.item()
            if not np.isfinite(val):
                raise NonFiniteLossError(
                    f"non-finite student loss at epoch {epoch} step {step}")
            grads = _collect_grads(loss, params)
            lr = lr_at(sched_rest, epoch, step, steps)
            lr_vis = lr_at(sched_vis, epoch, step, steps)
            adam_step({k: v for k, v in params.items() if k in visual_names},
                      {k: g for k, g in grads.items() if k in visual_names},
                      state_vis, lr_vis)
            adam_step({k: v for k, v in params.items() if k not in visual_names},
                      {k: g for k, g in grads.items() if k not in visual_names},
                      state_rest, lr)
            epoch_losses.append(val)
        trace.append({"epoch": epoch, "mean_loss": float(np.mean(epoch_losses)),
                      "lr": lr})
    return _snapshot(params, "student", cfg.config_hash), trace
