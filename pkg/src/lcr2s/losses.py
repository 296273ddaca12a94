"""Alignment and distillation objectives.

The workhorse is the cross-modal projection matching (CMPM) loss: a KL
divergence between the softmax of image-onto-normalized-text projections
and the identity-match distribution, symmetrized over both directions.
Multi-stage / cross-stage sums build the teacher objective; the student
combines its own CMPM terms with feature and relation distillation against
a frozen teacher.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, l2_normalize_rows, log_softmax_rows, matmul

KD_MODES = ("baseline", "t", "i", "r", "tr", "ir", "ti", "tir")


@dataclass(frozen=True)
class CmpmConfig:
    epsilon: float = 1e-8
    # printed form normalizes only the projected-onto side; flag for studies
    normalize_both: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # cross-stage weight in the teacher objective
    lambda2: float = 0.9  # student matching weight
    lambda3: float = 1.0  # distillation weight
    alpha: float = 0.2  # ranking margin

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.alpha) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class TeacherFeatures:
    Vl: Tensor
    Vh: Tensor
    Vr: Tensor
    Tl: Tensor
    Th: Tensor
    Tr: Tensor
    labels: np.ndarray


@dataclass
class StudentFeatures:
    Vl_s: Tensor
    Vh_s: Tensor
    Tl_s: Tensor
    Th_s: Tensor
    labels: np.ndarray


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def match_distribution(labels: np.ndarray) -> np.ndarray:
    """Row-normalized identity-match matrix q: q[i, j] > 0 iff same label."""
    labels = np.asarray(labels)
    y = (labels[:, None] == labels[None, :]).astype(np.float64)
    return y / y.sum(axis=1, keepdims=True)


def _cmpm_direction(A: Tensor, B: Tensor, q: np.ndarray,
                    cfg: CmpmConfig) -> Tensor:
    """KL(p || q+eps) with p = row softmax of A against normalized B."""
    n = A.shape[0]
    lhs = l2_normalize_rows(A) if cfg.normalize_both else A
    logits = matmul(lhs, l2_normalize_rows(B).T)
    logp = log_softmax_rows(logits)
    p = logp.exp()
    log_q = Tensor(np.log(q + cfg.epsilon))
    return (p * (logp - log_q)).sum() * (1.0 / n)


def cmpm_loss(V, T, labels, cfg: CmpmConfig = CmpmConfig()) -> Tensor:
    """Symmetric cross-modal projection matching loss over a batch."""
    V, T = _as_tensor(V), _as_tensor(T)
    if V.shape[0] == 0:
        raise ValueError("cmpm_loss needs at least one row")
    if V.shape != T.shape:
        raise ValueError(f"shape mismatch {V.shape} vs {T.shape}")
    if V.shape[0] != len(labels):
        raise ValueError("labels length must match batch size")
    q = match_distribution(labels)
    return _cmpm_direction(V, T, q, cfg) + _cmpm_direction(T, V, q, cfg)


def ranking_loss(V, T, labels, alpha: float) -> Tensor:
    """Bidirectional hinge on cosine similarity with hardest in-batch
    negatives, summed over anchors."""
    V, T = _as_tensor(V), _as_tensor(T)
    labels = np.asarray(labels)
    n = V.shape[0]
    if n < 2:
        raise ValueError("ranking_loss needs at least two rows")
    S = matmul(l2_normalize_rows(V), l2_normalize_rows(T).T)
    neg = labels[:, None] != labels[None, :]
    if not neg.any(axis=1).all():
        raise ValueError("every anchor needs at least one negative")

    masked = np.where(neg, S.data, -np.inf)
    total = Tensor(0.0)
    for i in range(n):
        j_i2t = int(np.argmax(masked[i]))
        j_t2i = int(np.argmax(masked[:, i]))
        total = total + (alpha - S[i, i] + S[i, j_i2t]).relu()
        total = total + (alpha - S[i, i] + S[j_t2i, i]).relu()
    return total


def multi_stage_cmpm(f: TeacherFeatures, cfg: CmpmConfig = CmpmConfig()) -> Tensor:
    """CMPM summed over the low, high, and enriched stages."""
    return (cmpm_loss(f.Vl, f.Tl, f.labels, cfg)
            + cmpm_loss(f.Vh, f.Th, f.labels, cfg)
            + cmpm_loss(f.Vr, f.Tr, f.labels, cfg))


def cross_stage_cmpm(f: TeacherFeatures, cfg: CmpmConfig = CmpmConfig()) -> Tensor:
    """CMPM across the high and enriched stages, both pairings."""
    return (cmpm_loss(f.Vh, f.Tr, f.labels, cfg)
            + cmpm_loss(f.Vr, f.Th, f.labels, cfg))


def teacher_loss(f: TeacherFeatures, w: LossWeights,
                 cfg: CmpmConfig = CmpmConfig()) -> Tensor:
    return multi_stage_cmpm(f, cfg) + w.lambda1 * cross_stage_cmpm(f, cfg)


def student_ms_cmpm(f: StudentFeatures, cfg: CmpmConfig = CmpmConfig()) -> Tensor:
    """Student multi-stage CMPM over its two encoder stages."""
    return (cmpm_loss(f.Vl_s, f.Tl_s, f.labels, cfg)
            + cmpm_loss(f.Vh_s, f.Th_s, f.labels, cfg))


def _mse(a: Tensor, b_const: np.ndarray) -> Tensor:
    d = a - Tensor(b_const)
    return (d * d).sum() * (1.0 / a.size)


def kd_feature_loss(student: StudentFeatures, teacher: TeacherFeatures,
                    image: bool = True, text: bool = True) -> Tensor:
    """MSE between student high-stage and teacher enriched features.

    Teacher features enter as constants; the image/text flags select the
    per-modality terms for the distillation ablations.
    """
    total = Tensor(0.0)
    if image:
        total = total + _mse(student.Vh_s, teacher.Vr.data)
    if text:
        total = total + _mse(student.Th_s, teacher.Tr.data)
    return total


def kd_relation_loss(student: StudentFeatures,
                     teacher: TeacherFeatures) -> Tensor:
    """Squared Frobenius gap between student and teacher inter-modal
    similarity matrices, scaled by 1/N; raw features, teacher constant."""
    n = student.Vh_s.shape[0]
    S_t = teacher.Vr.data @ teacher.Tr.data.T
    S_s = matmul(student.Vh_s, student.Th_s.T)
    d = S_s - Tensor(S_t)
    return (d * d).sum() * (1.0 / n)


def student_loss(student: StudentFeatures, teacher: TeacherFeatures | None,
                 w: LossWeights, cfg: CmpmConfig = CmpmConfig(),
                 kd_mode: str = "tir") -> Tensor:
    """Student objective: lambda2 * matching + lambda3 * selected KD terms.

    ``kd_mode`` is a subset of {t, i, r} ("baseline" = none): t/i pick the
    per-modality feature terms, r the relation term.
    """
    if kd_mode not in KD_MODES:
        raise ValueError(f"unknown kd_mode {kd_mode!r}")
    total = w.lambda2 * student_ms_cmpm(student, cfg)
    if kd_mode == "baseline":
        return total
    if teacher is None:
        raise ValueError(f"kd_mode {kd_mode!r} requires teacher features")
    kd = Tensor(0.0)
    if "t" in kd_mode or "i" in kd_mode:
        kd = kd + kd_feature_loss(student, teacher,
                                  image="i" in kd_mode, text="t" in kd_mode)
    if "r" in kd_mode:
        kd = kd + kd_relation_loss(student, teacher)
    return total + w.lambda3 * kd


def cr_loss(f: TeacherFeatures) -> Tensor:
    """Optional regularizer pulling the single-view similarity matrix toward
    the enriched one (Frobenius, 1/N scaled); off by default."""
    n = f.Vh.shape[0]
    d = matmul(f.Vh, f.Th.T) - matmul(f.Vr, f.Tr.T)
    return (d * d).sum() * (1.0 / n)
