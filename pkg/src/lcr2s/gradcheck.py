"""Finite-difference verification harness for every differentiable surface.

Each target builds random small instances and compares the analytic
gradient against central differences through :func:`finite_diff_check`.
The CLI and the acceptance suite both drive this module.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import losses
from .encoders import EncoderParams, encode, init_encoder
from .mhaf import init_mhaf, mhaf_fuse
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4
STEP = 1e-5

TARGETS = ("cmpm", "ranking", "multi_stage", "cross_stage", "teacher",
           "student_ms", "kd_feature", "kd_relation", "student", "cr",
           "mhaf", "encode")


def _labels(rng: np.random.Generator, n: int) -> np.ndarray:
    # at least two identities so ranking always has negatives
    labels = rng.integers(0, max(2, n // 2), size=n)
    if len(np.unique(labels)) < 2:
        labels[0] = labels[0] + 1
    return labels


def _teacher_features(rng, n, d1, d, labels) -> losses.TeacherFeatures:
    r = lambda k: Tensor(rng.normal(size=(n, k)))
    return losses.TeacherFeatures(Vl=r(d1), Vh=r(d), Vr=r(d),
                                  Tl=r(d1), Th=r(d), Tr=r(d), labels=labels)


def _student_features(rng, n, d1, d, labels) -> losses.StudentFeatures:
    r = lambda k: Tensor(rng.normal(size=(n, k)))
    return losses.StudentFeatures(Vl_s=r(d1), Vh_s=r(d),
                                  Tl_s=r(d1), Th_s=r(d), labels=labels)


def _check_target(target: str, rng: np.random.Generator) -> float:
    """One random instance of one target; returns the max relative error."""
    n = int(rng.integers(3, 9))
    d = int(rng.choice([4, 8, 16]))
    d1 = d // 2
    labels = _labels(rng, n)
    cfg = losses.CmpmConfig()
    w = losses.LossWeights()
    x0 = rng.normal(size=(n, d))

    if target == "cmpm":
        T = Tensor(rng.normal(size=(n, d)))
        e1 = finite_diff_check(
            lambda V: losses.cmpm_loss(V, T, labels, cfg), x0, STEP)
        V = Tensor(rng.normal(size=(n, d)))
        e2 = finite_diff_check(
            lambda Tm: losses.cmpm_loss(V, Tm, labels, cfg), x0, STEP)
        return max(e1, e2)
    if target == "ranking":
        T = Tensor(rng.normal(size=(n, d)))
        return finite_diff_check(
            lambda V: losses.ranking_loss(V, T, labels, w.alpha), x0, STEP)
    if target in ("multi_stage", "cross_stage", "teacher", "cr"):
        f = _teacher_features(rng, n, d1, d, labels)
        fn = {"multi_stage": lambda: losses.multi_stage_cmpm(f, cfg),
              "cross_stage": lambda: losses.cross_stage_cmpm(f, cfg),
              "teacher": lambda: losses.teacher_loss(f, w, cfg),
              "cr": lambda: losses.cr_loss(f)}[target]

        def wrap(V):
            f.Vr = V
            return fn()

        return finite_diff_check(wrap, x0, STEP)
    if target in ("student_ms", "kd_feature", "kd_relation", "student"):
        s = _student_features(rng, n, d1, d, labels)
        t = _teacher_features(rng, n, d1, d, labels)
        fn = {"student_ms": lambda: losses.student_ms_cmpm(s, cfg),
              "kd_feature": lambda: losses.kd_feature_loss(s, t),
              "kd_relation": lambda: losses.kd_relation_loss(s, t),
              "student": lambda: losses.student_loss(s, t, w, cfg)}[target]

        def wrap(V):
            s.Vh_s = V
            return fn()

        return finite_diff_check(wrap, x0, STEP)
    if target == "mhaf":
        H = int(rng.choice([1, 2, 4]))
        params = init_mhaf(d, H, seed=int(rng.integers(1 << 30)))
        K = int(rng.integers(0, 3))
        E0 = rng.normal(size=(K + 1, d))
        e1 = finite_diff_check(
            lambda E: mhaf_fuse(params, E).sum(), E0, STEP)

        def wrap_fc(Wfc):
            p2 = init_mhaf(d, H, seed=0)
            p2.Wx, p2.Wy, p2.Wz = params.Wx, params.Wy, params.Wz
            p2.fc_W, p2.fc_b = Wfc, params.fc_b
            p2.attn_scale_dim = params.attn_scale_dim
            return mhaf_fuse(p2, Tensor(E0)).sum()

        e2 = finite_diff_check(wrap_fc, params.fc_W.data, STEP)

        def wrap_wx(Wx0):
            p2 = init_mhaf(d, H, seed=0)
            p2.Wx = [Wx0] + params.Wx[1:]
            p2.Wy, p2.Wz = params.Wy, params.Wz
            p2.fc_W, p2.fc_b = params.fc_W, params.fc_b
            p2.attn_scale_dim = params.attn_scale_dim
            return mhaf_fuse(p2, Tensor(E0)).sum()

        e3 = finite_diff_check(wrap_wx, params.Wx[0].data, STEP)
        return max(e1, e2, e3)
    if target == "encode":
        enc = init_encoder(d, d1, d, seed=int(rng.integers(1 << 30)))
        e1 = finite_diff_check(lambda X: encode(enc, X).high.sum(), x0, STEP)

        def wrap_w1(W1):
            p2 = EncoderParams(W1=W1, b1=enc.b1, W2=enc.W2, b2=enc.b2)
            return encode(p2, Tensor(x0)).high.sum()

        e2 = finite_diff_check(wrap_w1, enc.W1.data, STEP)

        def wrap_w2(W2):
            p2 = EncoderParams(W1=enc.W1, b1=enc.b1, W2=W2, b2=enc.b2)
            return encode(p2, Tensor(x0)).high.sum()

        e3 = finite_diff_check(wrap_w2, enc.W2.data, STEP)
        return max(e1, e2, e3)
    raise ValueError(f"unknown gradcheck target {target!r}")


def run(targets=TARGETS, instances: int = 3, seed: int = 0,
        corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per target over several random instances.

    ``corrupt`` names a target whose reported error is deliberately broken,
    as a self-test that failures actually propagate.
    """
    results: dict[str, float] = {}
    for target in targets:
        if target not in TARGETS:
            raise ValueError(f"unknown gradcheck target {target!r}")
        rng = np.random.default_rng(seed + zlib.crc32(target.encode()) % 100_000)
        err = max(_check_target(target, rng) for _ in range(instances))
        if corrupt == target:
            err += 1.0
        results[target] = err
    return results
