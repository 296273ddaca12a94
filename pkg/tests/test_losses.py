"""Objectives: nested-loop oracles, degenerate cases, weight algebra,
and the teacher-constant contract of the distillation terms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcr2s.losses import (CmpmConfig, LossWeights, StudentFeatures,
                          TeacherFeatures, cmpm_loss, cr_loss,
                          cross_stage_cmpm, kd_feature_loss,
                          kd_relation_loss, match_distribution,
                          multi_stage_cmpm, ranking_loss, student_loss,
                          student_ms_cmpm, teacher_loss)
from lcr2s.tensor import Tensor, grad

EPS = 1e-8


# -- independent oracles ------------------------------------------------------


def _cmpm_oracle(V, T, labels, eps=EPS):
    """Nested-loop recomputation of the symmetric projection-matching loss."""
    def one_direction(A, B):
        n = A.shape[0]
        Bn = np.array([b / max(np.linalg.norm(b), 1e-12) for b in B])
        total = 0.0
        for i in range(n):
            logits = np.array([A[i] @ Bn[j] for j in range(n)])
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            y = np.array([1.0 if labels[i] == labels[j] else 0.0
                          for j in range(n)])
            q = y / y.sum()
            for j in range(n):
                if p[j] > 0:
                    total += p[j] * np.log(p[j] / (q[j] + eps))
        return total / n

    return one_direction(V, T) + one_direction(T, V)


def _rows(rng, n, k):
    return rng.normal(size=(n, k))


def _teacher(rng, n, d1, d, labels):
    return TeacherFeatures(
        Vl=Tensor(_rows(rng, n, d1)), Vh=Tensor(_rows(rng, n, d)),
        Vr=Tensor(_rows(rng, n, d)), Tl=Tensor(_rows(rng, n, d1)),
        Th=Tensor(_rows(rng, n, d)), Tr=Tensor(_rows(rng, n, d)),
        labels=labels)


def _student(rng, n, d1, d, labels):
    return StudentFeatures(
        Vl_s=Tensor(_rows(rng, n, d1)), Vh_s=Tensor(_rows(rng, n, d)),
        Tl_s=Tensor(_rows(rng, n, d1)), Th_s=Tensor(_rows(rng, n, d)),
        labels=labels)


# -- projection matching ------------------------------------------------------


def test_cmpm_orthonormal_two_identity_instance():
    V = np.eye(2)
    T = np.eye(2)
    labels = np.array([0, 1])
    loss = cmpm_loss(V, T, labels).item()
    assert abs(loss - _cmpm_oracle(V, T, labels)) < 1e-10
    assert abs(loss - 8.743761891365288) < 1e-12


def test_cmpm_matches_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for n in (2, 4, 7):
        V, T = _rows(rng, n, 5), _rows(rng, n, 5)
        labels = rng.integers(0, max(2, n // 2), size=n)
        got = cmpm_loss(V, T, labels).item()
        assert abs(got - _cmpm_oracle(V, T, labels)) < 1e-10


def test_cmpm_single_matched_pair_near_zero():
    loss = cmpm_loss(np.array([[3.0, -1.0]]), np.array([[0.5, 2.0]]),
                     np.array([7])).item()
    assert abs(loss) <= 2 * EPS + 1e-12


def test_cmpm_joint_permutation_invariance():
    rng = np.random.default_rng(1)
    V, T = _rows(rng, 5, 4), _rows(rng, 5, 4)
    labels = np.array([0, 0, 1, 2, 1])
    perm = rng.permutation(5)
    base = cmpm_loss(V, T, labels).item()
    shuffled = cmpm_loss(V[perm], T[perm], labels[perm]).item()
    assert abs(base - shuffled) < 1e-12


def test_cmpm_direction_symmetry():
    # the image-to-text term on (V, T) equals the text-to-image term on (T, V)
    rng = np.random.default_rng(2)
    V, T = _rows(rng, 4, 3), _rows(rng, 4, 3)
    labels = np.array([0, 1, 0, 2])
    assert abs(cmpm_loss(V, T, labels).item()
               - cmpm_loss(T, V, labels).item()) < 1e-12


def test_cmpm_normalize_both_flag_changes_value():
    rng = np.random.default_rng(3)
    V, T = _rows(rng, 4, 3) * 5.0, _rows(rng, 4, 3)
    labels = np.array([0, 1, 2, 3])
    plain = cmpm_loss(V, T, labels).item()
    both = cmpm_loss(V, T, labels, CmpmConfig(normalize_both=True)).item()
    assert plain != pytest.approx(both)
    # with both sides normalized the loss is scale invariant in V
    both2 = cmpm_loss(V * 10.0, T, labels,
                      CmpmConfig(normalize_both=True)).item()
    assert abs(both - both2) < 1e-12


def test_cmpm_input_validation():
    with pytest.raises(ValueError):
        cmpm_loss(np.zeros((0, 2)), np.zeros((0, 2)), np.array([]))
    with pytest.raises(ValueError):
        cmpm_loss(np.zeros((2, 2)), np.zeros((2, 3)), np.array([0, 1]))
    with pytest.raises(ValueError):
        cmpm_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.array([0]))
    with pytest.raises(ValueError):
        CmpmConfig(epsilon=0.0)


def test_match_distribution_rows_normalized():
    q = match_distribution(np.array([1, 1, 2]))
    np.testing.assert_allclose(q.sum(axis=1), 1.0)
    np.testing.assert_allclose(q[0], [0.5, 0.5, 0.0])


# -- ranking ------------------------------------------------------------------


def test_ranking_satisfied_margins_zero():
    # positives at similarity 1, negatives at -1, margin 0.2
    V = np.array([[1.0, 0.0], [0.0, 1.0]])
    T = np.array([[1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1])
    assert ranking_loss(V, T, labels, alpha=0.2).item() == 0.0


def test_ranking_hinge_arithmetic():
    # one anchor: positive 0.9, hardest negative 0.8, margin 0.2 -> 0.1
    # per direction; the batch is symmetric so the total is 4 * 0.1
    c = np.cos, np.sin
    a1, a2 = 0.0, np.arccos(0.9)  # angle gap giving cosine 0.9
    a3 = np.arccos(0.8)
    V = np.array([[np.cos(a1), np.sin(a1)], [np.cos(a3), np.sin(a3)]])
    T = np.array([[np.cos(a2), np.sin(a2)],
                  [np.cos(a3 + a2), np.sin(a3 + a2)]])
    labels = np.array([0, 1])
    got = ranking_loss(V, T, labels, alpha=0.2).item()
    S = (V / np.linalg.norm(V, axis=1, keepdims=True)) @ \
        (T / np.linalg.norm(T, axis=1, keepdims=True)).T
    expect = sum(max(0.2 - S[i, i] + S[i, 1 - i], 0.0) +
                 max(0.2 - S[i, i] + S[1 - i, i], 0.0) for i in range(2))
    assert abs(got - expect) < 1e-12
    assert got > 0


def test_ranking_zero_margin_with_separated_pairs():
    V = np.array([[1.0, 0.0], [0.0, 1.0]])
    T = np.array([[0.9, 0.1], [0.1, 0.9]])
    labels = np.array([0, 1])
    assert ranking_loss(V, T, labels, alpha=0.0).item() == 0.0


def test_ranking_single_identity_errors():
    V = np.random.default_rng(0).normal(size=(3, 2))
    with pytest.raises(ValueError):
        ranking_loss(V, V, np.array([5, 5, 5]), alpha=0.2)
    with pytest.raises(ValueError):
        ranking_loss(V[:1], V[:1], np.array([0]), alpha=0.2)


# -- staged compositions -------------------------------------------------------


def test_multi_stage_equals_sum_of_stage_losses():
    rng = np.random.default_rng(4)
    labels = np.array([0, 1, 0, 2])
    f = _teacher(rng, 4, 3, 6, labels)
    total = multi_stage_cmpm(f).item()
    parts = (cmpm_loss(f.Vl, f.Tl, labels).item()
             + cmpm_loss(f.Vh, f.Th, labels).item()
             + cmpm_loss(f.Vr, f.Tr, labels).item())
    assert abs(total - parts) < 1e-12


def test_cross_stage_collapsed_stages():
    rng = np.random.default_rng(5)
    labels = np.array([0, 1, 2])
    f = _teacher(rng, 3, 2, 4, labels)
    f.Vr, f.Tr = f.Vh, f.Th
    assert abs(cross_stage_cmpm(f).item()
               - 2 * cmpm_loss(f.Vh, f.Th, labels).item()) < 1e-12


def test_teacher_loss_weight_algebra():
    rng = np.random.default_rng(6)
    labels = np.array([0, 0, 1, 1])
    f = _teacher(rng, 4, 3, 6, labels)
    ms = multi_stage_cmpm(f).item()
    at0 = teacher_loss(f, LossWeights(lambda1=0.0)).item()
    assert abs(at0 - ms) < 1e-12
    at2 = teacher_loss(f, LossWeights(lambda1=2.0)).item()
    cross = cross_stage_cmpm(f).item()
    assert abs((at2 - at0) - 2 * cross) < 1e-10


def test_student_ms_equals_two_stage_sum():
    rng = np.random.default_rng(7)
    labels = np.array([0, 1, 0])
    s = _student(rng, 3, 2, 4, labels)
    assert abs(student_ms_cmpm(s).item()
               - cmpm_loss(s.Vl_s, s.Tl_s, labels).item()
               - cmpm_loss(s.Vh_s, s.Th_s, labels).item()) < 1e-12


# -- distillation --------------------------------------------------------------


def test_kd_feature_zero_at_equality():
    rng = np.random.default_rng(8)
    labels = np.array([0, 1])
    t = _teacher(rng, 2, 2, 4, labels)
    s = _student(rng, 2, 2, 4, labels)
    s.Vh_s, s.Th_s = Tensor(t.Vr.data.copy()), Tensor(t.Tr.data.copy())
    assert kd_feature_loss(s, t).item() == 0.0
    assert kd_relation_loss(s, t).item() == 0.0


def test_kd_feature_mean_reduction_example():
    labels = np.array([0])
    t = TeacherFeatures(Vl=Tensor(np.zeros((1, 1))), Vh=Tensor(np.zeros((1, 2))),
                        Vr=Tensor(np.array([[0.0, 0.0]])),
                        Tl=Tensor(np.zeros((1, 1))), Th=Tensor(np.zeros((1, 2))),
                        Tr=Tensor(np.zeros((1, 2))), labels=labels)
    s = StudentFeatures(Vl_s=Tensor(np.zeros((1, 1))),
                        Vh_s=Tensor(np.array([[1.0, 0.0]])),
                        Tl_s=Tensor(np.zeros((1, 1))),
                        Th_s=Tensor(np.zeros((1, 2))), labels=labels)
    # image term (1^2 + 0^2) / 2, text term 0
    assert abs(kd_feature_loss(s, t).item() - 0.5) < 1e-15


def test_kd_feature_quadratic_homogeneity_and_flags():
    rng = np.random.default_rng(9)
    labels = np.array([0, 1, 2])
    t = _teacher(rng, 3, 2, 4, labels)
    s = _student(rng, 3, 2, 4, labels)
    base = kd_feature_loss(s, t).item()
    s2 = _student(rng, 3, 2, 4, labels)
    s2.Vh_s = Tensor(t.Vr.data + 3.0 * (s.Vh_s.data - t.Vr.data))
    s2.Th_s = Tensor(t.Tr.data + 3.0 * (s.Th_s.data - t.Tr.data))
    assert abs(kd_feature_loss(s2, t).item() - 9.0 * base) < 1e-9
    img = kd_feature_loss(s, t, image=True, text=False).item()
    txt = kd_feature_loss(s, t, image=False, text=True).item()
    assert abs(img + txt - base) < 1e-12


def test_kd_relation_identity_gap_example():
    # student minus teacher similarity matrix equal to I_2 -> (1/2)*2 = 1
    labels = np.array([0, 1])
    t = TeacherFeatures(Vl=Tensor(np.zeros((2, 1))), Vh=Tensor(np.zeros((2, 2))),
                        Vr=Tensor(np.zeros((2, 2))),
                        Tl=Tensor(np.zeros((2, 1))), Th=Tensor(np.zeros((2, 2))),
                        Tr=Tensor(np.zeros((2, 2))), labels=labels)
    s = StudentFeatures(Vl_s=Tensor(np.zeros((2, 1))),
                        Vh_s=Tensor(np.eye(2)),
                        Tl_s=Tensor(np.zeros((2, 1))),
                        Th_s=Tensor(np.eye(2)), labels=labels)
    assert abs(kd_relation_loss(s, t).item() - 1.0) < 1e-15


def test_kd_relation_nonnegative_random():
    rng = np.random.default_rng(10)
    for _ in range(10):
        labels = np.array([0, 1, 2, 3])
        t = _teacher(rng, 4, 2, 5, labels)
        s = _student(rng, 4, 2, 5, labels)
        assert kd_relation_loss(s, t).item() >= 0.0


def test_kd_losses_do_not_backprop_into_teacher():
    rng = np.random.default_rng(11)
    labels = np.array([0, 1])
    t = _teacher(rng, 2, 2, 4, labels)
    for tensor in (t.Vr, t.Tr):
        tensor.requires_grad = True
    s = _student(rng, 2, 2, 4, labels)
    s.Vh_s.requires_grad = s.Th_s.requires_grad = True
    total = kd_feature_loss(s, t) + kd_relation_loss(s, t)
    gVr, gTr, gVh = grad(total, [t.Vr, t.Tr, s.Vh_s])
    np.testing.assert_array_equal(gVr, 0.0)
    np.testing.assert_array_equal(gTr, 0.0)
    assert np.abs(gVh).max() > 0.0


# -- student objective ---------------------------------------------------------


def test_student_loss_baseline_ignores_teacher():
    rng = np.random.default_rng(12)
    labels = np.array([0, 1, 0])
    s = _student(rng, 3, 2, 4, labels)
    w = LossWeights()
    base = student_loss(s, None, w, kd_mode="baseline").item()
    assert abs(base - 0.9 * student_ms_cmpm(s).item()) < 1e-12
    zero = student_loss(s, None, LossWeights(lambda2=0.0, lambda3=0.0),
                        kd_mode="baseline").item()
    assert zero == 0.0


def test_student_loss_mode_composition():
    rng = np.random.default_rng(13)
    labels = np.array([0, 1, 2])
    s = _student(rng, 3, 2, 4, labels)
    t = _teacher(rng, 3, 2, 4, labels)
    w = LossWeights()
    ms = 0.9 * student_ms_cmpm(s).item()
    kdf_t = kd_feature_loss(s, t, image=False, text=True).item()
    kdf_i = kd_feature_loss(s, t, image=True, text=False).item()
    kdr = kd_relation_loss(s, t).item()
    expect = {"baseline": ms, "t": ms + kdf_t, "i": ms + kdf_i,
              "r": ms + kdr, "ti": ms + kdf_t + kdf_i, "tr": ms + kdf_t + kdr,
              "ir": ms + kdf_i + kdr, "tir": ms + kdf_t + kdf_i + kdr}
    for mode, val in expect.items():
        got = student_loss(s, t, w, kd_mode=mode).item()
        assert abs(got - val) < 1e-10, mode


def test_student_loss_requires_teacher_and_known_mode():
    rng = np.random.default_rng(14)
    labels = np.array([0, 1])
    s = _student(rng, 2, 2, 4, labels)
    with pytest.raises(ValueError):
        student_loss(s, None, LossWeights(), kd_mode="tir")
    with pytest.raises(ValueError):
        student_loss(s, None, LossWeights(), kd_mode="bogus")


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda2=-0.1)


# -- optional teacher regularizer ----------------------------------------------


def test_cr_loss_zero_at_collapsed_stages_and_scalar_case():
    rng = np.random.default_rng(15)
    labels = np.array([0, 1])
    f = _teacher(rng, 2, 2, 4, labels)
    f.Vr, f.Tr = f.Vh, f.Th
    assert cr_loss(f).item() == 0.0
    # N=1: a single similarity gap g contributes g^2
    f1 = TeacherFeatures(Vl=f.Vl, Vh=Tensor(f.Vh.data[:1]),
                         Vr=Tensor(f.Vh.data[:1]),
                         Tl=f.Tl, Th=Tensor(f.Th.data[:1]),
                         Tr=Tensor(f.Th.data[:1] * 0 + 1.0), labels=labels[:1])
    gap = (f1.Vh.data @ f1.Th.data.T - f1.Vr.data @ f1.Tr.data.T).item()
    assert abs(cr_loss(f1).item() - gap ** 2) < 1e-12


def test_cr_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(16)
    labels = np.array([0, 1, 2])
    f = _teacher(rng, 3, 2, 4, labels)
    gap = f.Vh.data @ f.Th.data.T - f.Vr.data @ f.Tr.data.T
    oracle = sum(gap[i, j] ** 2 for i in range(3) for j in range(3)) / 3
    assert abs(cr_loss(f).item() - oracle) < 1e-12


# -- shared invariants ---------------------------------------------------------


@settings(deadline=None, max_examples=20)
@given(st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_all_losses_finite_and_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    if len(np.unique(labels)) < 2:
        labels[0] = 1 - labels[0]
    t = _teacher(rng, n, 2, 4, labels)
    s = _student(rng, n, 2, 4, labels)
    w = LossWeights()
    values = [teacher_loss(t, w).item(),
              student_loss(s, t, w, kd_mode="tir").item(),
              ranking_loss(t.Vh, t.Th, labels, w.alpha).item(),
              cr_loss(t).item()]
    assert all(np.isfinite(v) for v in values)
    assert all(v >= -2 * EPS * n for v in values)
    perm = rng.permutation(n)
    t2 = TeacherFeatures(Vl=Tensor(t.Vl.data[perm]), Vh=Tensor(t.Vh.data[perm]),
                         Vr=Tensor(t.Vr.data[perm]), Tl=Tensor(t.Tl.data[perm]),
                         Th=Tensor(t.Th.data[perm]), Tr=Tensor(t.Tr.data[perm]),
                         labels=labels[perm])
    assert abs(teacher_loss(t2, w).item() - values[0]) < 1e-10
