import math

import mpmath
import numpy as np
import pytest
from scipy.special import softmax

from tsfm_lens import kernel as K
from tsfm_lens.numerics import Rng


def test_nw_symmetry_and_limit():
    keys = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert np.allclose(K.nw_weights([0.0, 0.5], keys, 1.0), [0.5, 0.5], atol=1e-15)
    for gap in (2.0, 5.0, 10.0):
        w = K.nw_weights([0.0, 0.0], np.array([[0.0, 0.0], [gap, 0.0]]), 1.0)
        assert abs(w[0] - 1 / (1 + math.exp(-gap ** 2 / 2))) < 1e-15
    rng = np.random.default_rng(0)
    q, ks, tau = rng.normal(size=4), rng.normal(size=(6, 4)), 0.7
    direct = np.exp(-np.sum((ks - q) ** 2, axis=1) / (2 * tau))
    assert np.max(np.abs(K.nw_weights(q, ks, tau) - direct / direct.sum())) < 1e-12
    with pytest.raises(ValueError):
        K.nw_weights(q, ks, 0.0)


def test_attention_vs_nw():
    rng = np.random.default_rng(1)
    keys = rng.normal(size=(7, 5))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    assert K.attention_vs_nw(rng.normal(size=5), keys * 2.0, 5) < 1e-12
    unequal = rng.normal(size=(7, 5)) * np.arange(1, 8)[:, None]
    assert K.attention_vs_nw(rng.normal(size=5), unequal, 5) > 1e-6


def test_tilt_identity_is_gaussian_kernel():
    head = K.SpectralHead.from_matrix(np.eye(3), r=3)
    rng = np.random.default_rng(2)
    q, ks = rng.normal(size=3), rng.normal(size=(5, 3))
    raw = 0.5 * np.sum(ks ** 2, axis=1) - 0.5 * np.sum((q - ks) ** 2, axis=1)
    assert np.max(np.abs(K.tilt_factorization(head, q, ks) - softmax(raw))) < 1e-14


def test_tilt_matches_direct_random():
    rng = Rng(3)
    for _ in range(30):
        head = K.random_head(rng)
        q, ks = rng.normal(head.dim), rng.normal((rng.integers(1, 20), head.dim))
        oracle = softmax(ks @ head.m.T @ q)
        assert np.max(np.abs(K.tilt_factorization(head, q, ks) - oracle)) < 1e-10


def test_tilt_huge_mode_concentrates():
    m = np.diag([50.0, 0.1, 0.1])
    head = K.SpectralHead.from_matrix(m)
    q = np.array([1.0, 0.0, 0.0])
    ks = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    w = K.tilt_factorization(head, q, ks)
    assert w[1] < 1e-20 and w[2] < 1e-20 and head.r == 1


def test_energy_rank_and_stable_rank():
    assert K.energy_rank([3.0, 1.0, 0.1]) == 2
    assert K.energy_rank([10.0, 0.5, 0.1]) == 1
    assert K.energy_rank([1.0, 1.0, 1.0, 1.0]) == 4
    assert K.energy_rank([1.0, 1.0, 0.0]) == 2
    m = np.random.default_rng(4).normal(size=(6, 6))
    head = K.SpectralHead.from_matrix(m)
    assert abs(head.stable_rank - np.linalg.norm(m, "fro") ** 2 / np.linalg.norm(m, 2) ** 2) < 1e-10
    assert abs(head.tail(2) - np.sum(np.linalg.svd(m, compute_uv=False)[2:] ** 2)) < 1e-10


def test_truncated_scores_full_rank_equal_scores():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(5, 5))
    head = K.SpectralHead.from_matrix(m, r=5)
    qs, ks = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    assert np.max(np.abs(K.truncated_scores(head, qs, ks) - qs @ m @ ks.T)) < 1e-12


def exact_residual_mass(row, j, beta):
    with mpmath.workdps(60):
        z = [mpmath.mpf(float(x)) * beta for x in row]
        rest = mpmath.fsum(mpmath.exp(v) for i, v in enumerate(z) if i != j)
        return float(mpmath.log(rest / (rest + mpmath.exp(z[j]))))


def test_log_residual_mass_against_high_precision():
    rng = np.random.default_rng(6)
    for _ in range(20):
        row = rng.normal(size=rng.integers(2, 20)) * 5
        j = int(np.argmax(row))
        beta = float(rng.uniform(0.1, 20))
        assert abs(K.log_residual_mass(row, j, beta) - exact_residual_mass(row, j, beta)) < 1e-9


def test_symmetric_instance_rejected():
    res = K.verify_bound(K.symmetric_instance())
    assert not res.assumptions_ok and res.holds is None
    assert any("unique_argmax" in f or "score_margin" in f for f in res.failed)
    assert res.to_dict()["lhs"] is None


@pytest.mark.parametrize("maker", [K.low_rank_instance, K.tail_instance])
def test_generated_instances(maker):
    for seed in range(10):
        inst = maker(seed)
        assert inst.family in ("rank_deficient", "spectral_tail")
        res = K.verify_bound(inst)
        assert res.assumptions_ok and res.holds, (seed, res.failed)
        if inst.family == "rank_deficient":
            assert inst.head.tail() < 1e-20
        else:
            assert inst.head.tail() > 0
        d = res.to_dict()
        assert d["lhs"] <= d["rhs_truncated"] * (1 + 1e-9) and d["lhs"] <= d["rhs_generic"] * (1 + 1e-9)
    assert K.low_rank_instance(3).queries.tobytes() == K.low_rank_instance(3).queries.tobytes()


def test_beta_slopes_ok():
    s = K.beta_slopes(K.tail_instance(1))
    assert s.ok and s.slope_lhs < 0 and len(s.betas) == 20
