"""Numba and numpy kernel paths against each other and against literal loops."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhtn import kernels


def mmd_oracle(a, b, bandwidths, weights):
    def k(x, y):
        d2 = sum((xi - yi) ** 2 for xi, yi in zip(x, y))
        return sum(w * math.exp(-d2 / (2 * s * s)) for s, w in zip(bandwidths, weights))

    def mean_k(p, q):
        return sum(k(x, y) for x in p for y in q) / (len(p) * len(q))

    return mean_k(a, a) + mean_k(b, b) - 2 * mean_k(a, b)


def ranking_oracle(sims, q_label, g_labels):
    order = sorted(range(len(sims)), key=lambda j: (-sims[j], j))
    rel = [1 if g_labels[j] == q_label else 0 for j in order]
    R = sum(rel)
    if R == 0:
        return 0.0
    hits, total = 0, 0.0
    for k, r in enumerate(rel, start=1):
        hits += r
        total += hits / k * r
    return total / R


@pytest.mark.parametrize("impl", [kernels.mmd2_grad_numba, kernels.mmd2_grad_numpy])
def test_mmd_against_double_sum(impl):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(4, 3)) + 0.5
    bw, w = (0.7, 1.4), (0.3, 0.7)
    gam = 1.0 / (2.0 * np.square(bw))
    val, _, _ = impl(a, b, gam, np.array(w))
    assert val == pytest.approx(mmd_oracle(a, b, bw, w), abs=1e-12)


def test_mmd_backends_agree_on_gradients():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(9, 5)), rng.normal(size=(7, 5))
    gam, w = np.array([0.2, 0.05, 1.0]), np.array([1 / 3] * 3)
    v1, ga1, gb1 = kernels.mmd2_grad_numba(a, b, gam, w)
    v2, ga2, gb2 = kernels.mmd2_grad_numpy(a, b, gam, w)
    assert v1 == pytest.approx(v2, abs=1e-13)
    np.testing.assert_allclose(ga1, ga2, atol=1e-13)
    np.testing.assert_allclose(gb1, gb2, atol=1e-13)


def test_pairwise_distances_backends_agree():
    x = np.random.default_rng(2).normal(size=(8, 3))
    np.testing.assert_allclose(kernels.pairwise_distances_numba(x), kernels.pairwise_distances_numpy(x), atol=1e-14)
    assert kernels.pairwise_distances_numba(x).size == 28


@pytest.mark.parametrize("impl", [kernels.rank_metrics_numba, kernels.rank_metrics_numpy])
def test_rank_metrics_against_loop(impl):
    rng = np.random.default_rng(3)
    sims = np.round(rng.normal(size=(12, 15)), 1)  # rounding forces ties
    ql, gl = rng.integers(0, 3, 12), rng.integers(0, 3, 15)
    ap, pr = impl(sims, ql, gl, 11)
    for q in range(12):
        assert ap[q] == pytest.approx(ranking_oracle(list(sims[q]), ql[q], list(gl)), abs=1e-15)
    assert pr.shape == (12, 11)
    assert np.all(np.diff(pr, axis=1) <= 1e-15)  # interpolated precision never increases with recall


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 10_000))
def test_rank_backends_agree(nq, ng, seed):
    rng = np.random.default_rng(seed)
    sims = np.round(rng.uniform(-1, 1, size=(nq, ng)), 1)
    ql, gl = rng.integers(0, 3, nq), rng.integers(0, 3, ng)
    a1, p1 = kernels.rank_metrics_numba(sims, ql, gl, 11)
    a2, p2 = kernels.rank_metrics_numpy(sims, ql, gl, 11)
    # summation order may differ in the last bit
    np.testing.assert_allclose(a1, a2, rtol=0, atol=1e-14)
    np.testing.assert_allclose(p1, p2, rtol=0, atol=1e-14)


def test_interpolated_pr_hand_example():
    # ranking relevance [1, 0, 1], R = 2: precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    sims = np.array([[0.9, 0.5, 0.1]])
    ap, pr = kernels.rank_metrics(sims, np.array([0]), np.array([0, 1, 0]))
    assert ap[0] == pytest.approx(5 / 6)
    np.testing.assert_allclose(pr[0], [1.0] * 6 + [2 / 3] * 5)


@pytest.mark.parametrize("flag, expected", [("1", "numpy"), ("0", "numba")])
def test_environment_flag_selects_backend(flag, expected):
    import os
    import subprocess
    import sys

    env = dict(os.environ, MHTN_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from mhtn._accel import backend_name; print(backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == expected
