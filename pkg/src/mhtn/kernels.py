"""Hot numeric kernels: multi-bandwidth Gaussian MMD and ranked retrieval metrics.

Every kernel exists twice, a numba-compiled loop version (``*_numba``) and a
vectorised numpy version (``*_numpy``). The public names dispatch on
:data:`mhtn._accel.USE_NUMBA`. Both paths compute the same quantities; they
may differ in the last few bits because summation order differs.
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

PR_LEVELS = 11


# ---------------------------------------------------------------------------
# Gaussian MMD^2 (biased V-statistic) and its gradient w.r.t. both samples


@njit(cache=True)
def _mmd2_block_numba(x, y, gammas, weights, scale, gx, gy):
    # Accumulates scale * sum_ij k(x_i, y_j) into the return value and the
    # matching gradient into gx / gy (either may alias when x is y).
    n, d = x.shape
    m = y.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(m):
            dist = 0.0
            for c in range(d):
                diff = x[i, c] - y[j, c]
                dist += diff * diff
            kval = 0.0
            dk = 0.0
            for q in range(gammas.shape[0]):
                e = weights[q] * np.exp(-gammas[q] * dist)
                kval += e
                dk += -2.0 * gammas[q] * e
            total += kval
            coef = scale * dk
            for c in range(d):
                diff = x[i, c] - y[j, c]
                gx[i, c] += coef * diff
                gy[j, c] -= coef * diff
    return scale * total


@njit(cache=True)
def mmd2_grad_numba(a, b, gammas, weights):
    na = a.shape[0]
    nb = b.shape[0]
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    val = _mmd2_block_numba(a, a, gammas, weights, 1.0 / (na * na), ga, ga)
    val += _mmd2_block_numba(b, b, gammas, weights, 1.0 / (nb * nb), gb, gb)
    val += _mmd2_block_numba(a, b, gammas, weights, -2.0 / (na * nb), ga, gb)
    return val, ga, gb


def _sq_dists(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kernel_and_slope(dist, gammas, weights):
    e = weights[:, None, None] * np.exp(-gammas[:, None, None] * dist[None])
    return e.sum(axis=0), (-2.0 * gammas[:, None, None] * e).sum(axis=0)


def mmd2_grad_numpy(a, b, gammas, weights):
    na, nb = a.shape[0], b.shape[0]
    kaa, saa = _kernel_and_slope(_sq_dists(a, a), gammas, weights)
    kbb, sbb = _kernel_and_slope(_sq_dists(b, b), gammas, weights)
    kab, sab = _kernel_and_slope(_sq_dists(a, b), gammas, weights)
    val = kaa.sum() / (na * na) + kbb.sum() / (nb * nb) - 2.0 * kab.sum() / (na * nb)
    # d k(x, y) / dx = slope * (x - y); the aa / bb blocks count each point twice
    ga = (2.0 / (na * na)) * (a * saa.sum(axis=1)[:, None] - saa @ a)
    ga -= (2.0 / (na * nb)) * (a * sab.sum(axis=1)[:, None] - sab @ b)
    gb = (2.0 / (nb * nb)) * (b * sbb.sum(axis=1)[:, None] - sbb @ b)
    gb -= (2.0 / (na * nb)) * (b * sab.sum(axis=0)[:, None] - sab.T @ a)
    return val, ga, gb


@njit(cache=True)
def pairwise_distances_numba(x):
    n, d = x.shape
    out = np.empty(n * (n - 1) // 2)
    k = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for c in range(d):
                diff = x[i, c] - x[j, c]
                s += diff * diff
            out[k] = np.sqrt(s)
            k += 1
    return out


def pairwise_distances_numpy(x):
    iu = np.triu_indices(x.shape[0], k=1)
    return np.sqrt(_sq_dists(x, x)[iu])


# ---------------------------------------------------------------------------
# Ranked retrieval: AP and interpolated PR for a block of queries


@njit(cache=True, nogil=True)
def rank_metrics_numba(sims, q_labels, g_labels, n_levels):
    nq, ng = sims.shape
    ap = np.zeros(nq)
    pr = np.zeros((nq, n_levels))
    prec = np.empty(ng)
    rec = np.empty(ng)
    for q in range(nq):
        order = np.argsort(-sims[q], kind="mergesort")
        total_rel = 0
        for j in range(ng):
            if g_labels[j] == q_labels[q]:
                total_rel += 1
        if total_rel == 0:
            continue
        hits = 0
        acc = 0.0
        for k in range(ng):
            if g_labels[order[k]] == q_labels[q]:
                hits += 1
                acc += hits / (k + 1.0)
            prec[k] = hits / (k + 1.0)
            rec[k] = hits / total_rel
        ap[q] = acc / total_rel
        # suffix maximum turns raw precision into interpolated precision
        for k in range(ng - 2, -1, -1):
            if prec[k + 1] > prec[k]:
                prec[k] = prec[k + 1]
        k = 0
        for lvl in range(n_levels):
            r = lvl / (n_levels - 1.0)
            while k < ng and rec[k] < r - 1e-12:
                k += 1
            pr[q, lvl] = prec[k] if k < ng else 0.0
    return ap, pr


def rank_metrics_numpy(sims, q_labels, g_labels, n_levels):
    nq, ng = sims.shape
    order = np.argsort(-sims, axis=1, kind="stable")
    rel = (g_labels[order] == q_labels[:, None]).astype(np.float64)
    total = rel.sum(axis=1)
    hits = np.cumsum(rel, axis=1)
    ranks = np.arange(1, ng + 1, dtype=np.float64)
    prec = hits / ranks
    safe = np.where(total > 0, total, 1.0)
    ap = np.where(total > 0, (prec * rel).sum(axis=1) / safe, 0.0)
    rec = hits / safe[:, None]
    interp = np.maximum.accumulate(prec[:, ::-1], axis=1)[:, ::-1]
    levels = np.arange(n_levels) / (n_levels - 1.0)
    pr = np.zeros((nq, n_levels))
    for q in range(nq):
        if total[q] == 0:
            continue
        idx = np.searchsorted(rec[q], levels - 1e-12, side="left")
        ok = idx < ng
        pr[q, ok] = interp[q, idx[ok]]
    return ap, pr


# ---------------------------------------------------------------------------
# dispatch


def mmd2_and_grad(a, b, gammas, weights):
    """Biased MMD^2 between row sets ``a`` and ``b`` with gradients.

    ``gammas`` are ``1 / (2 sigma^2)`` per bandwidth, ``weights`` the mixture
    weights. Returns ``(value, d value / d a, d value / d b)``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    gammas = np.ascontiguousarray(gammas, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if USE_NUMBA:
        val, ga, gb = mmd2_grad_numba(a, b, gammas, weights)
        return float(val), ga, gb
    val, ga, gb = mmd2_grad_numpy(a, b, gammas, weights)
    return float(val), ga, gb


def pairwise_distances(x):
    """Euclidean distances over all unordered row pairs ``i < j``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if USE_NUMBA:
        return pairwise_distances_numba(x)
    return pairwise_distances_numpy(x)


def rank_metrics(sims, q_labels, g_labels, n_levels=PR_LEVELS):
    """Per-query AP and interpolated precision at ``n_levels`` recall points.

    Columns of ``sims`` must already be ordered by ascending gallery id: the
    sort is stable, so ties resolve to the lower id.
    """
    sims = np.ascontiguousarray(sims, dtype=np.float64)
    q_labels = np.ascontiguousarray(q_labels, dtype=np.int64)
    g_labels = np.ascontiguousarray(g_labels, dtype=np.int64)
    if USE_NUMBA:
        return rank_metrics_numba(sims, q_labels, g_labels, n_levels)
    return rank_metrics_numpy(sims, q_labels, g_labels, n_levels)
