"""Gaussian-kernel HSIC with per-variable median-heuristic bandwidths.

The statistic is the biased V-statistic ``trace(K H L H) / n**2``. Small
samples use dense Gram matrices. Larger ones use pivoted Cholesky factors
``K ~ A A^T`` stopped when the trace of the residual falls below
``tol * n`` (default ``tol=1e-12``), which bounds the error of the statistic
by ``tol``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import LsnmError, rng_from

DENSE_MAX_N = 2000
CHOLESKY_TOL = 1e-12


class AllIdentical(LsnmError, ValueError):
    pass


class LengthMismatch(LsnmError, ValueError):
    pass


@dataclass(frozen=True)
class HsicResult:
    statistic: float
    bandwidth_u: float
    bandwidth_v: float
    n: int


def _as_1d(u) -> np.ndarray:
    return np.asarray(u, dtype=np.float64).ravel()


def _median_sorted_pairs(s: np.ndarray) -> float:
    """Exact median of ``s[j] - s[i]`` over ``i < j`` for sorted ``s`` in O(n log n) per probe."""
    n = s.size
    m = n * (n - 1) // 2
    ranks = [m // 2, m // 2 + 1] if m % 2 == 0 else [m // 2 + 1]
    ii = np.arange(n)

    def count_le(t):
        return int((np.searchsorted(s, s + t, side="right") - ii - 1).sum())

    out = []
    for k in ranks:
        lo, hi = 0.0, float(s[-1] - s[0])
        # invariant: count_le(lo) < k <= count_le(hi)
        if count_le(0.0) >= k:
            out.append(0.0)
            continue
        while True:
            c_lo = count_le(lo)
            c_hi = count_le(hi)
            mid = 0.5 * (lo + hi)
            if c_hi - c_lo <= 4 * n or mid <= lo or mid >= hi:
                break
            if count_le(mid) >= k:
                hi = mid
            else:
                lo = mid
        left = np.searchsorted(s, s + lo, side="right")
        right = np.searchsorted(s, s + hi, side="right")
        cand = np.concatenate([s[a:b] - s[i] for i, (a, b) in enumerate(zip(left, right)) if b > a])
        cand.sort()
        out.append(float(cand[k - c_lo - 1]))
    return float(np.mean(out))


def median_bandwidth(u) -> float:
    """Median pairwise distance of ``u`` (smallest nonzero distance if the median is 0)."""
    u = _as_1d(u)
    if u.size < 2:
        raise ValueError("need at least 2 points")
    s = np.sort(u)
    if s[0] == s[-1]:
        raise AllIdentical("all values are identical")
    if u.size <= DENSE_MAX_N:
        iu = np.triu_indices(u.size, k=1)
        med = float(np.median(np.abs(u[:, None] - u[None, :])[iu]))
    else:
        med = _median_sorted_pairs(s)
    if med == 0.0:
        gaps = np.diff(s)
        med = float(gaps[gaps > 0].min())
    return med


def gaussian_gram(u, bandwidth: float) -> np.ndarray:
    u = _as_1d(u)
    return np.exp(-((u[:, None] - u[None, :]) ** 2) / (2.0 * bandwidth**2))


def pivoted_cholesky(u, bandwidth: float, tol: float = CHOLESKY_TOL, max_rank: Optional[int] = None) -> np.ndarray:
    """Factor ``A`` (n x r) with ``gaussian_gram(u) ~ A A^T`` and residual trace <= tol * n."""
    u = _as_1d(u)
    n = u.size
    max_rank = n if max_rank is None else min(max_rank, n)
    diag = np.ones(n)
    A = np.zeros((n, min(max_rank, 64)))
    r = 0
    limit = tol * n
    inv2s2 = 1.0 / (2.0 * bandwidth**2)
    while r < max_rank and diag.sum() > limit:
        p = int(np.argmax(diag))
        piv = diag[p]
        if piv <= 0:
            break
        if r == A.shape[1]:
            A = np.hstack([A, np.zeros((n, min(A.shape[1], max_rank - r)))])
        col = np.exp(-((u - u[p]) ** 2) * inv2s2) - A[:, :r] @ A[p, :r]
        col /= np.sqrt(piv)
        A[:, r] = col
        r += 1
        diag = np.maximum(diag - col * col, 0.0)
        diag[p] = 0.0
    return A[:, :r]


def _check_pair(u, v):
    u, v = _as_1d(u), _as_1d(v)
    if u.size != v.size:
        raise LengthMismatch(f"lengths differ: {u.size} vs {v.size}")
    if u.size < 4:
        raise ValueError("HSIC needs at least 4 points")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValueError("HSIC inputs must be finite")
    return u, v


def _centered(u, bw, dense: bool):
    if dense:
        K = gaussian_gram(u, bw)
        return K - K.mean(axis=0) - K.mean(axis=1)[:, None] + K.mean()
    A = pivoted_cholesky(u, bw)
    return A - A.mean(axis=0)


def _stat(Kc, Lc, dense: bool, n: int) -> float:
    if dense:
        val = float(np.einsum("ij,ij->", Kc, Lc)) / n**2
    else:
        val = float(np.sum((Kc.T @ Lc) ** 2)) / n**2
    return max(val, 0.0)


def hsic_statistic(u, v, dense: Optional[bool] = None) -> HsicResult:
    """Biased Gaussian-kernel HSIC V-statistic (rounding negatives clamped to 0)."""
    u, v = _check_pair(u, v)
    n = u.size
    bu, bv = median_bandwidth(u), median_bandwidth(v)
    dense = n <= DENSE_MAX_N if dense is None else dense
    stat = _stat(_centered(u, bu, dense), _centered(v, bv, dense), dense, n)
    return HsicResult(stat, bu, bv, n)


def hsic_permutation_test(u, v, n_permutations: int = 200, seed: int = 0, dense: Optional[bool] = None):
    """Diagnostic permutation test. Returns (statistic, p-value, null statistics)."""
    u, v = _check_pair(u, v)
    n = u.size
    bu, bv = median_bandwidth(u), median_bandwidth(v)
    dense = n <= DENSE_MAX_N if dense is None else dense
    Kc = _centered(u, bu, dense)
    if dense:
        L = gaussian_gram(v, bv)
    else:
        G = pivoted_cholesky(v, bv)
    Lc = _centered(v, bv, dense)
    stat = _stat(Kc, Lc, dense, n)
    rng = rng_from(seed, 0x9E3)
    null = np.empty(n_permutations)
    for b in range(n_permutations):
        p = rng.permutation(n)
        if dense:
            # Kc is centered, so L needs no centering here
            null[b] = float(np.einsum("ij,ij->", Kc, L[np.ix_(p, p)])) / n**2
        else:
            Gp = G[p]
            null[b] = float(np.sum((Kc.T @ (Gp - Gp.mean(axis=0))) ** 2)) / n**2
    pval = (1.0 + np.sum(null >= stat)) / (1.0 + n_permutations)
    return stat, float(pval), null
