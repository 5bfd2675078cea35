"""Classic and soft dynamic time warping for 1-D series.

Classic DTW (absolute-difference cost) is used to score reconstructions; the
soft-min relaxation is the differentiable training loss. Multichannel segments
are handled channel by channel and summed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .gradcore import Tensor, as_tensor, op_node

__all__ = [
    "DtwResult",
    "dtw",
    "softmin",
    "soft_dtw",
    "soft_dtw_grad",
    "soft_dtw_batch",
    "soft_alignment",
    "multichannel_loss",
    "soft_dtw_loss",
    "normalized_dtw_batch",
]

_COSTS = ("squared", "absolute")


@dataclass(frozen=True)
class DtwResult:
    raw_score: float
    path: list  # 0-based (i, j) pairs from (0, 0) to (n-1, m-1)
    normalized_score: float

    @property
    def path_length(self) -> int:
        return len(self.path)


def _as_series(a, name: str) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError(f"{name} is empty")
    return a


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return gamma


def _check_cost(cost: str) -> int:
    if cost not in _COSTS:
        raise ValueError(f"cost must be one of {_COSTS}, got {cost!r}")
    return _COSTS.index(cost)


def _band(window, n: int, m: int) -> int:
    # -1 disables the Sakoe-Chiba band
    if window is None:
        return -1
    return max(int(window), abs(n - m))


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _dtw_kernel(a, b, band):
    n, m = a.shape[0], b.shape[0]
    W = np.full((n, m), np.inf)
    for i in range(n):
        for j in range(m):
            if band >= 0 and abs(i - j) > band:
                continue
            d = abs(a[i] - b[j])
            if i == 0 and j == 0:
                W[i, j] = d
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = W[i - 1, j - 1]
            if j > 0 and W[i, j - 1] < best:
                best = W[i, j - 1]
            if i > 0 and W[i - 1, j] < best:
                best = W[i - 1, j]
            W[i, j] = d + best
    return W


@njit(cache=True, nogil=True)
def _dtw_backtrack(W):
    n, m = W.shape
    i, j = n - 1, m - 1
    path = np.empty((n + m, 2), dtype=np.int64)
    k = 0
    path[k, 0], path[k, 1] = i, j
    k += 1
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            diag, left, down = W[i - 1, j - 1], W[i, j - 1], W[i - 1, j]
            # ties: diagonal, then left, then down
            if diag <= left and diag <= down:
                i -= 1
                j -= 1
            elif left <= down:
                j -= 1
            else:
                i -= 1
        path[k, 0], path[k, 1] = i, j
        k += 1
    return path[:k][::-1]


@njit(cache=True, nogil=True)
def _normalized_dtw_many(A, B):
    # A, B: (P, T); returns normalized scores (P,)
    P = A.shape[0]
    out = np.empty(P)
    for p in range(P):
        W = _dtw_kernel(A[p], B[p], -1)
        path = _dtw_backtrack(W)
        out[p] = W[-1, -1] / path.shape[0]
    return out


@njit(cache=True, nogil=True)
def _pair_cost(x, y, kind):
    d = x - y
    if kind == 0:
        return d * d
    return abs(d)


@njit(cache=True, nogil=True)
def _soft_forward(a, b, gamma, kind, band, P):
    """Fill R and, when ``P`` has cells, the soft-min weights of each cell's
    three predecessors (diagonal, up, left)."""
    n, m = a.shape[0], b.shape[0]
    keep = P.shape[0] > 0
    inv_gamma = 1.0 / gamma
    R = np.full((n + 1, m + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, n + 1):
        lo, hi = 1, m
        if band >= 0:
            lo, hi = max(1, i - band), min(m, i + band)
        for j in range(lo, hi + 1):
            r1, r2, r3 = R[i - 1, j - 1], R[i - 1, j], R[i, j - 1]
            # the smallest term contributes exp(0) = 1 and needs no exp call
            if r1 <= r2 and r1 <= r3:
                rmin = r1
                e1 = 1.0
                e2 = _rel_exp(rmin - r2, inv_gamma)
                e3 = _rel_exp(rmin - r3, inv_gamma)
            elif r2 <= r3:
                rmin = r2
                e1 = _rel_exp(rmin - r1, inv_gamma)
                e2 = 1.0
                e3 = _rel_exp(rmin - r3, inv_gamma)
            else:
                rmin = r3
                e1 = _rel_exp(rmin - r1, inv_gamma)
                e2 = _rel_exp(rmin - r2, inv_gamma)
                e3 = 1.0
            s = e1 + e2 + e3
            r = _pair_cost(a[i - 1], b[j - 1], kind) + rmin
            R[i, j] = r if s == 1.0 else r - gamma * np.log(s)
            if keep:
                inv_s = 1.0 / s
                P[i, j, 0] = e1 * inv_s
                P[i, j, 1] = e2 * inv_s
                P[i, j, 2] = e3 * inv_s
    return R


@njit(cache=True, nogil=True, inline="always")
def _rel_exp(diff, inv_gamma):
    # exp of a non-positive gap; below -37 the term cannot change a sum that
    # already holds 1.0 in double precision, so it is dropped
    x = diff * inv_gamma
    if x < -37.0:
        return 0.0
    return np.exp(x)


@njit(cache=True, nogil=True)
def _soft_backward(a, b, P, kind):
    # E[i, j] = dR[n, m] / dD[i, j]: propagate back through the soft-min weights
    n, m = a.shape[0], b.shape[0]
    E = np.zeros((n + 2, m + 2))
    E[n, m] = 1.0
    for i in range(n, 0, -1):
        for j in range(m, 0, -1):
            if i == n and j == m:
                continue
            E[i, j] = (
                E[i + 1, j + 1] * P[i + 1, j + 1, 0]
                + E[i + 1, j] * P[i + 1, j, 1]
                + E[i, j + 1] * P[i, j + 1, 2]
            )
    ga = np.zeros(n)
    gb = np.zeros(m)
    for i in range(n):
        for j in range(m):
            e = E[i + 1, j + 1]
            if e == 0.0:
                continue
            d = a[i] - b[j]
            if kind == 0:
                g = 2.0 * d
            elif d > 0:
                g = 1.0
            elif d < 0:
                g = -1.0
            else:
                g = 0.0
            ga[i] += e * g
            gb[j] -= e * g
    return ga, gb, E[1 : n + 1, 1 : m + 1].copy()


@njit(cache=True, nogil=True)
def _soft_many(A, B, gamma, kind, band, want_grad):
    npairs, n = A.shape
    m = B.shape[1]
    vals = np.empty(npairs)
    GA = np.zeros((npairs, n))
    GB = np.zeros((npairs, m))
    if want_grad:
        P = np.zeros((n + 2, m + 2, 3))
    else:
        P = np.zeros((0, 0, 3))
    for p in range(npairs):
        R = _soft_forward(A[p], B[p], gamma, kind, band, P)
        vals[p] = R[n, m]
        if want_grad:
            ga, gb, _ = _soft_backward(A[p], B[p], P, kind)
            GA[p] = ga
            GB[p] = gb
    return vals, GA, GB


def _weights(n: int, m: int) -> np.ndarray:
    return np.zeros((n + 2, m + 2, 3))


_NO_WEIGHTS = np.zeros((0, 0, 3))


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def dtw(a, b, window: int | None = None) -> DtwResult:
    """Classic DTW with absolute-difference cost and backtracked optimal path.

    ``window`` enables a Sakoe-Chiba band (off by default).
    """
    a, b = _as_series(a, "a"), _as_series(b, "b")
    W = _dtw_kernel(a, b, _band(window, a.size, b.size))
    path = _dtw_backtrack(W)
    raw = float(W[-1, -1])
    return DtwResult(raw, [tuple(map(int, p)) for p in path], raw / path.shape[0])


def normalized_dtw_batch(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Normalized classic-DTW scores for matching rows of two (P, T) arrays."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2:
        raise ValueError(f"expected two equal (P, T) arrays, got {A.shape} and {B.shape}")
    return _normalized_dtw_many(A, B)


def softmin(values, gamma: float) -> float:
    """``-gamma * log(sum(exp(-v / gamma)))``, computed stably."""
    v = np.asarray(values, dtype=np.float64)
    gamma = _check_gamma(gamma)
    vmin = v.min()
    return float(vmin - gamma * np.log(np.exp(-(v - vmin) / gamma).sum()))


def soft_dtw(a, b, gamma: float = 1.0, cost: str = "squared", window: int | None = None) -> float:
    a, b = _as_series(a, "a"), _as_series(b, "b")
    R = _soft_forward(
        a, b, _check_gamma(gamma), _check_cost(cost), _band(window, a.size, b.size), _NO_WEIGHTS
    )
    return float(R[a.size, b.size])


def soft_dtw_grad(a, b, gamma: float = 1.0, cost: str = "squared", window: int | None = None):
    """Return ``(value, d/da, d/db)`` of :func:`soft_dtw`."""
    a, b = _as_series(a, "a"), _as_series(b, "b")
    gamma, kind = _check_gamma(gamma), _check_cost(cost)
    band = _band(window, a.size, b.size)
    P = _weights(a.size, b.size)
    R = _soft_forward(a, b, gamma, kind, band, P)
    ga, gb, _ = _soft_backward(a, b, P, kind)
    return float(R[a.size, b.size]), ga, gb


def soft_alignment(a, b, gamma: float = 1.0, cost: str = "squared") -> np.ndarray:
    """Expected alignment matrix: derivative of soft-DTW w.r.t. each pairwise cost."""
    a, b = _as_series(a, "a"), _as_series(b, "b")
    P = _weights(a.size, b.size)
    kind = _check_cost(cost)
    _soft_forward(a, b, _check_gamma(gamma), kind, -1, P)
    return _soft_backward(a, b, P, kind)[2]


def soft_dtw_batch(A, B, gamma: float = 1.0, cost: str = "squared", want_grad: bool = False):
    """Soft-DTW of matching rows of (P, n) and (P, m) arrays.

    Returns ``(values, dA, dB)``; the gradients are zero unless ``want_grad``.
    """
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError(f"expected (P, n) and (P, m) arrays, got {A.shape} and {B.shape}")
    return _soft_many(A, B, _check_gamma(gamma), _check_cost(cost), -1, want_grad)


def _channels(x) -> np.ndarray:
    arr = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a (C, T) segment, got shape {arr.shape}")
    return arr


def multichannel_loss(x, x_hat, gamma: float = 1.0, cost: str = "squared") -> float:
    """Sum over channels of soft-DTW between two (C, T) segments (unnormalized)."""
    xa, xb = _channels(x), _channels(x_hat)
    if xa.shape != xb.shape:
        raise ValueError(f"segment shapes differ: {xa.shape} vs {xb.shape}")
    vals, _, _ = soft_dtw_batch(xa, xb, gamma, cost)
    return float(sum(vals))


def soft_dtw_loss(target: np.ndarray, recon: Tensor, gamma: float = 1.0, cost: str = "squared"):
    """Batch loss: mean over segments of the summed channel-wise soft-DTW.

    ``target`` is (B, C, T) or (B, 1, C, T); ``recon`` must have the same shape.
    Returns ``(loss_tensor, per_segment_values)``.
    """
    recon = as_tensor(recon)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != recon.shape:
        raise ValueError(f"target shape {target.shape} != reconstruction shape {recon.shape}")
    nseg = target.shape[0]
    T = target.shape[-1]
    A = target.reshape(-1, T)
    B = recon.data.reshape(-1, T)
    vals, _, gB = soft_dtw_batch(A, B, gamma, cost, want_grad=recon.requires_grad)
    per_segment = vals.reshape(nseg, -1).sum(axis=1)
    shape = recon.shape

    def back(g):
        return (float(g) * gB.reshape(shape) / nseg,)

    return op_node(per_segment.mean(), (recon,), back, "soft_dtw_loss"), per_segment
