"""Numba-jitted kernel set (default path).

All matmul kernels accumulate each output element over k in ascending order
(left-to-right, no reassociation: fastmath stays off), which pins the exact
bit pattern of every result for a given input. The numpy fallback in
_kernels_numpy matches these within ~1e-12 relative but not bitwise.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NAME = "numba"

_ROW_BLOCK = 16  # output rows per block; keeps the streamed B panel hot in cache


@njit(cache=True)
def mm_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    k4 = 4 * (k // 4)
    for i0 in range(0, m, _ROW_BLOCK):
        i1 = min(i0 + _ROW_BLOCK, m)
        # four k-steps per pass over the output row; each out[i, j] still
        # accumulates strictly in ascending k (left-to-right adds)
        for kk in range(0, k4, 4):
            for i in range(i0, i1):
                a0 = a[i, kk]
                a1 = a[i, kk + 1]
                a2 = a[i, kk + 2]
                a3 = a[i, kk + 3]
                for j in range(n):
                    out[i, j] = (
                        ((out[i, j] + a0 * b[kk, j]) + a1 * b[kk + 1, j])
                        + a2 * b[kk + 2, j]
                    ) + a3 * b[kk + 3, j]
        for kk in range(k4, k):
            for i in range(i0, i1):
                aik = a[i, kk]
                for j in range(n):
                    out[i, j] += aik * b[kk, j]
    return out


@njit(cache=True)
def mm_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a @ b.T; b is copied transposed so the inner loop stays contiguous.
    bt = np.ascontiguousarray(b.T)
    return mm_nn(a, bt)


@njit(cache=True)
def mm_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a.T @ b with k (rows of both operands) as the outer loop: still ascending.
    k, m = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    k4 = 4 * (k // 4)
    for kk in range(0, k4, 4):
        for i in range(m):
            a0 = a[kk, i]
            a1 = a[kk + 1, i]
            a2 = a[kk + 2, i]
            a3 = a[kk + 3, i]
            for j in range(n):
                out[i, j] = (
                    ((out[i, j] + a0 * b[kk, j]) + a1 * b[kk + 1, j])
                    + a2 * b[kk + 2, j]
                ) + a3 * b[kk + 3, j]
    for kk in range(k4, k):
        for i in range(m):
            aki = a[kk, i]
            for j in range(n):
                out[i, j] += aki * b[kk, j]
    return out


@njit(cache=True)
def jacobi_orthogonalize(g: np.ndarray, r: np.ndarray, tol: float, max_sweeps: int) -> int:
    p, q = g.shape
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for row in range(p):
                    gi = g[row, i]
                    gj = g[row, j]
                    alpha += gi * gi
                    beta += gj * gj
                    gamma += gi * gj
                if alpha == 0.0 or beta == 0.0:
                    continue
                if abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0.0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for row in range(p):
                    gi = g[row, i]
                    gj = g[row, j]
                    g[row, i] = c * gi - s * gj
                    g[row, j] = s * gi + c * gj
                for row in range(q):
                    ri = r[row, i]
                    rj = r[row, j]
                    r[row, i] = c * ri - s * rj
                    r[row, j] = s * ri + c * rj
        if not rotated:
            break
    return sweeps


@njit(cache=True)
def adamw_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
    bias_c1: float,
    bias_c2: float,
) -> None:
    for i in range(p.size):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m_hat = m[i] / bias_c1
        v_hat = v[i] / bias_c2
        p[i] -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p[i])
