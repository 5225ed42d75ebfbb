"""Pure-numpy kernel set.

Fallback path selected with MALK_BACKEND=numpy. Matmuls go through BLAS, so
results agree with the numba kernels only to ~1e-12 relative: this path is
excluded from the bit-exactness guarantee that the default (numba) path makes.
Each path is individually deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def mm_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b


def mm_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b.T


def mm_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a.T @ b


def jacobi_orthogonalize(g: np.ndarray, r: np.ndarray, tol: float, max_sweeps: int) -> int:
    """One-sided Jacobi: orthogonalize the columns of ``g`` in place.

    Right rotations accumulate into ``r`` so that g_in @ r == g_out.
    Returns the number of sweeps performed.
    """
    q = g.shape[1]
    sweeps = 0
    for _ in range(max_sweeps):
        sweeps += 1
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                gi = g[:, i]
                gj = g[:, j]
                alpha = float(gi @ gi)
                beta = float(gj @ gj)
                gamma = float(gi @ gj)
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
                new_i = c * gi - s * gj
                new_j = s * gi + c * gj
                g[:, i] = new_i
                g[:, j] = new_j
                ri = r[:, i].copy()
                rj = r[:, j]
                r[:, i] = c * ri - s * rj
                r[:, j] = s * ri + c * rj
        if not rotated:
            break
    return sweeps


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
    """In-place AdamW step on flat views. bias_c* are 1 - beta**t."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    m_hat = m / bias_c1
    v_hat = v / bias_c2
    p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
