"""Deterministic dense linear algebra over float64 matrices.

A "matrix" here is any 2-D C-contiguous float64 ndarray; every public
operation validates and returns that form. Matmul accumulates in 64-bit
with a fixed left-to-right summation order on the default (numba) backend,
so repeated runs produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import InvalidInput, RankDeficient, ShapeError

RNG_ALGORITHM = "pcg64"

_SVD_TOL = 1e-14
_SVD_MAX_SWEEPS = 60
_RANK_TOL = 1e-10


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={arr.ndim}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"{name} must have positive dims, got {arr.shape}")
    return arr


def require_finite(m: np.ndarray, name: str = "matrix") -> None:
    if not np.isfinite(m).all():
        raise InvalidInput(f"{name} contains non-finite entries")


@dataclass
class Rng:
    """Seeded PCG64 stream; the algorithm id travels into checkpoints.

    Identical seeds give identical draw sequences on every platform.
    """

    seed: int
    algorithm: str = RNG_ALGORITHM
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != RNG_ALGORITHM:
            raise InvalidInput(f"unknown rng algorithm {self.algorithm!r}")
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys: int) -> "Rng":
        """Independent substream identified by an integer key path."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(keys))
        rng = Rng.__new__(Rng)
        rng.seed = self.seed
        rng.algorithm = self.algorithm
        rng._gen = np.random.Generator(np.random.PCG64(seq))
        return rng

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


@dataclass
class SvdResult:
    """Thin SVD m = u @ diag(sigma) @ v with u (p x k), sigma (k,), v (k x q)."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return backend.mm_nn(a, b)


def matmul_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T without materializing the transpose in the caller."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt shape mismatch: {a.shape} @ {b.shape}.T")
    return backend.mm_nt(a, b)


def matmul_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a.T @ b."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn shape mismatch: {a.shape}.T @ {b.shape}")
    return backend.mm_tn(a, b)


def transpose(m: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(m).T)


def scale(m: np.ndarray, c: float) -> np.ndarray:
    return as_matrix(m) * float(c)


def frobenius_norm(m: np.ndarray) -> float:
    return float(np.linalg.norm(as_matrix(m)))


def kaiming_uniform(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """He-uniform draw on [-b, b] with b = sqrt(6 / fan_in), fan_in = cols.

    The row-vector-times-matrix convention used throughout makes cols the
    fan-in of the map x -> x @ w.T.
    """
    if rows < 1 or cols < 1:
        raise ShapeError(f"kaiming_uniform needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, (rows, cols))


def svd_thin(m: np.ndarray) -> SvdResult:
    """Thin SVD via one-sided Jacobi with a deterministic sign convention.

    Sign rule: the first nonzero entry of each right-singular row is made
    non-negative, with the matching left-singular column flipped, so the
    factorization is unique and reproducible.
    """
    m = as_matrix(m, "svd input")
    require_finite(m, "svd input")
    p, q = m.shape
    transposed = p < q
    work = np.ascontiguousarray(m.T) if transposed else m.copy()
    a, b = work.shape  # a >= b
    rot = np.eye(b)
    backend.jacobi_orthogonalize(work, rot, _SVD_TOL, _SVD_MAX_SWEEPS)

    sigma = np.sqrt(np.sum(work * work, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    cols = work[:, order]
    rot = rot[:, order]

    u_cols = np.empty_like(cols)
    cutoff = sigma[0] * 1e-300 if sigma[0] > 0 else 0.0
    for j in range(b):
        if sigma[j] > cutoff and sigma[j] > 0.0:
            u_cols[:, j] = cols[:, j] / sigma[j]
        else:
            sigma[j] = 0.0
            u_cols[:, j] = _complete_column(u_cols, j, a)

    v_rows = np.ascontiguousarray(rot.T)  # work_in = u_cols * sigma @ v_rows

    if transposed:
        u = np.ascontiguousarray(v_rows.T)
        v = np.ascontiguousarray(u_cols.T)
    else:
        u = np.ascontiguousarray(u_cols)
        v = v_rows

    _fix_signs(u, v)
    return SvdResult(u=u, sigma=sigma, v=v)


def _complete_column(u_cols: np.ndarray, j: int, dim: int) -> np.ndarray:
    # Deterministic orthonormal fill for a zero singular direction: take the
    # canonical basis vector with the largest residual after Gram-Schmidt
    # against the columns already placed (some residual always exceeds
    # sqrt((dim - j) / dim) > 0), then re-orthogonalize once for accuracy.
    best = None
    best_norm = 0.0
    for k in range(dim):
        cand = np.zeros(dim)
        cand[k] = 1.0
        for i in range(j):
            cand -= (u_cols[:, i] @ cand) * u_cols[:, i]
        norm = np.linalg.norm(cand)
        if norm > best_norm:
            best, best_norm = cand, norm
        if norm > 0.9:
            break
    if best is None or best_norm == 0.0:
        raise InvalidInput("could not complete orthonormal basis")
    for i in range(j):
        best -= (u_cols[:, i] @ best) * u_cols[:, i]
    return best / np.linalg.norm(best)


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    for i in range(v.shape[0]):
        row = v[i]
        nz = np.nonzero(row)[0]
        if nz.size and row[nz[0]] < 0.0:
            v[i] = -row
            u[:, i] = -u[:, i]


def orthonormal_basis(m: np.ndarray) -> np.ndarray:
    """Orthonormal rows spanning the row space of ``m`` (same row count).

    Twice-through modified Gram-Schmidt; full row rank within 1e-10 is a
    precondition, checked against the singular spectrum.
    """
    m = as_matrix(m, "basis input")
    require_finite(m, "basis input")
    rows, cols = m.shape
    if rows > cols:
        raise RankDeficient(
            f"{rows} rows cannot be independent in dimension {cols}", rank=cols
        )
    sigma = svd_thin(m).sigma
    rank = int(np.sum(sigma > _RANK_TOL * sigma[0])) if sigma[0] > 0 else 0
    if rank < rows:
        raise RankDeficient(
            f"matrix has numerical rank {rank} < {rows} rows", rank=rank
        )
    q = np.empty_like(m)
    for i in range(rows):
        vec = m[i].copy()
        for _ in range(2):  # second pass restores orthogonality lost to cancellation
            for k in range(i):
                vec -= (q[k] @ vec) * q[k]
        q[i] = vec / np.linalg.norm(vec)
    return q
