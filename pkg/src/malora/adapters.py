"""Single-expert adapters: plain LoRA and its frozen-down-projection variant.

Up-projections are stored rank-major (shape (r, m), i.e. the transpose of the
textbook m x r convention) so the hot matmuls run with a wide contiguous
inner dimension. merge_delta and all contracts are expressed in the usual
m x n orientation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .linalg import Rng, as_matrix, kaiming_uniform, matmul, matmul_tn, transpose


@dataclass
class LoraLayer:
    """One fine-tunable linear site: frozen base plus a low-rank delta.

    ``a_frozen`` switches the layer to asymmetric mode: the down-projection
    stays at its random init and only the up-projection trains, which is how
    the rank gets doubled at an unchanged trainable budget.
    """

    base_w: np.ndarray          # (m, n), frozen
    a: np.ndarray               # (r, n) down-projection
    b: np.ndarray               # (r, m) up-projection, rank-major storage
    rank: int
    alpha: float
    a_frozen: bool = False
    dropout_rate: float = 0.0
    name: str = "site0"
    base_wt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.base_w = as_matrix(self.base_w, "base_w")
        self.a = as_matrix(self.a, "a")
        self.b = as_matrix(self.b, "b")
        m, n = self.base_w.shape
        if self.a.shape != (self.rank, n):
            raise ShapeError(f"a must be ({self.rank}, {n}), got {self.a.shape}")
        if self.b.shape != (self.rank, m):
            raise ShapeError(f"b must be ({self.rank}, {m}), got {self.b.shape}")
        self.base_wt = transpose(self.base_w)

    @property
    def in_dim(self) -> int:
        return self.base_w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_w.shape[0]

    def param_specs(self) -> list[tuple[str, np.ndarray, bool]]:
        return [
            (f"{self.name}.a", self.a, not self.a_frozen),
            (f"{self.name}.b", self.b, True),
        ]

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.base_w": self.base_w,
            f"{self.name}.a": self.a,
            f"{self.name}.b": self.b,
        }


def init_lora(
    base_w: np.ndarray,
    rank: int,
    rng: Rng,
    alpha: float | None = None,
    a_frozen: bool = False,
    dropout_rate: float = 0.0,
    name: str = "site0",
) -> LoraLayer:
    """Down-projection Kaiming-uniform, up-projection zero, scale alpha/r.

    alpha defaults to 2r. For the asymmetric variant pass the already-doubled
    rank and a_frozen=True (see init_asylora).
    """
    base_w = as_matrix(base_w, "base_w")
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    m, n = base_w.shape
    a = kaiming_uniform(rank, n, rng)
    b = np.zeros((rank, m))
    return LoraLayer(
        base_w=base_w,
        a=a,
        b=b,
        rank=rank,
        alpha=float(alpha) if alpha is not None else 2.0 * rank,
        a_frozen=a_frozen,
        dropout_rate=dropout_rate,
        name=name,
    )


def init_asylora(
    base_w: np.ndarray,
    base_rank: int,
    rng: Rng,
    alpha: float | None = None,
    dropout_rate: float = 0.0,
    name: str = "site0",
) -> LoraLayer:
    """Asymmetric variant: rank doubled, down-projection frozen at init."""
    return init_lora(
        base_w,
        rank=2 * base_rank,
        rng=rng,
        alpha=alpha,
        a_frozen=True,
        dropout_rate=dropout_rate,
        name=name,
    )


def lora_forward(
    layer: LoraLayer,
    x: ad.Var,
    tape: ad.Tape,
    train: bool = False,
    dropout_gen: np.random.Generator | None = None,
) -> ad.Var:
    """x @ (W + (alpha/r) B A)^T computed in factored form.

    The delta is never materialized; dropout (train mode only) applies to the
    adapter-branch input while the base path sees the raw input.
    """
    if x.value.shape[1] != layer.in_dim:
        raise ShapeError(
            f"input has {x.value.shape[1]} cols, layer expects {layer.in_dim}"
        )
    base = tape.const(layer.base_wt)
    a_var = tape.param(f"{layer.name}.a", layer.a, trainable=not layer.a_frozen)
    b_var = tape.param(f"{layer.name}.b", layer.b, trainable=True)

    y = ad.matmul(x, base)
    branch = x
    if train and layer.dropout_rate > 0.0:
        if dropout_gen is None:
            raise ConfigError("dropout requires a seeded generator in train mode")
        branch = ad.dropout(branch, layer.dropout_rate, dropout_gen)
    h = ad.matmul(branch, a_var, transpose_b=True)
    up = ad.matmul(h, b_var)
    delta = ad.scale_by_const(up, layer.alpha / layer.rank)
    return ad.add(y, delta)


def merge_delta(layer: LoraLayer) -> np.ndarray:
    """(alpha/r) B A as a dense (m, n) matrix."""
    return (layer.alpha / layer.rank) * matmul_tn(layer.b, layer.a)


def base_forward(layer, x: np.ndarray) -> np.ndarray:
    """Frozen-path output x @ W^T, shared by every adapter variant."""
    return matmul(as_matrix(x), layer.base_wt)


def lora_param_count(m: int, n: int, r: int, asy: bool = False) -> tuple[int, int]:
    """(trainable, adapter-frozen) parameter counts for one site.

    Asymmetric mode doubles the rank, trains only the up side (2r * m) and
    carries the 2r x n down matrix as frozen ballast.
    """
    if r < 1:
        raise ConfigError(f"rank must be >= 1, got {r}")
    if m < 1 or n < 1:
        raise ConfigError(f"dims must be positive, got {m}x{n}")
    if asy:
        return 2 * r * m, 2 * r * n
    return r * n + m * r, 0
