"""Mixture-of-adapter layers: top-K routing, the shared-subspace layer with
its SVD-crop initialization, rank-reallocation geometry, the load-balance
loss, and the parameter/FLOP budget arithmetic.

Layer output convention is y = x @ W^T for a frozen base W plus gated expert
deltas. Per-expert up-projections are stored rank-major like adapters.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .linalg import Rng, as_matrix, kaiming_uniform, matmul, matmul_tn, svd_thin, transpose


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def derive_geometry(r: int, n_experts: int, lam: float) -> tuple[int, int]:
    """Shared-subspace rank d = round(lam * r * N) and the expert rank the
    saved parameters buy back, r_bar = r + round((1 - lam) * r).

    Rounding is half-up; lam = 1 degenerates to no reallocation (d = rN,
    r_bar = r).
    """
    if not 0.0 < lam <= 1.0:
        raise ConfigError(f"lambda must lie in (0, 1], got {lam}")
    if r < 1 or n_experts < 1:
        raise ConfigError(f"need r >= 1 and n_experts >= 1, got r={r}, N={n_experts}")
    d = _round_half_up(lam * r * n_experts)
    r_bar = r + _round_half_up((1.0 - lam) * r)
    return d, r_bar


@dataclass(frozen=True)
class MaloraGeometry:
    """The (N, r, lambda, d, r_bar, beta, K) tuple plus the site dims."""

    n_experts: int
    base_rank: int
    lam: float
    shared_rank: int     # d
    expanded_rank: int   # r_bar
    beta: float = 1.0
    top_k: int = 2
    in_dim: int = 0
    out_dim: int = 0

    def __post_init__(self):
        if self.shared_rank < 1 or self.expanded_rank < 1:
            raise ConfigError("d and r_bar must be >= 1")
        if self.top_k > self.n_experts:
            raise ConfigError(
                f"top_k={self.top_k} exceeds n_experts={self.n_experts}"
            )
        if self.expanded_rank > self.shared_rank:
            raise ConfigError(
                f"r_bar={self.expanded_rank} must not exceed d={self.shared_rank}"
            )
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in (0, 1], got {self.lam}")
        if self.beta <= 0.0:
            raise ConfigError(f"beta must be positive, got {self.beta}")

    @classmethod
    def from_lambda(
        cls,
        n_experts: int,
        base_rank: int,
        lam: float,
        beta: float = 1.0,
        top_k: int = 2,
        in_dim: int = 0,
        out_dim: int = 0,
    ) -> "MaloraGeometry":
        d, r_bar = derive_geometry(base_rank, n_experts, lam)
        return cls(n_experts, base_rank, lam, d, r_bar, beta, top_k, in_dim, out_dim)

    @classmethod
    def explicit(
        cls,
        n_experts: int,
        base_rank: int,
        shared_rank: int,
        expanded_rank: int,
        beta: float = 1.0,
        top_k: int = 2,
        in_dim: int = 0,
        out_dim: int = 0,
    ) -> "MaloraGeometry":
        """Direct (d, r_bar) as for the small preset; lambda is derived back
        from d alone and the coupling to r_bar is not enforced."""
        lam = shared_rank / (base_rank * n_experts)
        return cls(n_experts, base_rank, lam, shared_rank, expanded_rank, beta, top_k, in_dim, out_dim)

    def with_dims(self, in_dim: int, out_dim: int) -> "MaloraGeometry":
        return replace(self, in_dim=in_dim, out_dim=out_dim)


def bound_ratio(r_bar: int, r: int) -> float:
    """sqrt(r_bar / r): how far the generalization bound stretches when the
    expert rank expands at a matched budget."""
    if r < 1:
        raise ConfigError(f"r must be >= 1, got {r}")
    return float(np.sqrt(r_bar / r))


# ---------------------------------------------------------------- routing


@dataclass
class RouterStats:
    """Per-batch routing summary used by the balance loss and diagnostics."""

    selection_fraction: np.ndarray  # (N,), sums to top_k
    mean_probs: np.ndarray          # (N,), full-softmax means
    mask: np.ndarray                # (batch, N) bool, exactly K true per row
    probs: ad.Var                   # tape handle for the differentiable path
    n_experts: int
    top_k: int


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    """Boolean top-k per row; ties keep the lowest expert index."""
    order = np.argsort(-probs, axis=1, kind="stable")
    mask = np.zeros(probs.shape, dtype=bool)
    rows = np.arange(probs.shape[0])[:, None]
    mask[rows, order[:, :k]] = True
    return mask


def route(
    router_w_var: ad.Var,
    x: ad.Var,
    k: int,
    renormalize: bool = False,
) -> tuple[ad.Var, RouterStats]:
    """Top-K softmax gates: softmax over all experts, keep the K largest
    values per row, zero the rest. No renormalization by default; the
    optional mode re-softmaxes over the selected logits instead.
    """
    n_experts = router_w_var.value.shape[0]
    if k > n_experts:
        raise ConfigError(f"top_k={k} exceeds n_experts={n_experts}")
    if k < 1:
        raise ConfigError(f"top_k must be >= 1, got {k}")
    logits = ad.matmul(x, router_w_var, transpose_b=True)
    probs = ad.softmax_rows(logits)
    mask = top_k_mask(probs.value, k)
    if renormalize:
        gates = ad.masked_softmax_rows(logits, mask)
    else:
        gates = ad.mask_select(probs, mask)
    stats = RouterStats(
        selection_fraction=mask.mean(axis=0),
        mean_probs=probs.value.mean(axis=0),
        mask=mask,
        probs=probs,
        n_experts=n_experts,
        top_k=k,
    )
    return gates, stats


def balance_loss(stats: RouterStats, factor: float) -> ad.Var:
    """Switch-style load penalty: factor * N * sum_i f_i * p_i.

    f_i is the (non-differentiable) fraction of rows that selected expert i;
    p_i is the mean softmax probability, through which gradient flows.
    """
    tape = stats.probs.tape
    mean_p = ad.mean_rows(stats.probs)
    f_const = tape.const(stats.selection_fraction[None, :])
    dot = ad.sum_all(ad.hadamard(mean_p, f_const))
    return ad.scale_by_const(dot, factor * stats.n_experts)


# ---------------------------------------------------------------- MoLoRA


@dataclass
class MoloraLayer:
    """N independent low-rank experts behind a learned top-K router."""

    base_w: np.ndarray
    downs: list[np.ndarray]     # N x (r, n)
    ups: list[np.ndarray]       # N x (r, m), rank-major; zero at init
    router_w: np.ndarray        # (N, n)
    rank: int
    alpha: float
    top_k: int
    balance_factor: float = 0.001
    a_frozen: bool = False      # True = asymmetric experts (MoAsyLoRA)
    dropout_rate: float = 0.0
    renormalize_gates: bool = False
    name: str = "site0"
    base_wt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.base_w = as_matrix(self.base_w, "base_w")
        self.base_wt = transpose(self.base_w)

    @property
    def n_experts(self) -> int:
        return len(self.downs)

    @property
    def in_dim(self) -> int:
        return self.base_w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_w.shape[0]

    def param_specs(self) -> list[tuple[str, np.ndarray, bool]]:
        specs = [(f"{self.name}.router_w", self.router_w, True)]
        for t in range(self.n_experts):
            specs.append((f"{self.name}.e{t}.a", self.downs[t], not self.a_frozen))
            specs.append((f"{self.name}.e{t}.b", self.ups[t], True))
        return specs

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}.base_w": self.base_w, f"{self.name}.router_w": self.router_w}
        for t in range(self.n_experts):
            out[f"{self.name}.e{t}.a"] = self.downs[t]
            out[f"{self.name}.e{t}.b"] = self.ups[t]
        return out

    def expert_delta(self, t: int) -> np.ndarray:
        return (self.alpha / self.rank) * matmul_tn(self.ups[t], self.downs[t])


def init_molora(
    base_w: np.ndarray,
    n_experts: int,
    rank: int,
    top_k: int,
    rng: Rng,
    alpha: float | None = None,
    balance_factor: float = 0.001,
    asy: bool = False,
    identical_expert_init: bool = False,
    dropout_rate: float = 0.0,
    renormalize_gates: bool = False,
    name: str = "site0",
) -> MoloraLayer:
    """Experts initialized like single LoRA sites; asy doubles the rank and
    freezes every down-projection. identical_expert_init gives all experts
    the same down draw (the "same A_t" ablation)."""
    base_w = as_matrix(base_w, "base_w")
    if top_k > n_experts:
        raise ConfigError(f"top_k={top_k} exceeds n_experts={n_experts}")
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    m, n = base_w.shape
    eff_rank = 2 * rank if asy else rank
    if identical_expert_init:
        shared = kaiming_uniform(eff_rank, n, rng)
        downs = [shared.copy() for _ in range(n_experts)]
    else:
        downs = [kaiming_uniform(eff_rank, n, rng) for _ in range(n_experts)]
    ups = [np.zeros((eff_rank, m)) for _ in range(n_experts)]
    router_w = kaiming_uniform(n_experts, n, rng)
    return MoloraLayer(
        base_w=base_w,
        downs=downs,
        ups=ups,
        router_w=router_w,
        rank=eff_rank,
        alpha=float(alpha) if alpha is not None else 2.0 * eff_rank,
        top_k=top_k,
        balance_factor=balance_factor,
        a_frozen=asy,
        dropout_rate=dropout_rate,
        renormalize_gates=renormalize_gates,
        name=name,
    )


def molora_forward(
    layer: MoloraLayer,
    x: ad.Var,
    tape: ad.Tape,
    train: bool = False,
    dropout_gen: np.random.Generator | None = None,
) -> tuple[ad.Var, RouterStats]:
    """y = x W^T + sum_t G_t (alpha/r) x (B_t A_t)^T over selected experts.

    Each expert only ever sees the rows routed to it.
    """
    if x.value.shape[1] != layer.in_dim:
        raise ShapeError(
            f"input has {x.value.shape[1]} cols, layer expects {layer.in_dim}"
        )
    batch = x.value.shape[0]
    base = tape.const(layer.base_wt)
    router_var = tape.param(f"{layer.name}.router_w", layer.router_w, trainable=True)
    y = ad.matmul(x, base)

    gates, stats = route(router_var, x, layer.top_k, layer.renormalize_gates)

    branch = x
    if train and layer.dropout_rate > 0.0:
        if dropout_gen is None:
            raise ConfigError("dropout requires a seeded generator in train mode")
        branch = ad.dropout(branch, layer.dropout_rate, dropout_gen)

    # alpha/r folded into the (batch, N) gate matrix: one tiny scale node
    # instead of one full-width scale per expert
    scaled_gates = ad.scale_by_const(gates, layer.alpha / layer.rank)
    parts: list[ad.Var] = []
    idx_list: list[np.ndarray] = []
    for t in range(layer.n_experts):
        a_var = tape.param(f"{layer.name}.e{t}.a", layer.downs[t], trainable=not layer.a_frozen)
        b_var = tape.param(f"{layer.name}.e{t}.b", layer.ups[t], trainable=True)
        idx = np.nonzero(stats.mask[:, t])[0]
        if idx.size == 0:
            continue
        xt = ad.gather_rows(branch, idx)
        h = ad.matmul(xt, a_var, transpose_b=True)
        out = ad.matmul(h, b_var)
        parts.append(ad.row_gate_scale(out, scaled_gates, idx, t))
        idx_list.append(idx)
    if parts:
        y = ad.add(y, ad.scatter_sum(parts, idx_list, batch))
    return y, stats


# ---------------------------------------------------------------- MALoRA


@dataclass(frozen=True)
class AblationFlags:
    """The five published ablation switches.

    The "without asymmetry" variant is a geometry (lambda = 1), not a flag.
    """

    freeze_s_a: bool = False
    freeze_p_t: bool = False
    decompose_b_side: bool = False
    shared_subspace_enabled: bool = True


@dataclass
class MaloraLayer:
    """Experts share one trainable down-subspace; each keeps a small
    coefficient matrix and an expanded-rank up-projection.

    Field roles depend on the ablation flags:

    - shared (default): s_a (d, n); coeffs[t] (r_bar, d); ups[t] (r_bar, m).
    - shared_subspace_enabled=False: downs[t] (d/N, n) replace s_a and
      coeffs[t] become (r_bar, d/N).
    - decompose_b_side: the structure mirrors onto the up side: s_b (d, m)
      holds the shared up-subspace transposed, coeffs[t] (d, r_bar) are the
      per-expert column coefficients and downs[t] (r_bar, n) are the plain
      zero-initialized down-projections.
    """

    base_w: np.ndarray
    geometry: MaloraGeometry
    router_w: np.ndarray
    alpha: float
    flags: AblationFlags = AblationFlags()
    s_a: np.ndarray | None = None
    s_b: np.ndarray | None = None
    coeffs: list[np.ndarray] = field(default_factory=list)
    ups: list[np.ndarray] = field(default_factory=list)
    downs: list[np.ndarray] = field(default_factory=list)
    balance_factor: float = 0.001
    dropout_rate: float = 0.0
    renormalize_gates: bool = False
    name: str = "site0"
    base_wt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.base_w = as_matrix(self.base_w, "base_w")
        self.base_wt = transpose(self.base_w)

    @property
    def n_experts(self) -> int:
        return self.geometry.n_experts

    @property
    def in_dim(self) -> int:
        return self.base_w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base_w.shape[0]

    def param_specs(self) -> list[tuple[str, np.ndarray, bool]]:
        f = self.flags
        specs = [(f"{self.name}.router_w", self.router_w, True)]
        if f.decompose_b_side:
            specs.append((f"{self.name}.s_b", self.s_b, not f.freeze_s_a))
            for t in range(self.n_experts):
                specs.append((f"{self.name}.e{t}.q", self.coeffs[t], not f.freeze_p_t))
                specs.append((f"{self.name}.e{t}.a", self.downs[t], True))
        elif f.shared_subspace_enabled:
            specs.append((f"{self.name}.s_a", self.s_a, not f.freeze_s_a))
            for t in range(self.n_experts):
                specs.append((f"{self.name}.e{t}.p", self.coeffs[t], not f.freeze_p_t))
                specs.append((f"{self.name}.e{t}.b", self.ups[t], True))
        else:
            for t in range(self.n_experts):
                specs.append((f"{self.name}.e{t}.s", self.downs[t], not f.freeze_s_a))
                specs.append((f"{self.name}.e{t}.p", self.coeffs[t], not f.freeze_p_t))
                specs.append((f"{self.name}.e{t}.b", self.ups[t], True))
        return specs

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"{self.name}.base_w": self.base_w, f"{self.name}.router_w": self.router_w}
        for key, arr, _ in self.param_specs():
            if key != f"{self.name}.router_w":
                out[key] = arr
        return out

    def expert_delta(self, t: int) -> np.ndarray:
        """Dense (m, n) delta of expert t including the alpha/r_bar scale."""
        f = self.flags
        scale = self.alpha / self.geometry.expanded_rank
        if f.decompose_b_side:
            # W_t = S_B Q_t A_t with s_b = S_B^T
            return scale * matmul_tn(self.s_b, matmul(self.coeffs[t], self.downs[t]))
        if f.shared_subspace_enabled:
            return scale * matmul_tn(self.ups[t], matmul(self.coeffs[t], self.s_a))
        return scale * matmul_tn(self.ups[t], matmul(self.coeffs[t], self.downs[t]))

    def effective_down(self, t: int) -> np.ndarray:
        """Expert t's composite down-projection (rows span its input space)."""
        f = self.flags
        if f.decompose_b_side:
            return self.downs[t]
        if f.shared_subspace_enabled:
            return matmul(self.coeffs[t], self.s_a)
        return matmul(self.coeffs[t], self.downs[t])

    def effective_up(self, t: int) -> np.ndarray:
        """Expert t's composite up-projection, rank-major (rows span output)."""
        f = self.flags
        if f.decompose_b_side:
            return matmul_tn(self.coeffs[t], self.s_b)
        return self.ups[t]


def malora_init(geometry: MaloraGeometry, rng: Rng) -> tuple[np.ndarray, list[np.ndarray]]:
    """SVD-crop initialization of the shared subspace and coefficients.

    Every expert draws its own Kaiming-uniform seed matrix K_t (d x n) and a
    thin SVD of it; coefficients take the first r_bar rows of U_t Sigma_t
    scaled by 1/beta, while the shared matrix is beta times the right factor
    of the first draw. Expert 0's product therefore reproduces the first
    r_bar rows of K_0 exactly, independent of beta.
    """
    n = geometry.in_dim
    d = geometry.shared_rank
    if n < 1:
        raise ConfigError("geometry must carry in_dim to initialize")
    if d > n:
        raise ConfigError(f"shared rank d={d} cannot exceed in_dim n={n}")
    beta = geometry.beta
    s_a = None
    coeffs = []
    for t in range(geometry.n_experts):
        k_t = kaiming_uniform(d, n, rng)
        res = svd_thin(k_t)
        us = res.u * res.sigma[None, :]
        coeffs.append(np.ascontiguousarray(us[: geometry.expanded_rank]) / beta)
        if t == 0:
            s_a = beta * res.v
    return s_a, coeffs


def init_malora(
    base_w: np.ndarray,
    geometry: MaloraGeometry,
    rng: Rng,
    alpha: float | None = None,
    balance_factor: float = 0.001,
    flags: AblationFlags = AblationFlags(),
    dropout_rate: float = 0.0,
    renormalize_gates: bool = False,
    name: str = "site0",
) -> MaloraLayer:
    base_w = as_matrix(base_w, "base_w")
    m, n = base_w.shape
    geometry = geometry.with_dims(n, m)
    d = geometry.shared_rank
    r_bar = geometry.expanded_rank
    beta = geometry.beta
    n_experts = geometry.n_experts
    if flags.decompose_b_side and not flags.shared_subspace_enabled:
        raise ConfigError("decompose_b_side requires the shared subspace")

    s_a = s_b = None
    coeffs: list[np.ndarray] = []
    ups: list[np.ndarray] = []
    downs: list[np.ndarray] = []

    if flags.decompose_b_side:
        if d > m:
            raise ConfigError(f"shared rank d={d} cannot exceed out_dim m={m}")
        for t in range(n_experts):
            k_t = kaiming_uniform(m, d, rng)
            res = svd_thin(k_t)  # u (m, d), v (d, d)
            q_t = (res.sigma[:, None] * res.v[:, :r_bar]) / beta
            coeffs.append(np.ascontiguousarray(q_t))
            if t == 0:
                s_b = np.ascontiguousarray(beta * res.u.T)
            downs.append(np.zeros((r_bar, n)))
    elif flags.shared_subspace_enabled:
        s_a, coeffs = malora_init(geometry, rng)
        ups = [np.zeros((r_bar, m)) for _ in range(n_experts)]
    else:
        if d % n_experts != 0:
            raise ConfigError(
                f"non-shared ablation needs d divisible by N, got d={d}, N={n_experts}"
            )
        d_per = d // n_experts
        for t in range(n_experts):
            k_t = kaiming_uniform(d_per, n, rng)
            downs.append(beta * svd_thin(k_t).v)
            coeffs.append(kaiming_uniform(r_bar, d_per, rng) / beta)
            ups.append(np.zeros((r_bar, m)))

    router_w = kaiming_uniform(n_experts, n, rng)
    return MaloraLayer(
        base_w=base_w,
        geometry=geometry,
        router_w=router_w,
        alpha=float(alpha) if alpha is not None else 2.0 * r_bar,
        flags=flags,
        s_a=s_a,
        s_b=s_b,
        coeffs=coeffs,
        ups=ups,
        downs=downs,
        balance_factor=balance_factor,
        dropout_rate=dropout_rate,
        renormalize_gates=renormalize_gates,
        name=name,
    )


def malora_forward(
    layer: MaloraLayer,
    x: ad.Var,
    tape: ad.Tape,
    train: bool = False,
    dropout_gen: np.random.Generator | None = None,
) -> tuple[ad.Var, RouterStats]:
    """Shared projection first, then per-expert work in the low-rank space.

    The batch is projected onto the shared subspace exactly once; experts
    consume gathered rows of that projection. This ordering is the layer's
    contract: it is where the latency advantage over independent experts
    comes from.
    """
    if x.value.shape[1] != layer.in_dim:
        raise ShapeError(
            f"input has {x.value.shape[1]} cols, layer expects {layer.in_dim}"
        )
    f = layer.flags
    batch = x.value.shape[0]
    base = tape.const(layer.base_wt)
    router_var = tape.param(f"{layer.name}.router_w", layer.router_w, trainable=True)
    y = ad.matmul(x, base)

    gates, stats = route(router_var, x, layer.geometry.top_k, layer.renormalize_gates)

    branch = x
    if train and layer.dropout_rate > 0.0:
        if dropout_gen is None:
            raise ConfigError("dropout requires a seeded generator in train mode")
        branch = ad.dropout(branch, layer.dropout_rate, dropout_gen)

    scaled_gates = ad.scale_by_const(gates, layer.alpha / layer.geometry.expanded_rank)
    parts: list[ad.Var] = []
    idx_list: list[np.ndarray] = []

    if f.decompose_b_side:
        s_b_var = tape.param(f"{layer.name}.s_b", layer.s_b, trainable=not f.freeze_s_a)
        for t in range(layer.n_experts):
            q_var = tape.param(f"{layer.name}.e{t}.q", layer.coeffs[t], trainable=not f.freeze_p_t)
            a_var = tape.param(f"{layer.name}.e{t}.a", layer.downs[t], trainable=True)
            idx = np.nonzero(stats.mask[:, t])[0]
            if idx.size == 0:
                continue
            xt = ad.gather_rows(branch, idx)
            h = ad.matmul(xt, a_var, transpose_b=True)       # (rows, r_bar)
            z = ad.matmul(h, q_var, transpose_b=True)        # (rows, d)
            out = ad.matmul(z, s_b_var)                      # (rows, m)
            parts.append(ad.row_gate_scale(out, scaled_gates, idx, t))
            idx_list.append(idx)
    elif f.shared_subspace_enabled:
        s_a_var = tape.param(f"{layer.name}.s_a", layer.s_a, trainable=not f.freeze_s_a)
        h_shared = ad.matmul(branch, s_a_var, transpose_b=True)  # once per batch
        for t in range(layer.n_experts):
            p_var = tape.param(f"{layer.name}.e{t}.p", layer.coeffs[t], trainable=not f.freeze_p_t)
            b_var = tape.param(f"{layer.name}.e{t}.b", layer.ups[t], trainable=True)
            idx = np.nonzero(stats.mask[:, t])[0]
            if idx.size == 0:
                continue
            ht = ad.gather_rows(h_shared, idx)
            z = ad.matmul(ht, p_var, transpose_b=True)       # (rows, r_bar)
            out = ad.matmul(z, b_var)                        # (rows, m)
            parts.append(ad.row_gate_scale(out, scaled_gates, idx, t))
            idx_list.append(idx)
    else:
        for t in range(layer.n_experts):
            s_var = tape.param(f"{layer.name}.e{t}.s", layer.downs[t], trainable=not f.freeze_s_a)
            p_var = tape.param(f"{layer.name}.e{t}.p", layer.coeffs[t], trainable=not f.freeze_p_t)
            b_var = tape.param(f"{layer.name}.e{t}.b", layer.ups[t], trainable=True)
            idx = np.nonzero(stats.mask[:, t])[0]
            if idx.size == 0:
                continue
            xt = ad.gather_rows(branch, idx)
            h = ad.matmul(xt, s_var, transpose_b=True)
            z = ad.matmul(h, p_var, transpose_b=True)
            out = ad.matmul(z, b_var)
            parts.append(ad.row_gate_scale(out, scaled_gates, idx, t))
            idx_list.append(idx)

    if parts:
        y = ad.add(y, ad.scatter_sum(parts, idx_list, batch))
    return y, stats


# ---------------------------------------------------------------- budgets


_METHODS = ("lora", "asylora", "molora", "moasylora", "malora")


@dataclass(frozen=True)
class BudgetConfig:
    """Knobs the budget arithmetic needs; a subset of a full run config."""

    r: int = 8
    n_experts: int = 8
    top_k: int = 2
    d: int = 32
    r_bar: int = 12
    freeze_s_a: bool = False
    freeze_p_t: bool = False


def param_budget(
    method: str,
    dims: list[tuple[int, int]],
    config: BudgetConfig,
    base_params: int | None = None,
) -> dict:
    """Exact trainable/frozen counts across a list of (m, n) sites.

    Frozen counts the adapter-side frozen tensors only (base weights are
    reported through percent_of_base against ``base_params``).
    """
    if method not in _METHODS:
        raise ConfigError(f"unknown method {method!r}")
    r, n_exp = config.r, config.n_experts
    adapter = router = frozen = 0
    for m, n in dims:
        if method == "lora":
            adapter += r * n + m * r
        elif method == "asylora":
            adapter += 2 * r * m
            frozen += 2 * r * n
        elif method == "molora":
            adapter += n_exp * (r * n + m * r)
            router += n_exp * n
        elif method == "moasylora":
            adapter += n_exp * 2 * r * m
            frozen += n_exp * 2 * r * n
            router += n_exp * n
        else:  # malora
            d, r_bar = config.d, config.r_bar
            shared = d * n
            coeff = n_exp * r_bar * d
            ups = n_exp * m * r_bar
            if config.freeze_s_a:
                frozen += shared
            else:
                adapter += shared
            if config.freeze_p_t:
                frozen += coeff
            else:
                adapter += coeff
            adapter += ups
            router += n_exp * n
    out = {
        "adapter_trainable": adapter,
        "router_trainable": router,
        "trainable": adapter + router,
        "frozen": frozen,
    }
    if base_params:
        out["percent_of_base"] = 100.0 * (adapter + router) / base_params
    return out


def flop_budget(
    method: str,
    dims: list[tuple[int, int]],
    config: BudgetConfig,
    batch: int = 1,
) -> dict:
    """Adapter-path multiply-add model per input row (base path excluded).

    The shared-projection term d*n is amortized over the ``batch`` rows that
    share the projection matrix: it models the per-step cost of touching the
    shared weights once per batch, which is what the measured step times
    track. batch=1 gives the plain per-row arithmetic.
    """
    if method not in _METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    r, n_exp, k = config.r, config.n_experts, config.top_k
    per_row = 0.0
    router = 0.0
    for m, n in dims:
        if method == "lora":
            per_row += r * n + m * r
        elif method == "asylora":
            per_row += 2 * r * (n + m)
        elif method == "molora":
            per_row += k * (r * n + m * r)
            router += n_exp * n
        elif method == "moasylora":
            per_row += k * 2 * r * (n + m)
            router += n_exp * n
        else:
            d, r_bar = config.d, config.r_bar
            per_row += d * n / batch + k * (r_bar * d + m * r_bar)
            router += n_exp * n
    return {
        "adapter_per_row": per_row,
        "router_per_row": router,
        "per_row": per_row + router,
    }
