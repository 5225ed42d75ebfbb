"""Deterministic synthetic multi-task training at desk scale.

Tasks are teacher networks: one shared base map plus per-task low-rank
deltas that factor through a common down-subspace but mutually orthogonal
up-directions, with per-task input clusters the router can separate. This
makes a shared-subspace mixture well-specified by construction while a
single linear delta has to average conflicting task maps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adapters, autodiff as ad, backend, moe
from .errors import ConfigError, DivergedError, ShapeError
from .linalg import Rng, as_matrix, orthonormal_basis

METHODS = ("lora", "asylora", "molora", "moasylora", "malora")


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str = "teacher-regression"  # or "clustered-classification"
    in_dim: int = 32
    out_dim: int = 32
    n_samples: int = 512
    seed: int = 0


@dataclass
class TeacherFamily:
    base_w: np.ndarray               # (m, n) map shared by every task
    shared_down: np.ndarray          # (q, n) common delta row space
    task_up: list[np.ndarray]        # per task (m, q), mutually orthogonal columns
    cluster_dirs: np.ndarray         # (T, n) orthonormal cluster directions
    deltas: list[np.ndarray]         # per task (m, n)


@dataclass
class MultiTaskData:
    specs: list[TaskSpec]
    kind: str
    x: np.ndarray                    # (S, n) interleaved train stream
    y: np.ndarray                    # (S, m) targets or (S,) int labels
    task_ids: np.ndarray             # (S,)
    val_x: list[np.ndarray]
    val_y: list[np.ndarray]
    family: TeacherFamily | None = None

    @property
    def in_dim(self) -> int:
        return self.x.shape[1]

    @property
    def out_dim(self) -> int:
        if self.kind == "regression":
            return self.y.shape[1]
        return self.specs[0].out_dim

    @property
    def base_w(self) -> np.ndarray:
        return self.family.base_w


def interleave_order(weights, total: int) -> np.ndarray:
    """Largest-remainder schedule: deterministic, ties to the lowest task."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigError("mix weights must be non-negative with positive sum")
    w = w / w.sum()
    counts = np.zeros(len(w), dtype=np.int64)
    order = np.empty(total, dtype=np.int64)
    for s in range(total):
        t = int(np.argmax(w * (s + 1) - counts))
        order[s] = t
        counts[t] += 1
    return order


def make_multitask(
    specs: list[TaskSpec],
    mix_weights,
    family_seed: int = 0,
    task_rank: int = 3,
    cluster_scale: float = 4.0,
    delta_strength: float = 1.5,
    noise: float = 0.01,
    val_count: int = 128,
) -> MultiTaskData:
    """Deterministic interleaved stream over the task mix.

    mix_weights set the per-slot task frequencies (largest-remainder, so
    counts over any prefix track the weights exactly); each task's draws come
    from its own seed, the shared teacher from family_seed. Same inputs give
    a bitwise-identical dataset.
    """
    if not specs:
        raise ConfigError("need at least one task spec")
    if len(mix_weights) != len(specs):
        raise ConfigError(
            f"{len(mix_weights)} weights for {len(specs)} tasks"
        )
    n = specs[0].in_dim
    m = specs[0].out_dim
    kind = specs[0].kind
    for s in specs:
        if s.in_dim != n or s.out_dim != m:
            raise ConfigError(f"task {s.task_id} dims differ from task {specs[0].task_id}")
        if s.kind != kind:
            raise ConfigError("mixed generator kinds in one dataset")
        if s.n_samples < 1:
            raise ConfigError(f"task {s.task_id} has no samples")
    n_tasks = len(specs)

    fam_rng = Rng(family_seed).child(0)
    if kind == "teacher-regression":
        if n_tasks * task_rank > m:
            raise ConfigError(
                f"{n_tasks} tasks of rank {task_rank} need out_dim >= {n_tasks * task_rank}"
            )
        if task_rank > n or n_tasks > n:
            raise ConfigError("input dim too small for the task family")
        base_w = fam_rng.normal((m, n), scale=1.0 / np.sqrt(n))
        shared_down = orthonormal_basis(fam_rng.normal((task_rank, n)))
        up_block = orthonormal_basis(fam_rng.normal((n_tasks * task_rank, m)))
        cluster_dirs = orthonormal_basis(fam_rng.normal((n_tasks, n)))
        task_up, deltas = [], []
        for j in range(n_tasks):
            c = np.ascontiguousarray(up_block[j * task_rank : (j + 1) * task_rank].T)
            task_up.append(c)
            deltas.append(delta_strength * (c @ shared_down))
        family = TeacherFamily(base_w, shared_down, task_up, cluster_dirs, deltas)
    elif kind == "clustered-classification":
        if n_tasks > n:
            raise ConfigError("input dim too small for the task family")
        base_w = fam_rng.normal((m, n), scale=1.0 / np.sqrt(n))
        cluster_dirs = orthonormal_basis(fam_rng.normal((n_tasks, n)))
        family = TeacherFamily(base_w, np.zeros((1, n)), [], cluster_dirs, [])
    else:
        raise ConfigError(f"unknown generator kind {kind!r}")

    total = sum(s.n_samples for s in specs)
    order = interleave_order(mix_weights, total)
    counts = np.bincount(order, minlength=n_tasks)

    xs, ys = [], []
    for j, spec in enumerate(specs):
        want = int(counts[j]) + val_count
        rng_t = Rng(spec.seed).child(20 + spec.task_id)
        if kind == "teacher-regression":
            z = rng_t.normal((want, n))
            s_amp = 1.0 + 0.5 * np.abs(rng_t.normal((want, 1)))
            x = z + cluster_scale * s_amp * family.cluster_dirs[j][None, :]
            y = x @ (family.base_w + family.deltas[j]).T
            y += noise * rng_t.normal((want, m))
        else:
            labels = rng_t.integers(0, m, (want,))
            class_dirs = orthonormal_basis(rng_t.normal((m, n)))
            z = rng_t.normal((want, n)) * 0.3
            x = z + cluster_scale * (
                0.5 * family.cluster_dirs[j][None, :] + class_dirs[labels]
            )
            y = labels.astype(np.int64)
        xs.append(x)
        ys.append(y)

    x_stream = np.empty((total, n))
    if kind == "teacher-regression":
        y_stream = np.empty((total, m))
    else:
        y_stream = np.empty(total, dtype=np.int64)
    cursors = np.zeros(n_tasks, dtype=np.int64)
    for s, j in enumerate(order):
        x_stream[s] = xs[j][cursors[j]]
        y_stream[s] = ys[j][cursors[j]]
        cursors[j] += 1

    val_x = [np.ascontiguousarray(xs[j][counts[j] :]) for j in range(n_tasks)]
    val_y = [np.ascontiguousarray(ys[j][counts[j] :]) for j in range(n_tasks)]
    return MultiTaskData(
        specs=list(specs),
        kind="regression" if kind == "teacher-regression" else "classification",
        x=x_stream,
        y=y_stream,
        task_ids=order.copy(),
        val_x=val_x,
        val_y=val_y,
        family=family,
    )


# ---------------------------------------------------------------- model


@dataclass
class TrainConfig:
    method: str = "malora"
    # geometry
    n_experts: int = 8
    r: int = 8
    lam: float | None = 0.5
    d: int | None = None
    r_bar: int | None = None
    beta: float = 1.0
    top_k: int = 2
    alpha: float | None = None
    # ablations
    flags: moe.AblationFlags = field(default_factory=moe.AblationFlags)
    identical_expert_init: bool = False
    renormalize_gates: bool = False
    # optimization
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    dropout: float = 0.0
    balance_factor: float = 0.001
    grad_clip: float | None = None
    loss: str = "mse"  # or "xent"
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        for name in ("learning_rate", "warmup_ratio", "weight_decay", "dropout",
                     "balance_factor", "beta"):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1], got {self.warmup_ratio}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.loss not in ("mse", "xent"):
            raise ConfigError(f"unknown loss {self.loss!r}")

    def geometry(self, in_dim: int = 0, out_dim: int = 0) -> moe.MaloraGeometry:
        """Resolve (and cross-check) the rank geometry for shared-subspace
        methods. When both lambda and explicit (d, r_bar) are present they
        must agree with the derivation."""
        if self.lam is not None:
            d, r_bar = moe.derive_geometry(self.r, self.n_experts, self.lam)
            if self.d is not None and self.d != d:
                raise ConfigError(
                    f"geometry mismatch: lambda={self.lam} derives d={d}, config says {self.d}"
                )
            if self.r_bar is not None and self.r_bar != r_bar:
                raise ConfigError(
                    f"geometry mismatch: lambda={self.lam} derives r_bar={r_bar},"
                    f" config says {self.r_bar}"
                )
            return moe.MaloraGeometry(
                self.n_experts, self.r, self.lam, d, r_bar,
                self.beta, self.top_k, in_dim, out_dim,
            )
        if self.d is None or self.r_bar is None:
            raise ConfigError("geometry needs lambda or both d and r_bar")
        return moe.MaloraGeometry.explicit(
            self.n_experts, self.r, self.d, self.r_bar,
            self.beta, self.top_k, in_dim, out_dim,
        )


@dataclass
class AdapterModel:
    """One adapter site plus a loss head."""

    method: str
    layer: object
    loss_kind: str = "mse"

    def param_specs(self):
        return self.layer.param_specs()

    def trainable_params(self) -> dict[str, np.ndarray]:
        return {name: arr for name, arr, trainable in self.param_specs() if trainable}

    def frozen_params(self) -> dict[str, np.ndarray]:
        out = {name: arr for name, arr, trainable in self.param_specs() if not trainable}
        out[f"{self.layer.name}.base_w"] = self.layer.base_w
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        return self.layer.tensors()

    def forward(
        self,
        tape: ad.Tape,
        x: np.ndarray,
        train: bool = False,
        dropout_gen: np.random.Generator | None = None,
    ) -> tuple[ad.Var, moe.RouterStats | None]:
        x_var = tape.const(as_matrix(x, "x"))
        if self.method in ("lora", "asylora"):
            y = adapters.lora_forward(self.layer, x_var, tape, train, dropout_gen)
            return y, None
        if self.method in ("molora", "moasylora"):
            return moe.molora_forward(self.layer, x_var, tape, train, dropout_gen)
        return moe.malora_forward(self.layer, x_var, tape, train, dropout_gen)

    def loss(
        self,
        tape: ad.Tape,
        x: np.ndarray,
        targets: np.ndarray,
        train: bool = False,
        dropout_gen: np.random.Generator | None = None,
    ) -> tuple[ad.Var, ad.Var, ad.Var | None, moe.RouterStats | None]:
        """Returns (total, task, balance, stats); balance is None off-MoE."""
        y, stats = self.forward(tape, x, train, dropout_gen)
        if self.loss_kind == "mse":
            task = ad.mse_loss(y, targets)
        else:
            task = ad.softmax_cross_entropy(y, targets)
        if stats is None:
            return task, task, None, None
        bal = moe.balance_loss(stats, self.layer.balance_factor)
        return ad.add(task, bal), task, bal, stats


def build_model(
    config: TrainConfig,
    base_w: np.ndarray,
    rng: Rng,
    name: str = "site0",
) -> AdapterModel:
    base_w = as_matrix(base_w, "base_w")
    m, n = base_w.shape
    method = config.method
    if method == "lora":
        layer = adapters.init_lora(
            base_w, config.r, rng, alpha=config.alpha,
            dropout_rate=config.dropout, name=name,
        )
    elif method == "asylora":
        layer = adapters.init_asylora(
            base_w, config.r, rng, alpha=config.alpha,
            dropout_rate=config.dropout, name=name,
        )
    elif method in ("molora", "moasylora"):
        layer = moe.init_molora(
            base_w, config.n_experts, config.r, config.top_k, rng,
            alpha=config.alpha, balance_factor=config.balance_factor,
            asy=(method == "moasylora"),
            identical_expert_init=config.identical_expert_init,
            dropout_rate=config.dropout,
            renormalize_gates=config.renormalize_gates, name=name,
        )
    else:
        layer = moe.init_malora(
            base_w, config.geometry(n, m), rng,
            alpha=config.alpha, balance_factor=config.balance_factor,
            flags=config.flags, dropout_rate=config.dropout,
            renormalize_gates=config.renormalize_gates, name=name,
        )
    return AdapterModel(method=method, layer=layer, loss_kind=config.loss)


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adaptive moments with decoupled weight decay over named arrays.

    Only trainable parameters are registered, so frozen tensors carry no
    moment state and are never touched.
    """

    def __init__(
        self,
        params: dict[str, np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = dict(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.params:
            g = grads.get(name)
            if g is None:
                continue
            p = self.params[name]
            backend.adamw_update(
                p.reshape(-1), g.reshape(-1),
                self.m[name].reshape(-1), self.v[name].reshape(-1),
                lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                bc1, bc2,
            )


def lr_at(step: int, total_steps: int, warmup_steps: int, lr: float) -> float:
    """Linear warmup (lr * step / warmup_steps) then linear decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    remaining = max(total_steps - warmup_steps, 1)
    return lr * max(0.0, 1.0 - (step - warmup_steps) / remaining)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor


# ---------------------------------------------------------------- training


@dataclass
class MetricsHistory:
    """Per-step scalars plus wall-clock phase times.

    Phase times live in ``phase_seconds`` and are deliberately left out of
    the CSV so reruns of the same config produce byte-identical files.
    ``geometry_line`` echoes the run geometry as a leading comment row.
    """

    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)
    phase_seconds: list[tuple[float, float, float]] = field(default_factory=list)
    geometry_line: str | None = None

    def to_csv(self, path: str) -> None:
        from .checkpoint import write_text_atomic

        lines = []
        if self.geometry_line:
            lines.append(f"# {self.geometry_line}")
        lines.append(",".join(self.columns))
        for row in self.rows:
            lines.append(",".join(repr(v) for v in row))
        write_text_atomic(path, "\n".join(lines) + "\n")

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([row[i] for row in self.rows])


def _router_metrics(stats: moe.RouterStats | None, n_experts: int):
    if stats is None:
        return 0.0, [0.0] * n_experts
    p = stats.probs.value
    entropy = float(np.mean(-np.sum(p * np.log(np.maximum(p, 1e-300)), axis=1)))
    return entropy, [float(v) for v in stats.selection_fraction]


def train(config: TrainConfig, dataset: MultiTaskData) -> tuple[AdapterModel, MetricsHistory]:
    """Deterministic under config.seed: same config, same dataset, same final
    weights bitwise. Raises DivergedError on a non-finite loss."""
    rng = Rng(config.seed)
    model = build_model(config, dataset.base_w, rng.child(1))
    dropout_gen = rng.child(2).generator

    trainable = model.trainable_params()
    opt = AdamW(trainable, weight_decay=config.weight_decay)

    n_stream = dataset.x.shape[0]
    steps_per_epoch = max(1, n_stream // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = int(round(config.warmup_ratio * total_steps))

    n_tasks = len(dataset.specs)
    is_moe = config.method in ("molora", "moasylora", "malora")
    n_experts = config.n_experts if is_moe else 0
    columns = ["step", "lr", "total_loss", "task_loss", "balance_loss", "router_entropy"]
    columns += [f"val_loss_t{s.task_id}" for s in dataset.specs]
    columns += [f"expert_load_e{j}" for j in range(n_experts)]
    geometry_line = f"method={config.method} r={config.r}"
    if is_moe:
        geometry_line += f" n_experts={config.n_experts} top_k={config.top_k}"
    if config.method == "malora":
        geom = config.geometry(dataset.in_dim, dataset.out_dim)
        geometry_line += (
            f" lambda={geom.lam!r} d={geom.shared_rank} r_bar={geom.expanded_rank}"
            f" beta={geom.beta!r}"
        )
    history = MetricsHistory(columns=columns, geometry_line=geometry_line)

    for step in range(total_steps):
        lo = (step * config.batch_size) % n_stream
        idx = np.arange(lo, lo + config.batch_size) % n_stream
        xb = np.ascontiguousarray(dataset.x[idx])
        yb = dataset.y[idx]
        if dataset.kind == "regression":
            yb = np.ascontiguousarray(yb)

        t0 = time.perf_counter()
        tape = ad.Tape()
        total, task, bal, stats = model.loss(tape, xb, yb, train=True, dropout_gen=dropout_gen)
        loss_val = float(total.value[0, 0])
        if not np.isfinite(loss_val):
            raise DivergedError(f"non-finite loss at step {step}", step=step)
        t1 = time.perf_counter()
        grads = tape.backward(total)
        t2 = time.perf_counter()
        if config.grad_clip is not None:
            clip_gradients(grads, config.grad_clip)
        lr_t = lr_at(step, total_steps, warmup_steps, config.learning_rate)
        opt.step(grads, lr_t)
        t3 = time.perf_counter()

        entropy, load = _router_metrics(stats, n_experts)
        val_losses = [
            _eval_loss(model, dataset.val_x[j], dataset.val_y[j], dataset.kind)
            for j in range(n_tasks)
        ]
        row = [
            float(step), lr_t, loss_val, float(task.value[0, 0]),
            float(bal.value[0, 0]) if bal is not None else 0.0, entropy,
        ]
        row += val_losses
        row += load
        history.rows.append(row)
        history.phase_seconds.append((t1 - t0, t2 - t1, t3 - t2))

    return model, history


def _eval_loss(model: AdapterModel, x: np.ndarray, y, kind: str) -> float:
    tape = ad.Tape()
    if kind == "regression":
        loss = ad.mse_loss(model.forward(tape, x)[0], y)
    else:
        loss = ad.softmax_cross_entropy(model.forward(tape, x)[0], y)
    return float(loss.value[0, 0])


def evaluate(model: AdapterModel, dataset: MultiTaskData) -> dict:
    """Per-task mean loss (and accuracy for classification) on the held-out
    split; never mutates weights."""
    out = {}
    for j, spec in enumerate(dataset.specs):
        x, y = dataset.val_x[j], dataset.val_y[j]
        if x.shape[1] != model.layer.in_dim:
            raise ShapeError(
                f"dataset dim {x.shape[1]} vs model {model.layer.in_dim}"
            )
        entry = {"loss": _eval_loss(model, x, y, dataset.kind)}
        if dataset.kind == "classification":
            tape = ad.Tape()
            pred = model.forward(tape, x)[0].value.argmax(axis=1)
            entry["accuracy"] = float(np.mean(pred == y))
        out[spec.task_id] = entry
    return out


# ---------------------------------------------------------------- benchmark


@dataclass
class BenchRow:
    method: str
    forward_ms: float
    backward_ms: float
    optimize_ms: float
    total_ms: float
    adapter_flops_per_row: float


def bench_step(
    config: TrainConfig,
    dims: tuple[int, int] = (1024, 1024),
    batch: int = 64,
    repetitions: int = 25,
    methods: tuple[str, ...] = ("lora", "molora", "malora"),
    warmup: int = 3,
) -> list[BenchRow]:
    """Median wall-clock per training-step phase at matched dims.

    Methods are interleaved round-robin across repetitions so slow machine
    drift cancels out of the comparison. Runs pin to the single-threaded
    kernel path; the analytic adapter FLOP model rides along for the
    ordering cross-check. repetitions >= 10 (warmup discards are separate).
    """
    if repetitions < 10:
        raise ConfigError(f"repetitions must be >= 10, got {repetitions}")
    m, n = dims
    data_rng = Rng(config.seed).child(77)
    base_w = data_rng.normal((m, n), scale=1.0 / np.sqrt(n))
    x = data_rng.normal((batch, n))
    y = data_rng.normal((batch, m))
    budget_cfg = budget_config(config, m, n)

    setups = []
    for method in methods:
        cfg = _with_method(config, method)
        model = build_model(cfg, base_w, Rng(config.seed).child(78))
        opt = AdamW(model.trainable_params(), weight_decay=cfg.weight_decay)
        setups.append((method, cfg, model, opt, [], [], []))

    for rep in range(warmup + repetitions):
        for method, cfg, model, opt, fwd, bwd, opt_t in setups:
            t0 = time.perf_counter()
            tape = ad.Tape()
            total, _, _, _ = model.loss(tape, x, y)
            t1 = time.perf_counter()
            grads = tape.backward(total)
            t2 = time.perf_counter()
            opt.step(grads, cfg.learning_rate)
            t3 = time.perf_counter()
            if rep >= warmup:
                fwd.append(t1 - t0)
                bwd.append(t2 - t1)
                opt_t.append(t3 - t2)

    rows: list[BenchRow] = []
    for method, cfg, model, opt, fwd, bwd, opt_t in setups:
        flops = moe.flop_budget(method, [(m, n)], budget_cfg, batch)
        tot = [f + b + o for f, b, o in zip(fwd, bwd, opt_t)]
        rows.append(
            BenchRow(
                method=method,
                forward_ms=1e3 * float(np.median(fwd)),
                backward_ms=1e3 * float(np.median(bwd)),
                optimize_ms=1e3 * float(np.median(opt_t)),
                total_ms=1e3 * float(np.median(tot)),
                adapter_flops_per_row=flops["adapter_per_row"],
            )
        )
    return rows


def budget_config(config: TrainConfig, m: int, n: int) -> moe.BudgetConfig:
    # the shared-subspace ranks matter only when a malora row is produced;
    # other methods fall back to placeholders their formulas never read
    try:
        geom = config.geometry(n, m)
        d, r_bar = geom.shared_rank, geom.expanded_rank
    except ConfigError:
        if config.method == "malora":
            raise
        d = r_bar = config.r
    return moe.BudgetConfig(
        r=config.r,
        n_experts=config.n_experts,
        top_k=config.top_k,
        d=d,
        r_bar=r_bar,
        freeze_s_a=config.flags.freeze_s_a,
        freeze_p_t=config.flags.freeze_p_t,
    )


def _with_method(config: TrainConfig, method: str):
    from dataclasses import replace

    return replace(config, method=method, dropout=0.0)
