"""Reverse-mode automatic differentiation over matrix-valued expressions.

Define-by-run: a Tape is rebuilt for every training step. Node values are
plain float64 ndarrays; backward walks the tape once in reverse topological
order (creation order) and accumulates gradients with ``+=`` so a parameter
used twice receives the sum of both contributions. Frozen parameters never
receive an entry in the gradient map.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import backend
from .errors import InvalidInput, NotScalarLoss, ShapeError


class _Node:
    __slots__ = ("op", "parents", "value", "ctx", "needs_grad")

    def __init__(self, op, parents, value, ctx, needs_grad):
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.needs_grad = needs_grad


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.tape.nodes[self.nid].value.shape


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []
        self.param_ids: dict[str, int] = {}
        self.param_trainable: dict[str, bool] = {}

    def _push(self, op, parents, value, ctx=None, needs_grad=None) -> Var:
        if needs_grad is None:
            needs_grad = any(self.nodes[p].needs_grad for p in parents)
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node(op, parents, value, ctx, needs_grad))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        return self._push("const", (), np.asarray(value, dtype=np.float64), needs_grad=False)

    def param(self, name: str, value: np.ndarray, trainable: bool = True) -> Var:
        if name in self.param_ids:
            raise InvalidInput(f"parameter {name!r} registered twice on one tape")
        var = self._push("param", (), value, needs_grad=trainable)
        self.param_ids[name] = var.nid
        self.param_trainable[name] = trainable
        return var

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        root = self.nodes[loss.nid]
        if root.value.shape != (1, 1):
            raise NotScalarLoss(f"loss must be 1x1, got {root.value.shape}")
        grads: dict[int, np.ndarray] = {loss.nid: np.ones((1, 1))}

        def accum(nid: int, contribution: np.ndarray, owned: bool = False) -> None:
            # owned=True means the caller hands over a fresh array we may keep
            if not self.nodes[nid].needs_grad:
                return
            buf = grads.get(nid)
            if buf is None:
                grads[nid] = contribution if owned else contribution.copy()
            else:
                buf += contribution

        for nid in range(loss.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            _BACKWARD[node.op](self, node, g, accum)

        out: dict[str, np.ndarray] = {}
        for name, nid in self.param_ids.items():
            if self.param_trainable[name] and nid in grads:
                out[name] = grads[nid]
        return out


def _values(*vs: Var) -> tuple[np.ndarray, ...]:
    return tuple(v.value for v in vs)


def _same_tape(*vs: Var) -> Tape:
    tape = vs[0].tape
    for v in vs[1:]:
        if v.tape is not tape:
            raise InvalidInput("vars from different tapes")
    return tape


# ---------------------------------------------------------------- ops


def add(a: Var, b: Var) -> Var:
    av, bv = _values(a, b)
    if av.shape != bv.shape:
        raise ShapeError(f"add shape mismatch: {av.shape} vs {bv.shape}")
    return _same_tape(a, b)._push("add", (a.nid, b.nid), av + bv)


def sub(a: Var, b: Var) -> Var:
    av, bv = _values(a, b)
    if av.shape != bv.shape:
        raise ShapeError(f"sub shape mismatch: {av.shape} vs {bv.shape}")
    return _same_tape(a, b)._push("sub", (a.nid, b.nid), av - bv)


def matmul(a: Var, b: Var, transpose_b: bool = False) -> Var:
    av, bv = _values(a, b)
    inner_b = bv.shape[1] if transpose_b else bv.shape[0]
    if av.shape[1] != inner_b:
        op = "@T" if transpose_b else "@"
        raise ShapeError(f"matmul shape mismatch: {av.shape} {op} {bv.shape}")
    value = backend.mm_nt(av, bv) if transpose_b else backend.mm_nn(av, bv)
    return _same_tape(a, b)._push("matmul", (a.nid, b.nid), value, ctx=transpose_b)


def scale_by_const(a: Var, c: float) -> Var:
    return a.tape._push("scale", (a.nid,), a.value * float(c), ctx=float(c))


def hadamard(a: Var, b: Var) -> Var:
    av, bv = _values(a, b)
    if av.shape != bv.shape:
        raise ShapeError(f"hadamard shape mismatch: {av.shape} vs {bv.shape}")
    return _same_tape(a, b)._push("hadamard", (a.nid, b.nid), av * bv)


def relu(a: Var) -> Var:
    av = a.value
    return a.tape._push("relu", (a.nid,), np.maximum(av, 0.0), ctx=av > 0.0)


def softmax_rows(a: Var) -> Var:
    av = a.value
    z = av - av.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return a.tape._push("softmax", (a.nid,), p)


def masked_softmax_rows(logits: Var, mask: np.ndarray) -> Var:
    """Row softmax restricted to masked-in entries; zeros elsewhere.

    Used for the optional gate-renormalization mode: softmax over the
    selected experts only.
    """
    av = logits.value
    if mask.shape != av.shape:
        raise ShapeError(f"mask shape {mask.shape} vs logits {av.shape}")
    neg = np.where(mask, av, -np.inf)
    zmax = neg.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(neg - zmax), 0.0)
    p = e / e.sum(axis=1, keepdims=True)
    return logits.tape._push("softmax", (logits.nid,), p)


def mask_select(a: Var, mask: np.ndarray) -> Var:
    av = a.value
    if mask.shape != av.shape:
        raise ShapeError(f"mask shape {mask.shape} vs value {av.shape}")
    m = mask.astype(np.float64)
    return a.tape._push("mask_select", (a.nid,), av * m, ctx=m)


def concat_rows(a: Var, b: Var) -> Var:
    av, bv = _values(a, b)
    if av.shape[1] != bv.shape[1]:
        raise ShapeError(f"concat_rows col mismatch: {av.shape} vs {bv.shape}")
    return _same_tape(a, b)._push(
        "concat_rows", (a.nid, b.nid), np.vstack([av, bv]), ctx=av.shape[0]
    )


def _is_unique(idx: np.ndarray) -> bool:
    if idx.size <= 1:
        return True
    return bool((np.diff(np.sort(idx)) > 0).all())


def _scatter_add(buf: np.ndarray, idx: np.ndarray, vals: np.ndarray, unique: bool) -> None:
    # fancy-index += is both correct and much faster when rows are distinct
    if unique:
        buf[idx] += vals
    else:
        np.add.at(buf, idx, vals)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.int64)
    return a.tape._push(
        "gather_rows", (a.nid,), a.value[idx], ctx=(idx, a.value.shape, _is_unique(idx))
    )


def scatter_sum(parts: list[Var], idx_list: list[np.ndarray], rows: int) -> Var:
    """Sum row-sparse contributions into a (rows x cols) matrix."""
    if not parts:
        raise InvalidInput("scatter_sum needs at least one part")
    tape = _same_tape(*parts)
    cols = parts[0].value.shape[1]
    out = np.zeros((rows, cols))
    idx_arrays = [np.asarray(i, dtype=np.int64) for i in idx_list]
    for part, idx in zip(parts, idx_arrays):
        _scatter_add(out, idx, part.value, _is_unique(idx))
    return tape._push(
        "scatter_sum", tuple(p.nid for p in parts), out, ctx=idx_arrays
    )


def row_gate_scale(a: Var, gates: Var, idx: np.ndarray, col: int) -> Var:
    """Scale row i of ``a`` by gates[idx[i], col]; differentiable in both."""
    idx = np.asarray(idx, dtype=np.int64)
    g = gates.value[idx, col][:, None]
    return _same_tape(a, gates)._push(
        "row_gate_scale", (a.nid, gates.nid), a.value * g, ctx=(idx, col, _is_unique(idx))
    )


def mean_rows(a: Var) -> Var:
    return a.tape._push(
        "mean_rows", (a.nid,), a.value.mean(axis=0, keepdims=True), ctx=a.value.shape[0]
    )


def sum_all(a: Var) -> Var:
    return a.tape._push("sum_all", (a.nid,), np.array([[a.value.sum()]]))


def dropout(a: Var, rate: float, gen: np.random.Generator) -> Var:
    """Inverted dropout with a mask drawn at node creation from ``gen``."""
    if not 0.0 <= rate < 1.0:
        raise InvalidInput(f"dropout rate must be in [0, 1), got {rate}")
    keep = gen.uniform(0.0, 1.0, size=a.value.shape) >= rate
    m = keep.astype(np.float64) / (1.0 - rate)
    return a.tape._push("dropout", (a.nid,), a.value * m, ctx=m)


def mse_loss(pred: Var, target: np.ndarray) -> Var:
    pv = pred.value
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pv.shape:
        raise ShapeError(f"mse target shape {target.shape} vs pred {pv.shape}")
    diff = pv - target
    value = np.array([[float(np.mean(diff * diff))]])
    return pred.tape._push("mse_loss", (pred.nid,), value, ctx=diff)


def softmax_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    lv = logits.value
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != lv.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} vs logits {lv.shape}")
    if labels.min() < 0 or labels.max() >= lv.shape[1]:
        raise InvalidInput("labels outside class range")
    zmax = lv.max(axis=1, keepdims=True)
    e = np.exp(lv - zmax)
    p = e / e.sum(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(e.sum(axis=1))
    value = np.array([[float(np.mean(lse - lv[np.arange(lv.shape[0]), labels]))]])
    return logits.tape._push("xent", (logits.nid,), value, ctx=(p, labels))


# ---------------------------------------------------------------- backward rules


def _bwd_leaf(tape, node, g, accum):
    pass


def _bwd_add(tape, node, g, accum):
    accum(node.parents[0], g)
    accum(node.parents[1], g)


def _bwd_sub(tape, node, g, accum):
    accum(node.parents[0], g)
    accum(node.parents[1], -g, owned=True)


def _bwd_matmul(tape, node, g, accum):
    a_id, b_id = node.parents
    av = tape.nodes[a_id].value
    bv = tape.nodes[b_id].value
    if node.ctx:  # c = a @ b.T
        if tape.nodes[a_id].needs_grad:
            accum(a_id, backend.mm_nn(g, bv), owned=True)
        if tape.nodes[b_id].needs_grad:
            accum(b_id, backend.mm_tn(g, av), owned=True)
    else:  # c = a @ b
        if tape.nodes[a_id].needs_grad:
            accum(a_id, backend.mm_nt(g, bv), owned=True)
        if tape.nodes[b_id].needs_grad:
            accum(b_id, backend.mm_tn(av, g), owned=True)


def _bwd_scale(tape, node, g, accum):
    accum(node.parents[0], g * node.ctx, owned=True)


def _bwd_hadamard(tape, node, g, accum):
    a_id, b_id = node.parents
    accum(a_id, g * tape.nodes[b_id].value, owned=True)
    accum(b_id, g * tape.nodes[a_id].value, owned=True)


def _bwd_relu(tape, node, g, accum):
    accum(node.parents[0], g * node.ctx, owned=True)


def _bwd_softmax(tape, node, g, accum):
    p = node.value
    inner = (g * p).sum(axis=1, keepdims=True)
    accum(node.parents[0], p * (g - inner), owned=True)


def _bwd_mask_select(tape, node, g, accum):
    accum(node.parents[0], g * node.ctx, owned=True)


def _bwd_concat_rows(tape, node, g, accum):
    split = node.ctx
    accum(node.parents[0], g[:split])
    accum(node.parents[1], g[split:])


def _bwd_gather_rows(tape, node, g, accum):
    idx, src_shape, unique = node.ctx
    buf = np.zeros(src_shape)
    _scatter_add(buf, idx, g, unique)
    accum(node.parents[0], buf, owned=True)


def _bwd_scatter_sum(tape, node, g, accum):
    for pid, idx in zip(node.parents, node.ctx):
        accum(pid, g[idx], owned=True)


def _bwd_row_gate_scale(tape, node, g, accum):
    a_id, gates_id = node.parents
    idx, col, unique = node.ctx
    gates_v = tape.nodes[gates_id].value
    if tape.nodes[a_id].needs_grad:
        accum(a_id, g * gates_v[idx, col][:, None], owned=True)
    if tape.nodes[gates_id].needs_grad:
        buf = np.zeros(gates_v.shape)
        vals = np.einsum("ij,ij->i", g, tape.nodes[a_id].value)
        if unique:
            buf[idx, col] = vals
        else:
            np.add.at(buf, (idx, np.full(idx.shape, col)), vals)
        accum(gates_id, buf, owned=True)


def _bwd_mean_rows(tape, node, g, accum):
    n = node.ctx
    accum(node.parents[0], np.broadcast_to(g / n, (n, g.shape[1])))


def _bwd_sum_all(tape, node, g, accum):
    src = tape.nodes[node.parents[0]].value
    accum(node.parents[0], np.full(src.shape, g[0, 0]), owned=True)


def _bwd_dropout(tape, node, g, accum):
    accum(node.parents[0], g * node.ctx, owned=True)


def _bwd_mse(tape, node, g, accum):
    diff = node.ctx
    accum(node.parents[0], diff * (2.0 * g[0, 0] / diff.size), owned=True)


def _bwd_xent(tape, node, g, accum):
    p, labels = node.ctx
    grad = p.copy()
    grad[np.arange(p.shape[0]), labels] -= 1.0
    grad *= g[0, 0] / p.shape[0]
    accum(node.parents[0], grad, owned=True)


_BACKWARD: dict[str, Callable] = {
    "const": _bwd_leaf,
    "param": _bwd_leaf,
    "add": _bwd_add,
    "sub": _bwd_sub,
    "matmul": _bwd_matmul,
    "scale": _bwd_scale,
    "hadamard": _bwd_hadamard,
    "relu": _bwd_relu,
    "softmax": _bwd_softmax,
    "mask_select": _bwd_mask_select,
    "concat_rows": _bwd_concat_rows,
    "gather_rows": _bwd_gather_rows,
    "scatter_sum": _bwd_scatter_sum,
    "row_gate_scale": _bwd_row_gate_scale,
    "mean_rows": _bwd_mean_rows,
    "sum_all": _bwd_sum_all,
    "dropout": _bwd_dropout,
    "mse_loss": _bwd_mse,
    "xent": _bwd_xent,
}


def grad_check(
    build: Callable[[Tape, dict[str, np.ndarray]], Var],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-12,
) -> float:
    """Max relative error between backward() and central finite differences.

    ``build`` must construct the loss afresh from the live arrays in
    ``params`` on every call; entries are perturbed in place. Relative error
    uses a 1e-12 denominator floor by default; sweeps over many random
    instances can raise ``floor`` so that near-zero gradient entries (whose
    relative error is dominated by finite-difference roundoff, ~1e-11
    absolute at eps=1e-5) are compared on an absolute scale instead.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidInput(f"eps must lie in [1e-7, 1e-3], got {eps}")
    tape = Tape()
    loss = build(tape, params)
    if loss.value.shape != (1, 1):
        raise NotScalarLoss(f"loss must be 1x1, got {loss.value.shape}")
    grads = tape.backward(loss)

    def evaluate() -> float:
        return float(build(Tape(), params).value[0, 0])

    max_rel = 0.0
    for name in sorted(grads):
        flat_p = params[name].reshape(-1)
        flat_g = grads[name].reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + eps
            f_plus = evaluate()
            flat_p[i] = orig - eps
            f_minus = evaluate()
            flat_p[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(numeric), abs(flat_g[i]), floor)
            max_rel = max(max_rel, abs(numeric - flat_g[i]) / denom)
    return max_rel
