"""Diagnostics over trained adapter stacks: subspace similarity between
experts, singular spectra of concatenated expert matrices, and the
initialization-scale gradient probe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import moe
from .errors import ShapeError
from .linalg import Rng, as_matrix, matmul_nt, orthonormal_basis, svd_thin


def cca_similarity(x: np.ndarray, y: np.ndarray) -> float:
    """Mean canonical correlation between the row spaces of x and y.

    Projection form: orthonormalize both row spaces and average the singular
    values of Q_x Q_y^T. 1 means identical subspaces, 0 orthogonal ones.
    Both inputs must have full row rank (RankDeficient otherwise).
    """
    qx = orthonormal_basis(as_matrix(x, "x"))
    qy = orthonormal_basis(as_matrix(y, "y"))
    if qx.shape[1] != qy.shape[1]:
        raise ShapeError(f"ambient dims differ: {qx.shape[1]} vs {qy.shape[1]}")
    sigma = svd_thin(matmul_nt(qx, qy)).sigma
    return float(np.clip(sigma, 0.0, 1.0).mean())


@dataclass
class PairScore:
    layer: str
    side: str  # "A" (down) or "B" (up)
    i: int
    j: int
    score: float


@dataclass
class SimilarityReport:
    """Pairwise expert CCA scores per layer and matrix family."""

    scores: list[PairScore]

    def side_scores(self, side: str) -> np.ndarray:
        return np.array([s.score for s in self.scores if s.side == side])

    def summary(self) -> dict:
        out = {}
        for side in ("A", "B"):
            vals = self.side_scores(side)
            if vals.size:
                out[side] = {
                    "mean": float(vals.mean()),
                    "std": float(vals.std()),
                    "count": int(vals.size),
                }
        return out

    def write_csv(self, path: str) -> None:
        lines = ["layer,side,expert_i,expert_j,score"]
        for s in self.scores:
            lines.append(f"{s.layer},{s.side},{s.i},{s.j},{s.score!r}")
        _write_text(path, "\n".join(lines) + "\n")

    def write_json(self, path: str) -> None:
        _write_text(path, json.dumps(self.summary(), sort_keys=True, indent=2) + "\n")


def expert_similarity(layers: list) -> SimilarityReport:
    """Pairwise CCA between homologous expert matrices of every MoE layer.

    A-side compares the composite down-projections (rows span input space);
    B-side compares up-projections in rank-major form (rows span output
    space), i.e. the column spaces of the conventional m x r matrices.
    """
    scores: list[PairScore] = []
    for layer in layers:
        downs, ups = _expert_families(layer)
        n = len(downs)
        for i in range(n):
            for j in range(i + 1, n):
                scores.append(
                    PairScore(layer.name, "A", i, j, cca_similarity(downs[i], downs[j]))
                )
                # up-projections are zero until trained; their subspace is
                # undefined then, so the pair is skipped rather than failed
                if np.any(ups[i]) and np.any(ups[j]):
                    scores.append(
                        PairScore(layer.name, "B", i, j, cca_similarity(ups[i], ups[j]))
                    )
    return SimilarityReport(scores)


def _expert_families(layer) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if isinstance(layer, moe.MoloraLayer):
        return list(layer.downs), list(layer.ups)
    if isinstance(layer, moe.MaloraLayer):
        n = layer.n_experts
        return (
            [layer.effective_down(t) for t in range(n)],
            [layer.effective_up(t) for t in range(n)],
        )
    raise ShapeError(f"layer {layer.name!r} has no experts")


@dataclass
class SpectrumReport:
    """Descending singular values of row-concatenated homologous matrices."""

    singular_values: np.ndarray
    threshold: float
    fraction_above: float

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "fraction_above": self.fraction_above,
            "count": int(self.singular_values.size),
        }


def concat_spectrum(mats: list[np.ndarray], threshold: float | None = None) -> SpectrumReport:
    """Stack rows, take the thin SVD, report the spectrum and the fraction of
    values above the threshold (default: the mean singular value)."""
    if not mats:
        raise ShapeError("need at least one matrix")
    cols = as_matrix(mats[0]).shape[1]
    for m in mats[1:]:
        if as_matrix(m).shape[1] != cols:
            raise ShapeError(
                f"column counts differ: {cols} vs {as_matrix(m).shape[1]}"
            )
    stacked = np.vstack([as_matrix(m) for m in mats])
    sigma = svd_thin(stacked).sigma
    thr = float(sigma.mean()) if threshold is None else float(threshold)
    frac = float(np.mean(sigma > thr)) if sigma.size else 0.0
    return SpectrumReport(singular_values=sigma, threshold=thr, fraction_above=frac)


def spectrum_reports(layers: list, threshold: float | None = None) -> dict:
    """Per layer: A-side and B-side concatenated spectra."""
    out = {}
    for layer in layers:
        downs, ups = _expert_families(layer)
        entry = {"A": concat_spectrum(downs, threshold)}
        if any(np.any(u) for u in ups):
            entry["B"] = concat_spectrum(ups, threshold)
        out[layer.name] = entry
    return out


def write_spectrum_csv(reports: dict, path: str) -> None:
    lines = ["layer,side,index,singular_value"]
    for layer, entry in reports.items():
        for side, rep in entry.items():
            for i, s in enumerate(rep.singular_values):
                lines.append(f"{layer},{side},{i},{float(s)!r}")
    _write_text(path, "\n".join(lines) + "\n")


def write_spectrum_json(reports: dict, path: str) -> None:
    doc = {
        layer: {side: rep.to_dict() for side, rep in entry.items()}
        for layer, entry in reports.items()
    }
    _write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


@dataclass
class ProbeRow:
    beta: float
    grad_p_norm: float
    grad_s_norm: float


def beta_grad_probe(
    geometry: moe.MaloraGeometry,
    x: np.ndarray,
    targets: np.ndarray,
    betas: list[float],
    seed: int,
    probe_scale: float = 0.01,
) -> list[ProbeRow]:
    """Gradient magnitudes of the coefficient and shared matrices across the
    init-scale sweep.

    For every beta the layer is rebuilt from the same seed, so the product
    P_t S_A (and hence the forward pass) is beta-invariant; the up-projections
    are filled with one small random draw reused identically across betas,
    because at the true zero init both probed gradients vanish. One
    forward/backward of the squared-error loss on the fixed batch then gives
    grad norms scaling exactly as beta (coefficients) and 1/beta (shared).
    """
    x = as_matrix(x, "x")
    targets = as_matrix(targets, "targets")
    n = x.shape[1]
    m = targets.shape[1]
    rows: list[ProbeRow] = []
    for beta in betas:
        geom_b = replace(geometry, beta=float(beta), in_dim=n, out_dim=m)
        rng = Rng(seed)
        base_w = rng.child(11).normal((m, n), scale=1.0 / np.sqrt(n))
        layer = moe.init_malora(base_w, geom_b, rng.child(12), name="probe")
        probe_rng = rng.child(13)
        for t in range(layer.n_experts):
            layer.ups[t][:] = probe_rng.uniform(
                -probe_scale, probe_scale, layer.ups[t].shape
            )
        tape = ad.Tape()
        x_var = tape.const(x)
        y, _ = moe.malora_forward(layer, x_var, tape)
        loss = ad.mse_loss(y, targets)
        grads = tape.backward(loss)
        gp = float(
            np.sqrt(
                sum(
                    float(np.sum(grads[f"probe.e{t}.p"] ** 2))
                    for t in range(layer.n_experts)
                )
            )
        )
        gs = float(np.linalg.norm(grads["probe.s_a"]))
        rows.append(ProbeRow(beta=float(beta), grad_p_norm=gp, grad_s_norm=gs))
    return rows


def write_probe_csv(rows: list[ProbeRow], path: str) -> None:
    lines = ["beta,grad_p_norm,grad_s_norm"]
    for r in rows:
        lines.append(f"{r.beta!r},{r.grad_p_norm!r},{r.grad_s_norm!r}")
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path: str, text: str) -> None:
    # imported lazily to avoid a cycle with checkpoint/io helpers
    from .checkpoint import write_text_atomic

    write_text_atomic(path, text)
