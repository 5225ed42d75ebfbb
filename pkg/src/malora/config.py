"""Run configuration files: strict JSON with key-level diagnostics.

A config either loads completely or fails with the offending key path;
unknown keys are always rejected rather than silently ignored.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from . import harness, moe
from .errors import ConfigError

_GEOMETRY_KEYS = {"n_experts", "r", "lambda", "d", "r_bar", "beta", "top_k", "alpha"}
_ABLATION_KEYS = {
    "freeze_s_a",
    "freeze_p_t",
    "decompose_b_side",
    "shared_subspace_enabled",
    "identical_expert_init",
}
_TRAINING_KEYS = {
    "learning_rate",
    "batch_size",
    "epochs",
    "warmup_ratio",
    "weight_decay",
    "dropout",
    "balance_factor",
    "grad_clip",
    "loss",
    "renormalize_gates",
}
_TASK_KEYS = {"task_id", "kind", "in_dim", "out_dim", "n_samples", "seed"}
_DATA_KEYS = {"task_rank", "cluster_scale", "delta_strength", "noise", "val_count"}
_BENCH_KEYS = {"m", "n", "batch", "methods"}
_OUTPUT_KEYS = {"checkpoint", "metrics"}
_TOP_KEYS = {
    "method",
    "seed",
    "geometry",
    "ablations",
    "training",
    "tasks",
    "mix_weights",
    "family_seed",
    "data",
    "bench",
    "output",
}


def _check_keys(section: dict, allowed: set, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object, got {type(section).__name__}")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")


def _get(section: dict, key: str, kind, default, where: str):
    if key not in section or section[key] is None:
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, got bool")
    if not isinstance(value, kind):
        raise ConfigError(
            f"{where}.{key} must be {kind.__name__}, got {type(value).__name__}"
        )
    return value


@dataclass
class RunConfig:
    train: harness.TrainConfig
    tasks: list[harness.TaskSpec]
    mix_weights: list[float]
    family_seed: int = 0
    data_kwargs: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    checkpoint_path: str | None = None
    metrics_path: str | None = None

    def make_dataset(self) -> harness.MultiTaskData:
        return harness.make_multitask(
            self.tasks, self.mix_weights, family_seed=self.family_seed,
            **self.data_kwargs,
        )

    def echo(self) -> dict:
        """Fully-resolved dict for the checkpoint meta block."""
        t = self.train
        return {
            "method": t.method,
            "seed": t.seed,
            "geometry": {
                "n_experts": t.n_experts,
                "r": t.r,
                "lambda": t.lam,
                "d": t.d,
                "r_bar": t.r_bar,
                "beta": t.beta,
                "top_k": t.top_k,
                "alpha": t.alpha,
            },
            "ablations": {
                "freeze_s_a": t.flags.freeze_s_a,
                "freeze_p_t": t.flags.freeze_p_t,
                "decompose_b_side": t.flags.decompose_b_side,
                "shared_subspace_enabled": t.flags.shared_subspace_enabled,
                "identical_expert_init": t.identical_expert_init,
            },
            "training": {
                "learning_rate": t.learning_rate,
                "batch_size": t.batch_size,
                "epochs": t.epochs,
                "warmup_ratio": t.warmup_ratio,
                "weight_decay": t.weight_decay,
                "dropout": t.dropout,
                "balance_factor": t.balance_factor,
                "grad_clip": t.grad_clip,
                "loss": t.loss,
                "renormalize_gates": t.renormalize_gates,
            },
            "tasks": [
                {
                    "task_id": s.task_id,
                    "kind": s.kind,
                    "in_dim": s.in_dim,
                    "out_dim": s.out_dim,
                    "n_samples": s.n_samples,
                    "seed": s.seed,
                }
                for s in self.tasks
            ],
            "mix_weights": list(self.mix_weights),
            "family_seed": self.family_seed,
            "data": dict(self.data_kwargs),
        }


def train_config_from_dict(doc: dict) -> harness.TrainConfig:
    """Build just the TrainConfig part from a config dict / checkpoint echo."""
    _check_keys(doc, _TOP_KEYS, "config")
    method = _get(doc, "method", str, None, "config")
    if method is None:
        raise ConfigError("config.method is required")
    if method not in harness.METHODS:
        raise ConfigError(
            f"config.method must be one of {'|'.join(harness.METHODS)}, got {method!r}"
        )
    geo = doc.get("geometry", {}) or {}
    _check_keys(geo, _GEOMETRY_KEYS, "config.geometry")
    abl = doc.get("ablations", {}) or {}
    _check_keys(abl, _ABLATION_KEYS, "config.ablations")
    tr = doc.get("training", {}) or {}
    _check_keys(tr, _TRAINING_KEYS, "config.training")

    flags = moe.AblationFlags(
        freeze_s_a=_get(abl, "freeze_s_a", bool, False, "config.ablations"),
        freeze_p_t=_get(abl, "freeze_p_t", bool, False, "config.ablations"),
        decompose_b_side=_get(abl, "decompose_b_side", bool, False, "config.ablations"),
        shared_subspace_enabled=_get(
            abl, "shared_subspace_enabled", bool, True, "config.ablations"
        ),
    )

    lam = _get(geo, "lambda", float, None, "config.geometry")
    d = _get(geo, "d", int, None, "config.geometry")
    r_bar = _get(geo, "r_bar", int, None, "config.geometry")
    if lam is None and d is None:
        lam = 0.5
    try:
        config = harness.TrainConfig(
            method=method,
            n_experts=_get(geo, "n_experts", int, 8, "config.geometry"),
            r=_get(geo, "r", int, 8, "config.geometry"),
            lam=lam,
            d=d,
            r_bar=r_bar,
            beta=_get(geo, "beta", float, 1.0, "config.geometry"),
            top_k=_get(geo, "top_k", int, 2, "config.geometry"),
            alpha=_get(geo, "alpha", float, None, "config.geometry"),
            flags=flags,
            identical_expert_init=_get(
                abl, "identical_expert_init", bool, False, "config.ablations"
            ),
            renormalize_gates=_get(tr, "renormalize_gates", bool, False, "config.training"),
            learning_rate=_get(tr, "learning_rate", float, 1e-3, "config.training"),
            batch_size=_get(tr, "batch_size", int, 32, "config.training"),
            epochs=_get(tr, "epochs", int, 1, "config.training"),
            warmup_ratio=_get(tr, "warmup_ratio", float, 0.1, "config.training"),
            weight_decay=_get(tr, "weight_decay", float, 0.01, "config.training"),
            dropout=_get(tr, "dropout", float, 0.0, "config.training"),
            balance_factor=_get(tr, "balance_factor", float, 0.001, "config.training"),
            grad_clip=_get(tr, "grad_clip", float, None, "config.training"),
            loss=_get(tr, "loss", str, "mse", "config.training"),
            seed=_get(doc, "seed", int, 0, "config"),
        )
        if method == "malora":
            config.geometry()  # cross-checks lambda against (d, r_bar) now
        elif method in ("molora", "moasylora"):
            if config.top_k > config.n_experts:
                raise ConfigError(
                    f"config.geometry.top_k={config.top_k} exceeds "
                    f"n_experts={config.n_experts}"
                )
    except ConfigError:
        raise
    return config


def parse_config(source) -> RunConfig:
    """Parse a config file path, JSON text, or pre-parsed dict."""
    if isinstance(source, dict):
        doc = source
    else:
        text = source
        if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
            with open(source, "r", encoding="utf-8") as f:
                text = f.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: line {exc.lineno}: {exc.msg}")
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")

    train = train_config_from_dict(doc)

    raw_tasks = doc.get("tasks")
    if not raw_tasks or not isinstance(raw_tasks, list):
        raise ConfigError("config.tasks must be a non-empty list")
    tasks = []
    for i, entry in enumerate(raw_tasks):
        where = f"config.tasks[{i}]"
        _check_keys(entry, _TASK_KEYS, where)
        tasks.append(
            harness.TaskSpec(
                task_id=_get(entry, "task_id", int, i, where),
                kind=_get(entry, "kind", str, "teacher-regression", where),
                in_dim=_get(entry, "in_dim", int, 32, where),
                out_dim=_get(entry, "out_dim", int, 32, where),
                n_samples=_get(entry, "n_samples", int, 512, where),
                seed=_get(entry, "seed", int, i, where),
            )
        )

    weights = doc.get("mix_weights")
    if weights is None:
        weights = [1.0] * len(tasks)
    if not isinstance(weights, list) or len(weights) != len(tasks):
        raise ConfigError("config.mix_weights must list one weight per task")
    weights = [float(w) for w in weights]

    data = doc.get("data", {}) or {}
    _check_keys(data, _DATA_KEYS, "config.data")
    data_kwargs = {}
    for key in _DATA_KEYS:
        if key in data and data[key] is not None:
            data_kwargs[key] = data[key]

    bench = doc.get("bench", {}) or {}
    _check_keys(bench, _BENCH_KEYS, "config.bench")

    out = doc.get("output", {}) or {}
    _check_keys(out, _OUTPUT_KEYS, "config.output")

    return RunConfig(
        train=train,
        tasks=tasks,
        mix_weights=weights,
        family_seed=_get(doc, "family_seed", int, 0, "config"),
        data_kwargs=data_kwargs,
        bench=dict(bench),
        checkpoint_path=_get(out, "checkpoint", str, None, "config.output"),
        metrics_path=_get(out, "metrics", str, None, "config.output"),
    )
