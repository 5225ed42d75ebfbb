"""Command-line surface: budget, train, analyze, bench, eval.

Exit codes: 0 ok, 1 runtime error, 2 configuration error. The MALK_SEED
environment variable overrides the config seed for every command.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import analysis, checkpoint, harness, moe
from .linalg import Rng
from .config import RunConfig, parse_config
from .errors import ConfigError, MaloraError

# one transformer block of the 7B reference model: attention q/k/v plus the
# three MLP projections, repeated over 32 layers; hidden 4096, inner 11008
_LLAMA2_7B_BLOCK = [
    (4096, 4096),   # q
    (4096, 4096),   # k
    (4096, 4096),   # v
    (11008, 4096),  # up
    (11008, 4096),  # gate
    (4096, 11008),  # down
]
SITE_PRESETS = {
    "llama2-7b-linear-sites": {
        "sites": _LLAMA2_7B_BLOCK * 32,
        "base_params": 6_738_415_616,
    },
    "none": {"sites": [], "base_params": None},
}


def _load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path)
    env_seed = os.environ.get("MALK_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"MALK_SEED must be an integer, got {env_seed!r}")
    return cfg


def cmd_budget(args) -> int:
    cfg = _load_config(args.config)
    preset = SITE_PRESETS.get(args.preset)
    if preset is None:
        raise ConfigError(
            f"unknown preset {args.preset!r}; options: {sorted(SITE_PRESETS)}"
        )
    sites = preset["sites"]
    base = preset["base_params"]
    t = cfg.train
    in_dim = sites[0][1] if sites else 1
    bcfg = harness.budget_config(t, sites[0][0] if sites else 1, in_dim)
    main = moe.param_budget(t.method, sites, bcfg, base)
    baseline_cfg = dataclasses.replace(bcfg, r=args.baseline_r or t.r)
    baseline = moe.param_budget("molora", sites, baseline_cfg, base)

    print(f"method: {t.method}   sites: {len(sites)}   preset: {args.preset}")
    for label, row in (
        (t.method, main),
        (f"molora r={baseline_cfg.r} (baseline)", baseline),
    ):
        pct = f"{row['percent_of_base']:.2f}%" if "percent_of_base" in row else "-"
        print(
            f"  {label:<28} trainable {row['trainable']:>14,}  "
            f"frozen {row['frozen']:>14,}  of base {pct}"
        )
    if baseline["trainable"]:
        ratio = main["trainable"] / baseline["trainable"]
        print(f"  trainable ratio vs baseline: {ratio:.4f}  "
              f"(reduction {100 * (1 - ratio):.1f}%)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    dataset = cfg.make_dataset()
    model, history = harness.train(cfg.train, dataset)
    ckpt_path = args.checkpoint or cfg.checkpoint_path or "run.malk"
    metrics_path = args.metrics or cfg.metrics_path or "metrics.csv"
    meta = checkpoint.run_meta(cfg.echo(), cfg.train.seed)
    checkpoint.save_model(ckpt_path, model, meta)
    history.to_csv(metrics_path)
    final = history.rows[-1]
    print(f"trained {len(history.rows)} steps; final loss {final[2]:.6g}")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics:    {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    model, meta = checkpoint.load_model(args.checkpoint)
    cfg = parse_config(meta["config"])
    dataset = cfg.make_dataset()
    results = harness.evaluate(model, dataset)
    for task_id in sorted(results):
        entry = results[task_id]
        extra = f"  accuracy {entry['accuracy']:.4f}" if "accuracy" in entry else ""
        print(f"task {task_id}: loss {entry['loss']:.6g}{extra}")
    return 0


def cmd_analyze(args) -> int:
    model, meta = checkpoint.load_model(args.checkpoint)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    stem = os.path.join(out_dir, os.path.splitext(os.path.basename(args.checkpoint))[0])
    if args.kind == "cca":
        checkpoint.require_moe(model)
        report = analysis.expert_similarity([model.layer])
        report.write_csv(f"{stem}.cca.csv")
        report.write_json(f"{stem}.cca.json")
        summary = report.summary()
        for side in sorted(summary):
            s = summary[side]
            print(f"{side}-side mean CCA {s['mean']:.4f} (std {s['std']:.4f}, "
                  f"{s['count']} pairs)")
        print(f"reports: {stem}.cca.csv, {stem}.cca.json")
    elif args.kind == "spectrum":
        checkpoint.require_moe(model)
        reports = analysis.spectrum_reports([model.layer], threshold=args.threshold)
        analysis.write_spectrum_csv(reports, f"{stem}.spectrum.csv")
        analysis.write_spectrum_json(reports, f"{stem}.spectrum.json")
        for layer, entry in reports.items():
            for side, rep in entry.items():
                print(f"{layer} {side}-side: {rep.singular_values.size} values, "
                      f"{100 * rep.fraction_above:.1f}% above mean")
        print(f"reports: {stem}.spectrum.csv, {stem}.spectrum.json")
    else:  # beta-probe
        cfg = parse_config(meta["config"])
        if cfg.train.method != "malora":
            raise ConfigError("beta-probe needs a malora checkpoint")
        geom = cfg.train.geometry()
        betas = [float(b) for b in args.betas.split(",")]
        probe_rng = Rng(cfg.train.seed).child(99)
        x = probe_rng.normal((args.probe_batch, model.layer.in_dim))
        targets = probe_rng.normal((args.probe_batch, model.layer.out_dim))
        rows = analysis.beta_grad_probe(geom, x, targets, betas, seed=cfg.train.seed)
        analysis.write_probe_csv(rows, f"{stem}.beta-probe.csv")
        for row in rows:
            print(f"beta {row.beta:<6g} |grad P| {row.grad_p_norm:.6e}  "
                  f"|grad S_A| {row.grad_s_norm:.6e}")
        print(f"report: {stem}.beta-probe.csv")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    bench = cfg.bench
    dims = (int(bench.get("m", 1024)), int(bench.get("n", 1024)))
    batch = int(bench.get("batch", 64))
    methods = tuple(bench.get("methods", ["lora", "molora", "malora"]))
    rows = harness.bench_step(
        cfg.train, dims=dims, batch=batch, repetitions=args.reps, methods=methods
    )
    print(f"{'method':<10} {'Forward':>10} {'Backward':>10} {'Optimize':>10} "
          f"{'Total':>10}   adapter flops/row")
    for row in rows:
        print(f"{row.method:<10} {row.forward_ms:>9.3f}ms {row.backward_ms:>9.3f}ms "
              f"{row.optimize_ms:>9.3f}ms {row.total_ms:>9.3f}ms   "
              f"{row.adapter_flops_per_row:>12.0f}")
    by_method = {r.method: r for r in rows}
    if "molora" in by_method and "malora" in by_method:
        speedup = by_method["molora"].total_ms / by_method["malora"].total_ms
        print(f"molora/malora step-time ratio: {speedup:.3f}x")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="malora")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("budget", help="parameter budget table")
    b.add_argument("config")
    b.add_argument("--preset", default="llama2-7b-linear-sites")
    b.add_argument("--baseline-r", type=int, default=None,
                   help="rank of the molora baseline row (default: config r)")
    b.set_defaults(fn=cmd_budget)

    t = sub.add_parser("train", help="run one training config")
    t.add_argument("config")
    t.add_argument("--checkpoint", default=None)
    t.add_argument("--metrics", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="per-task metrics of a checkpoint")
    e.add_argument("checkpoint")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="expert diagnostics over a checkpoint")
    a.add_argument("kind", choices=["cca", "spectrum", "beta-probe"])
    a.add_argument("checkpoint")
    a.add_argument("--out-dir", default=None)
    a.add_argument("--betas", default="1,2,4")
    a.add_argument("--probe-batch", type=int, default=16)
    a.add_argument("--threshold", type=float, default=None,
                   help="spectrum cutoff (default: mean singular value)")
    a.set_defaults(fn=cmd_analyze)

    n = sub.add_parser("bench", help="per-phase step timing across methods")
    n.add_argument("config")
    n.add_argument("--reps", type=int, default=25)
    n.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MaloraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
