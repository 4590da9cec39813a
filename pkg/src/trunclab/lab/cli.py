"""Command-line interface.

    trunclab train        --config cfg.json [--seeds 0,1] [--set update.eta=0.03] --out runs/
    trunclab sweep        --config cfg.json --rules bptt,three_factor_sym --seeds 0,1,2,3,4 --out runs/
    trunclab step-match   --config cfg.json --reference three_factor_sym [--lr-multiplier 3] --out runs/
    trunclab early-stop   --config cfg.json [--target 0.8] [--reference-rule three_factor_sym] --out runs/
    trunclab theorem-check [--rules bptt,three_factor_sym] [--seeds 0..9] [--eta 0.05] --out runs/
    trunclab curvature    --config cfg.json --params runs/x.params.json [--seed 0] [--k 10]
    trunclab plot         --records runs/ [--out figs/]

The exit code is 1 if any run aborted, unless ``--allow-partial`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..core import NeuronConfig, init_params
from ..curvature import curvature_report
from ..errors import TruncLabError
from .config import ExperimentConfig, apply_overrides, load_config, parse_override
from .persist import dump_json, emit_outputs, load_params, load_records
from .runner import (prepare_task, run_early_stop_control, run_step_matched, run_sweep, run_training,
                     summarize)

log = logging.getLogger("trunclab")


def _seeds(text):
    if text is None:
        return None
    out = []
    for part in text.split(","):
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _config(args) -> ExperimentConfig:
    d = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    overrides = dict(parse_override(s) for s in (args.set or []))
    if getattr(args, "data_dir", None):
        overrides["task.mnist_dir"] = args.data_dir
    cfg = ExperimentConfig.from_dict(apply_overrides(d, overrides))
    seeds = _seeds(getattr(args, "seeds", None))
    if seeds:
        cfg = cfg.replace(seeds=seeds)
    return cfg


def _out_dir(args, cfg):
    out = args.out or cfg.out_dir or "runs"
    Path(out).mkdir(parents=True, exist_ok=True)
    return out


def _finish(records, out, args, summary=None) -> int:
    if records:
        emit_outputs(records, out)
    if summary is not None:
        dump_json(summary.to_dict(), Path(out) / "summary.json")
        print(json.dumps({k: v for k, v in summary.to_dict().items() if k != "per_rule"}, default=str))
        for rule, st in summary.per_rule.items():
            print(f"{rule}: n={st['n_completed']} lambda1={st['lambda1_mean']:.4g}+-{st['lambda1_std']:.3g} "
                  f"gap={st['gap_mean']:.4g}+-{st['gap_std']:.3g}")
    aborted = [r.run_id for r in records if not r.completed]
    if aborted:
        print(f"aborted runs: {', '.join(aborted)}", file=sys.stderr)
        if not args.allow_partial:
            return 1
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    records = [run_training(cfg, s, out) for s in cfg.seeds]
    for r in records:
        fin = r.final or {}
        print(f"{r.run_id}: completed={r.completed} lambda1={fin.get('lambda1')} gap={fin.get('gap')}")
    return _finish(records, out, args)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    records = []
    summary = run_sweep(cfg, args.rules.split(","), cfg.seeds, out, records_out=records)
    return _finish(records, out, args, summary)


def cmd_step_match(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    records = []
    summary = run_step_matched(cfg, args.reference, cfg.seeds, out, args.lr_multiplier, records_out=records)
    return _finish(records, out, args, summary)


def cmd_early_stop(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    ref_records = []
    if args.target is None:
        run_sweep(cfg, [args.reference_rule], cfg.seeds, out, records_out=ref_records)
        done = [r for r in ref_records if r.completed]
        if not done:
            print("reference sweep produced no completed runs", file=sys.stderr)
            return 1
        target = float(np.mean([r.final["test_metric"] for r in done]))
    else:
        target = args.target
    records = []
    summary = run_early_stop_control(cfg, target, cfg.seeds, out, reference=ref_records, records_out=records)
    return _finish(records + ref_records, out, args, summary)


def cmd_theorem_check(args) -> int:
    from ..theorem import bound_check, run_fixed_point
    ncfg = NeuronConfig(n_hidden=args.n_hidden, n_in=1, n_out=1, activation=args.activation)
    reports = []
    for rule in args.rules.split(","):
        for seed in _seeds(args.seeds):
            rng = np.random.default_rng(seed)
            params = init_params(ncfg, rng)
            x = rng.standard_normal((1, args.T, 1))
            rep, _ = run_fixed_point(params, ncfg, (x, args.target), rule, args.eta, max_iter=args.max_iter,
                                     seed=seed)
            d = rep.to_dict()
            d["verdict"] = bound_check(rep)
            reports.append(d)
            print(f"{rule} seed={seed}: converged={rep.converged} lambda1={rep.lambda1_H:.4g} "
                  f"bound={rep.bound:.4g} rank1={rep.jacobian_rank1_residual:.2e} "
                  f"relation={rep.eigenvalue_relation_residual:.2e} -> {d['verdict']}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        dump_json({"reports": reports}, Path(args.out) / "theorem_check.json")
    return 1 if any(r["verdict"] == "violation" for r in reports) else 0


def cmd_curvature(args) -> int:
    cfg = _config(args)
    seed = cfg.seeds[0]
    data = prepare_task(cfg, seed)
    params = load_params(args.params)
    pb = data.probe
    rep = curvature_report(params, cfg.task.neuron_config(), pb.inputs, pb.targets, pb.spec,
                           block=args.block or cfg.probe.block, k=args.k, tol=cfg.probe.tol,
                           max_iter=cfg.probe.max_iter, seed=seed, flatness=args.flatness)
    print(json.dumps(rep.to_dict(), default=str))
    return 0


def cmd_plot(args) -> int:
    records = load_records(args.records)
    if not records:
        print(f"no records in {args.records}", file=sys.stderr)
        return 1
    out = args.out or args.records
    for p in emit_outputs(records, out):
        print(p)
    dump_json(summarize(records).to_dict(), Path(out) / "summary.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trunclab", description="Curvature and generalization experiments "
                                 "for exact and truncated RNN learning rules.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--data-dir", help="MNIST IDX directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--allow-partial", action="store_true", help="exit 0 even if runs aborted")
        if seeds:
            p.add_argument("--seeds", help="e.g. 0,1,2 or 0..4")

    p = sub.add_parser("train", help="train one run per seed")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="rules x seeds sweep with summary statistics")
    common(p)
    p.add_argument("--rules", default="bptt,three_factor_sym")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("step-match", help="BPTT with steps scaled by a reference rule's rho")
    common(p)
    p.add_argument("--reference", default="three_factor_sym")
    p.add_argument("--lr-multiplier", type=float, default=1.0)
    p.set_defaults(fn=cmd_step_match)

    p = sub.add_parser("early-stop", help="BPTT stopped at a target test metric")
    common(p)
    p.add_argument("--target", type=float, help="target test metric; default: reference sweep mean")
    p.add_argument("--reference-rule", default="three_factor_sym")
    p.set_defaults(fn=cmd_early_stop)

    p = sub.add_parser("theorem-check", help="fixed-point curvature bound on a scalar-output network")
    p.add_argument("--rules", default="bptt,three_factor_sym")
    p.add_argument("--seeds", default="0..9")
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--n-hidden", type=int, default=10)
    p.add_argument("--T", type=int, default=10)
    p.add_argument("--target", type=float, default=0.5)
    p.add_argument("--activation", default="tanh")
    p.add_argument("--max-iter", type=int, default=20000)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_theorem_check)

    p = sub.add_parser("curvature", help="curvature report for saved parameters")
    common(p)
    p.add_argument("--params", required=True)
    p.add_argument("--block")
    p.add_argument("--k", type=int, default=0)
    p.add_argument("--flatness", action="store_true")
    p.set_defaults(fn=cmd_curvature)

    p = sub.add_parser("plot", help="CSV traces and SVG figures from saved records")
    p.add_argument("--records", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (TruncLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
