"""Command-line surface: train, sweep-rho, diagnose, landscape,
verify-theorem, compare."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from . import autodiff as ad
from . import diagnostics as dg
from . import harness as hn
from . import optim as op

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_ASSERTION = 4


def _load_config(args) -> hn.RunConfig:
    if args.config is None:
        cfg = hn.RunConfig()
    else:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = hn.RunConfig.from_json(fh.read())
    if args.seed is not None:
        cfg = replace(cfg, task=replace(cfg.task, seed=args.seed),
                      optimizer=replace(cfg.optimizer, seed=args.seed))
    if args.rho is not None:
        cfg = replace(cfg, optimizer=replace(cfg.optimizer, rho=args.rho))
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _emit(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _write_json(out_dir: str | None, name: str, payload: dict) -> None:
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg = _load_config(args)
    res = hn.run_train(cfg, out_dir=cfg.out_dir)
    _emit(args, json.dumps(res.summary(), sort_keys=True))
    return EXIT_NUMERICAL if res.failed else EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    cfg = replace(cfg, optimizer=replace(cfg.optimizer, rho=0.0))
    res = hn.run_train(cfg, out_dir=cfg.out_dir)
    payload = res.summary()
    payload["estimates"] = [e.to_dict() for e in res.estimates]
    _emit(args, json.dumps(payload, sort_keys=True))
    return EXIT_NUMERICAL if res.failed else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rhos = [float(r) for r in args.rhos.split(",")]
    result = hn.sweep_rho(cfg, rhos)
    payload = {
        "schema_version": hn.SCHEMA_VERSION,
        "entries": [asdict(e) for e in result.entries],
        "empirical_cor": result.empirical_cor,
        "theoretical_cor": result.theoretical_cor,
        "all_collapsed": result.all_collapsed,
        "none_collapsed": result.none_collapsed,
        "monotone": result.monotone,
    }
    _write_json(cfg.out_dir, "sweep.json", payload)
    _emit(args, json.dumps(payload, sort_keys=True))
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _load_config(args)
    res = hn.run_train(cfg)
    if res.failed:
        return EXIT_NUMERICAL
    feats = hn.build_features(cfg)
    problem = (op.LogisticProbeProblem(feats.train, feats.train_labels)
               if cfg.loss == "bce"
               else hn.quadratic_surrogate(feats.train, feats.train_labels))

    def loss_fn(w):
        return problem.loss_and_grad(w)[0]

    dim = res.weights.size
    sample = dg.landscape_sample(loss_fn, res.weights,
                                 [slice(0, dim - 1), slice(dim - 1, dim)],
                                 seed=cfg.optimizer.seed)
    out_dir = cfg.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    dg.landscape_to_csv(sample, os.path.join(out_dir, "landscape.csv"))
    _emit(args, f"landscape grid written ({len(sample['non_finite_cells'])} "
                f"non-finite cells)")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = hn.verify_theorem_campaign(args.instances, seed=args.seed or 0)
    payload = {
        "schema_version": hn.SCHEMA_VERSION,
        "n_instances": report.n_instances,
        "n_passed": report.n_passed,
        "max_rel_gap": report.max_rel_gap,
        "min_wellposed": report.min_wellposed,
        "elapsed_s": report.elapsed_s,
        "failures": report.failures,
    }
    _write_json(args.out, "verify_theorem.json", payload)
    _emit(args, json.dumps({k: payload[k] for k in
                            ("n_instances", "n_passed", "max_rel_gap")},
                           sort_keys=True))
    return EXIT_OK if report.passed else EXIT_ASSERTION


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    report = hn.corit_vs_baseline(cfg)
    payload = {
        "schema_version": hn.SCHEMA_VERSION,
        "plain_cor": report.plain_cor,
        "corit_cor": report.corit_cor,
        "plain_collapse_zone": report.plain_collapse_zone,
        "corit_collapse_zone": report.corit_collapse_zone,
        "lifted": report.lifted,
    }
    _write_json(cfg.out_dir, "compare.json", payload)
    _emit(args, json.dumps(payload, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corlab",
                                description="SAM collapse laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="run config JSON path")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="seed override")
        sp.add_argument("--rho", type=float, default=None, help="rho override")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("train", help="single training run with metrics")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("sweep-rho", help="collapse sweep with bisection")
    common(sp)
    sp.add_argument("--rhos", default="0.005,0.02,0.08",
                    help="comma-separated ascending rho list")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("diagnose", help="rho=0 run with spectral diagnostics")
    common(sp)
    sp.set_defaults(fn=cmd_diagnose)

    sp = sub.add_parser("landscape", help="loss surface grid around the fit")
    common(sp)
    sp.set_defaults(fn=cmd_landscape)

    sp = sub.add_parser("verify-theorem", help="factorization identity campaign")
    common(sp)
    sp.add_argument("--instances", type=int, default=100)
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("compare", help="plain probe vs region-token head")
    common(sp)
    sp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ad.NonFiniteError, FloatingPointError, np.linalg.LinAlgError,
            RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
