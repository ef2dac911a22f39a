"""Command line entry point: generate, infer, diagnose, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .core import LsnmError, load_pair_text, save_pair_text, standardize
from .flow import FlowConfig, PRIORS
from .scm import FAMILIES, NoiseFamily, generate, sample_scm_spec
from .select import METHODS, infer


def _flow_args(p: argparse.ArgumentParser, method_default="it"):
    p.add_argument("--method", choices=sorted(METHODS), default=method_default)
    p.add_argument("--prior", choices=PRIORS, default="laplace")
    p.add_argument("--subflows", type=int, default=4)
    p.add_argument("--hidden", type=int, default=5)
    p.add_argument("--epochs", type=int, default=750)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--split", type=float, default=None,
                   help="training fraction (default 0.8 for ml, 1.0 otherwise)")
    p.add_argument("--seed", type=int, default=0)


def _config(a) -> FlowConfig:
    return FlowConfig(n_subflows=a.subflows, hidden_width=a.hidden, prior=a.prior, epochs=a.epochs,
                      l2_penalty=a.l2, learning_rate=a.lr, batch_size=a.batch_size)


def cmd_generate(a) -> int:
    spec = sample_scm_spec(a.family, NoiseFamily.parse(a.noise), a.alpha, a.seed)
    d = generate(spec, a.n, a.seed)
    out = Path(a.out)
    save_pair_text(d, out)
    manifest = spec.to_dict()
    manifest.update(seed=a.seed, n=a.n, truth=d.truth.value)
    manifest_path = Path(a.manifest) if a.manifest else out.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out} and {manifest_path}")
    return 0


def cmd_infer(a) -> int:
    d = load_pair_text(a.data)
    if not a.raw:
        d = standardize(d)
    v = infer(d, a.method, _config(a), a.split, a.seed)
    print(f"decision: {v.decision.value}")
    print(f"score_forward: {v.score_forward!r}")
    print(f"score_backward: {v.score_backward!r}")
    if v.degraded:
        print(f"degraded: {v.errors}", file=sys.stderr)
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("name", "method", "decision", "score_fwd", "score_bwd"))
            w.writerow((d.name, a.method, v.decision.value, repr(v.score_forward), repr(v.score_backward)))
    return v.decision.code


def cmd_diagnose(a) -> int:
    from . import diagnostics as dg

    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = NoiseFamily.parse(a.noise)
    cfg = FlowConfig(n_subflows=a.subflows, hidden_width=a.hidden, epochs=a.epochs, prior=a.prior)
    if a.what == "sweep":
        rows, agg = dg.alpha_sweep(a.family, noise, a.prior, a.alphas, range(a.seeds), a.n, cfg,
                                   tuple(a.methods))
        dg.write_sweep(rows, agg, out / "cells.csv", out / "summary.json")
    elif a.what == "suitability":
        spec = sample_scm_spec(a.family, noise, a.alpha, a.seed)
        rep = dg.suitability(spec, cfg, a.ns, a.trials, a.seed)
        with open(out / "suitability.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("N", "S_cause", "S_effect"))
            for n, sc, se in rep.rows:
                w.writerow((n, repr(sc), repr(se)))
    else:
        d = load_pair_text(a.data)
        rep = dg.misleading_cv(standardize(d), a.bins, a.cause_axis)
        print(json.dumps({"mvar_y_given_x": rep.mvar_y_given_x, "mvar_x_given_y": rep.mvar_x_given_y,
                          "misleading": rep.misleading, "n_bins": rep.n_bins}))
        return 0
    print(f"wrote results to {out}")
    return 0


def cmd_bench(a) -> int:
    from . import bench

    suite = bench.load_suite(a.suite, a.data_dir)
    res = bench.run_benchmark(suite, a.method, _config(a), a.split, a.seed, a.jobs, a.timeout)
    target = Path(a.out) if a.flat else bench.results_dir(a.out, a.suite, a.method, res.config)
    res.write(target)
    print(f"accuracy {res.accuracy:.4f} weighted {res.weighted_accuracy:.4f} -> {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lsnmflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a synthetic pair")
    g.add_argument("--family", choices=FAMILIES, default="lsnm-sine-tanh")
    g.add_argument("--noise", default="gaussian", help="e.g. uniform(-1,1)")
    g.add_argument("--alpha", type=float, default=1.0)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--manifest", default=None)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("infer", help="orient one pair")
    i.add_argument("data")
    _flow_args(i)
    i.add_argument("--raw", action="store_true", help="skip standardization")
    i.add_argument("--out", default=None, help="rows.csv path")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("diagnose", help="conditional variances, suitability, alpha sweeps")
    d.add_argument("what", choices=("sweep", "suitability", "cv"))
    d.add_argument("data", nargs="?", help="pair file for 'cv'")
    d.add_argument("--family", choices=FAMILIES, default="lsnm-sine-tanh")
    d.add_argument("--noise", default="uniform")
    d.add_argument("--prior", choices=PRIORS, default="gaussian")
    d.add_argument("--alphas", type=float, nargs="+", default=[0.1, 0.5, 1, 5, 10])
    d.add_argument("--alpha", type=float, default=1.0)
    d.add_argument("--seeds", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--n", type=int, default=10_000)
    d.add_argument("--ns", type=int, nargs="+", default=[50, 500, 1000, 5000])
    d.add_argument("--trials", type=int, default=10)
    d.add_argument("--methods", nargs="+", choices=("ml", "it"), default=["ml", "it"])
    d.add_argument("--subflows", type=int, default=4)
    d.add_argument("--hidden", type=int, default=5)
    d.add_argument("--epochs", type=int, default=750)
    d.add_argument("--bins", type=int, default=10)
    d.add_argument("--cause-axis", choices=("x", "y"), default="x")
    d.add_argument("--out", default="diagnostics")
    d.set_defaults(func=cmd_diagnose)

    b = sub.add_parser("bench", help="run a benchmark suite")
    b.add_argument("--suite", choices=("tuebingen", "sim", "sim-c", "sim-ln", "sim-g", "synthetic"), required=True)
    _flow_args(b)
    b.add_argument("--jobs", type=int, default=1)
    b.add_argument("--data-dir", default=None)
    b.add_argument("--timeout", type=float, default=600.0, help="seconds per dataset; 0 disables")
    b.add_argument("--out", default="results")
    b.add_argument("--flat", action="store_true", help="write directly into --out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING)
    if a.command == "diagnose" and a.what == "cv" and not a.data:
        print("diagnose cv needs a data file", file=sys.stderr)
        return 64
    try:
        return a.func(a)
    except (LsnmError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 64


if __name__ == "__main__":
    sys.exit(main())
