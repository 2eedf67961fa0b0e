"""Command line driver: ``hymik fit``, ``hymik simulate`` and ``hymik bench``.

Reports are JSON documents with a fixed key order. Everything in the main
report is deterministic for a given configuration; wall-clock figures go to a
``<out>.timings.json`` sidecar so repeated runs give byte-identical reports.

Exit codes: 0 converged with constraints satisfied, 1 usage or input error,
2 fit error, 3 fit finished but did not converge or violates constraints.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .inference import fit
from .io import (MissingCell, NegativeCount, ParseError, data_path, dumps_report, load_counts,
                 load_graph, write_counts)
from .likelihoods import LikelihoodError
from .model import Hyperparameters, build_latent_model
from .simulate import DEFAULT_TAUS, SimulationConfig, simulate_dataset

__all__ = ["main", "run_fit", "resolve_threads", "CONSTRAINT_TOL", "THREADS_ENV"]

THREADS_ENV = "HYMIK_THREADS"
CONSTRAINT_TOL = 1e-6
EXIT_OK, EXIT_USAGE, EXIT_FIT, EXIT_UNCONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


INPUT_ERRORS = (UsageError, OSError, ParseError, MissingCell, NegativeCount, LikelihoodError)


def resolve_threads(flag: int | None) -> int:
    """Thread budget: the flag wins, then ``HYMIK_THREADS``, then 1."""
    if flag is not None:
        n = flag
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None or raw.strip() == "":
            return 1
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"thread budget must be >= 1, got {n}")
    return n


def _resolve_file(arg: str, suffix: str) -> Path:
    """A path, or the name of a bundled asset (``germany`` -> ``germany.graph``)."""
    p = Path(arg)
    if p.exists():
        return p
    for name in (arg, arg + suffix):
        q = data_path(name)
        if q.exists():
            return q
    raise UsageError(f"no such file or bundled asset: {arg}")


def _config(args) -> dict:
    return {
        "data": str(args.data), "graph": str(args.graph), "family": args.family,
        "constraints": args.constraints, "method": args.method, "split": args.split,
        "order": args.order, "scale": bool(args.scale), "cumulative": bool(args.cumulative),
        "raw_constraints": bool(args.raw_constraints), "strategy": args.strategy,
        "seed": args.seed, "version": __version__,
    }


def _report_doc(cfg: dict, rep) -> dict:
    ok = rep.converged and rep.constraint_residual <= CONSTRAINT_TOL
    hyper = [{"name": h["name"], "mean": h["mean"], "sd": h["sd"], "mode": h["mode"]} for h in rep.hyper]
    counters = {k: int(v) for k, v in sorted(rep.counters.items())}
    return {
        "status": "ok" if ok else "not_converged",
        "config": cfg,
        "hyper": hyper,
        "latent": {
            "blocks": {name: [sl.start, sl.stop] for name, sl in rep.blocks},
            "means": rep.latent_means,
            "sds": rep.latent_sds,
        },
        "avg_marginal_loglik": rep.avg_marginal_loglik,
        "corrected": rep.corrected,
        "timings": counters,
        "method": rep.method,
        "constraints": rep.constraints,
        "converged": rep.converged,
        "constraint_residual": rep.constraint_residual,
        "warnings": list(rep.warnings),
    }


def _error_doc(cfg: dict | None, err: BaseException) -> dict:
    return {"status": "error", "config": cfg,
            "error": {"type": type(err).__name__, "message": str(err)}}


def _write(path, doc: dict) -> None:
    Path(path).write_text(dumps_report(doc))


def _sidecar(out, tag: str) -> Path:
    out = Path(out)
    return out.with_name(out.name[:-5] + f".{tag}.json" if out.name.endswith(".json")
                         else out.name + f".{tag}.json")


def run_fit(cfg: dict, threads: int = 1, method: str | None = None):
    """Load inputs, build the model and fit. Returns ``(report, seconds)``."""
    graph = load_graph(_resolve_file(cfg["graph"], ".graph"))
    obs = load_counts(_resolve_file(cfg["data"], ".csv"), family=cfg["family"],
                      cumulative=cfg["cumulative"], n_S=graph.n_nodes)
    if obs.n_S != graph.n_nodes:
        raise UsageError(f"data has {obs.n_S} regions, graph has {graph.n_nodes} nodes")
    t0 = time.perf_counter()
    model = build_latent_model(graph, obs.n_T, cfg["order"], family=cfg["family"],
                               constraints=cfg["constraints"], method=method or cfg["method"],
                               split=cfg["split"], scale=cfg["scale"],
                               raw_constraints=cfg["raw_constraints"] and (method or cfg["method"]) == "kriging")
    build = time.perf_counter() - t0
    rep = fit(model, obs, threads=threads, strategy=cfg["strategy"], seed=cfg["seed"])
    seconds = dict(rep.seconds)
    seconds["model_build"] = build
    seconds["total"] = seconds.get("total", 0.0) + build
    return rep, seconds


def _write_pairs(path, a, b) -> dict:
    """Paired latent means of two fits; returns agreement statistics for the interaction."""
    blocks = {name: sl for name, sl in a.blocks}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block", "index", "kriging_mean", "hymik_mean", "kriging_sd", "hymik_sd"])
        for name, sl in a.blocks:
            for i in range(sl.start, sl.stop):
                w.writerow([name, i - sl.start, "%.17g" % a.latent_means[i], "%.17g" % b.latent_means[i],
                            "%.17g" % a.latent_sds[i], "%.17g" % b.latent_sds[i]])
    sl = blocks["delta"]
    da, db = a.latent_means[sl], b.latent_means[sl]
    corr = float(np.corrcoef(da, db)[0, 1]) if da.size > 1 and np.std(da) > 0 and np.std(db) > 0 else 1.0
    return {"delta_pearson": corr, "delta_max_abs_diff": float(np.max(np.abs(da - db)))}


def _phases(seconds: dict) -> dict:
    keys = ("model_build", "mode_search", "grid", "factorization", "kriging", "selected_inversion")
    return {k: float(seconds.get(k, 0.0)) for k in keys} | {"total": float(seconds["total"])}


def _cmd_fit(args, compare: bool, repeats: int = 1, warmup: int = 0) -> int:
    cfg = None
    try:
        threads = resolve_threads(args.threads)
        cfg = _config(args)
        methods = ("kriging", "hymik") if compare else (args.method,)
        reports, times = {}, {}
        for m in methods:
            for _ in range(warmup):
                run_fit(cfg, threads, m)
            runs = []
            for _ in range(repeats):
                rep, sec = run_fit(cfg, threads, m)
                runs.append(sec)
            reports[m] = rep
            totals = [r["total"] for r in runs]
            times[m] = {"runs": totals, "median": statistics.median(totals),
                        "phases": _phases(runs[int(np.argsort(totals)[len(totals) // 2])])}
    except Exception as err:  # any fit failure becomes a machine-readable report
        if args.out:
            _write(args.out, _error_doc(cfg, err))
        print(json.dumps({"status": "error", "type": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return EXIT_USAGE if isinstance(err, INPUT_ERRORS) else EXIT_FIT

    main_rep = reports[args.method]
    doc = _report_doc(cfg, main_rep)
    sidecar = {"method": args.method, "threads": threads, "repeats": repeats, "warmup": warmup,
               "seconds": times[args.method]}
    if compare:
        pairs_path = _sidecar(args.out, "pairs")
        pairs_path = pairs_path.with_suffix(".csv")
        agreement = _write_pairs(pairs_path, reports["kriging"], reports["hymik"])
        factor = times["kriging"]["median"] / times["hymik"]["median"]
        doc["comparison"] = agreement | {
            "pairs": pairs_path.name,
            "other_method": {m: _report_doc(cfg, reports[m])["hyper"] for m in methods if m != args.method},
        }
        sidecar = {"threads": threads, "repeats": repeats, "warmup": warmup,
                   "methods": times, "computational_factor": factor}
        print(f"computational factor (kriging / hymik): {factor:.3f}")
        print(f"interaction means: pearson {agreement['delta_pearson']:.6f}, "
              f"max |diff| {agreement['delta_max_abs_diff']:.3g}")
    _write(args.out, doc)
    _write(_sidecar(args.out, "timings"), sidecar)
    for h in doc["hyper"]:
        print(f"{h['name']:>10s}  mean {h['mean']:.6g}  sd {h['sd']:.4g}")
    mu = main_rep.latent_means[0]
    print(f"{'mu':>10s}  mean {mu:.6g}  sd {main_rep.latent_sds[0]:.4g}")
    print(f"avg marginal loglik {main_rep.avg_marginal_loglik:.6f}"
          + ("" if main_rep.corrected else " (uncorrected)"))
    ok = all(_report_doc(cfg, r)["status"] == "ok" for r in reports.values())
    if not ok:
        print("hymik: fit did not converge or reported means violate the constraints", file=sys.stderr)
    return EXIT_OK if ok else EXIT_UNCONVERGED


def _cmd_simulate(args) -> int:
    try:
        graph = load_graph(_resolve_file(args.graph, ".graph"))
        taus = Hyperparameters(args.tau_alpha, args.tau_gamma, args.tau_delta)
        cfg = SimulationConfig(graph, args.nt, args.order, taus, args.intercept,
                               args.replicates, args.seed, args.exposure)
        sim = simulate_dataset(cfg)
    except UsageError as err:
        print(f"hymik: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as err:
        print(json.dumps({"status": "error", "type": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    write_counts(out, sim.obs, sim.replicate)
    truth = out.with_name(out.stem + ".truth.json")
    sim.write_truth(truth)
    print(f"wrote {sim.obs.n_obs} observations to {out} and ground truth to {truth}")
    return EXIT_OK


def _fit_arguments(p: argparse.ArgumentParser, compare_flag: bool = True) -> None:
    p.add_argument("--data", required=True, help="count CSV (time,region,count,exposure[,replicate])")
    p.add_argument("--graph", required=True, help="graph file or bundled name (germany, covid)")
    p.add_argument("--family", choices=("poisson", "negbinom"), default="poisson")
    p.add_argument("--constraints", choices=("gc", "sc"), default="sc")
    p.add_argument("--method", choices=("kriging", "hymik"), default="hymik")
    p.add_argument("--split", choices=("auto", "spatial", "temporal"), default="auto")
    p.add_argument("--order", type=int, choices=(1, 2), default=2, help="random-walk order")
    p.add_argument("--strategy", choices=("auto", "grid", "ccd"), default="auto")
    p.add_argument("--scale", action="store_true", help="scale structure matrices")
    if compare_flag:
        p.add_argument("--compare", action="store_true", help="fit with both methods")
    p.add_argument("--cumulative", action="store_true", help="difference cumulative counts")
    p.add_argument("--raw-constraints", action="store_true",
                   help="krige on the overdetermined interaction constraints (kriging only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help=f"thread budget (overrides ${THREADS_ENV})")
    p.add_argument("--out", required=True, help="report path (JSON)")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for fit errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hymik", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"hymik {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a space-time model")
    _fit_arguments(f)

    s = sub.add_parser("simulate", help="simulate replicated Poisson counts")
    s.add_argument("--graph", required=True)
    s.add_argument("--nt", type=int, required=True)
    s.add_argument("--order", type=int, choices=(1, 2), default=2)
    s.add_argument("--replicates", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--intercept", type=float, default=1.5)
    s.add_argument("--tau-alpha", type=float, default=DEFAULT_TAUS.tau_alpha)
    s.add_argument("--tau-gamma", type=float, default=DEFAULT_TAUS.tau_gamma)
    s.add_argument("--tau-delta", type=float, default=DEFAULT_TAUS.tau_delta)
    s.add_argument("--exposure", type=float, default=1.0)
    s.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="fit with both methods and report the computational factor")
    _fit_arguments(b, compare_flag=False)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--warmup", type=int, default=1)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return _cmd_simulate(args)
    if args.command == "bench":
        args.compare = True
        if args.repeats < 1 or args.warmup < 0:
            print("hymik: --repeats must be >= 1 and --warmup >= 0", file=sys.stderr)
            return EXIT_USAGE
        return _cmd_fit(args, True, args.repeats, args.warmup)
    return _cmd_fit(args, args.compare)


if __name__ == "__main__":
    sys.exit(main())
