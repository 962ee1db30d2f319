"""Command-line harness: ``lossydc solve|compare|table|stress|robustness``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys

import numpy as np

from lossydc import experiments
from lossydc.analysis import certify_radial
from lossydc.caseio import dump_json, network_to_case
from lossydc.errors import (
    CaseSyntaxError,
    ConvergenceError,
    HypothesisViolationError,
    IndefiniteMatrixError,
    NonInductiveBranchError,
    PsiOutOfRangeError,
    SingularMatrixError,
    TopologyError,
)
from lossydc.solvers import SolveOptions, dcpf, mdcpf

logger = logging.getLogger("lossydc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARSE = 3
EXIT_MODEL = 4
EXIT_PSI = 5
EXIT_DIVERGED = 6
EXIT_LINEAR = 7

REASON_EXIT = {
    "psi_out_of_range": EXIT_PSI,
    "max_iter": EXIT_DIVERGED,
    "diverged": EXIT_DIVERGED,
    "linear_failure": EXIT_LINEAR,
}

SCHEMAS = {
    "solve": ["method", "bus", "theta_deg"],
    "compare": ["method", "k", "theta_err_deg", "psi_step", "inj_residual", "kvl_residual"],
    "table": ["case", "k", "theta_err_deg"],
    "stress": ["case", "lambda_star", "fraction", "lambda", "nr_solvable", "note"],
    "robustness": ["phi_deg", "method", "success_rate"],
}


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _methods(text: str) -> list[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    bad = [m for m in out if m not in experiments.METHODS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"methods must be a non-empty subset of {','.join(experiments.METHODS)}")
    return out


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return _jsonable(value.item())
    return value


def _emit(args, kind: str, rows: list[dict], meta: dict | None = None) -> None:
    if args.format == "json":
        doc = dict(meta or {})
        doc["rows"] = rows
        text = json.dumps(_jsonable(doc), indent=1) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=SCHEMAS[kind], extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        text = buf.getvalue()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _study(args):
    return experiments.load_study(args.case, args.start, lam=args.lam, stress_fraction=args.stress_fraction)


def _meta(study) -> dict:
    meta = {"case": study.name, "lambda": study.lam}
    if study.lambda_star is not None:
        meta["lambda_star"] = study.lambda_star
        meta["loading_note"] = experiments.STRESS_NOTE
    return meta


# ---------------------------------------------------------------- commands

def cmd_solve(args) -> int:
    study = _study(args)
    net, cache = study.net, study.cache
    ids = [cache.bus_ids[i] for i in cache.nonslack]
    rows, reports, code = [], [], EXIT_OK
    for method in args.methods:
        report = {"method": method}
        if method in ("dcpf", "mdcpf"):
            try:
                theta = dcpf(net, cache) if method == "dcpf" else mdcpf(net, cache)[0]
                report.update(status="converged", iterations=0)
            except PsiOutOfRangeError as exc:
                report.update(status="psi_out_of_range", message=str(exc))
                code = code or EXIT_PSI
                reports.append(report)
                continue
        else:
            opts = SolveOptions(max_iterations=args.max_iter, tolerance=args.tol, psi_guard=args.psi_guard)
            theta, trace = experiments.run_method(method, net, cache, opts)
            report.update(status=trace.reason, iterations=trace.iterations, clamped=trace.clamped,
                          injection_residual=trace.records[-1].injection_residual,
                          kvl_residual=trace.records[-1].kvl_residual)
            if not trace.converged:
                code = code or REASON_EXIT.get(trace.reason, EXIT_FAILURE)
        theta_deg = np.degrees(theta)
        report["theta_deg"] = dict(zip(map(str, ids), theta_deg.tolist()))
        reports.append(report)
        rows.extend(dict(method=method, bus=b, theta_deg=float(t)) for b, t in zip(ids, theta_deg))
    meta = _meta(study)
    meta["methods"] = reports
    if cache.radial:
        try:
            cert = certify_radial(net, cache)
            meta["certificate"] = cert.to_dict(bound_iterations=args.bound_iterations)
        except HypothesisViolationError as exc:
            if args.certify:
                raise
            meta["certificate"] = {"refused": str(exc)}
    elif args.certify:
        raise HypothesisViolationError(f"certificate requires a radial network (found {cache.c} cycles)")
    _emit(args, "solve", rows, meta)
    return code


def cmd_compare(args) -> int:
    study = _study(args)
    rows = experiments.compare(study, args.methods, iterations=args.max_iter, tolerance=args.tol,
                               psi_guard=args.psi_guard)
    _emit(args, "compare", rows, _meta(study))
    return EXIT_OK


def cmd_table(args) -> int:
    study = _study(args)
    rows = experiments.error_table(study, args.k)
    _emit(args, "table", rows, _meta(study))
    return EXIT_OK


def cmd_stress(args) -> int:
    base = experiments.load_study(args.case, args.start, lam=args.lam)
    fraction = args.stress_fraction if args.stress_fraction is not None else 0.9
    study = experiments.stress(base, fraction)
    ok = experiments.nr_solvable(study.net, study.cache)
    row = dict(case=study.name, lambda_star=study.lambda_star, fraction=fraction, **{"lambda": study.lam},
               nr_solvable=ok, note=experiments.STRESS_NOTE)
    if args.save_case:
        with open(args.save_case, "w") as fh:
            fh.write(dump_json(network_to_case(study.net, name=f"{study.name}_x{study.lam:.6g}")))
    _emit(args, "stress", [row], _meta(study))
    return EXIT_OK if ok else EXIT_DIVERGED


def cmd_robustness(args) -> int:
    study = _study(args)
    methods = [m for m in args.methods if m in ("nr", "cnr", "lmdcpf", "ldcpf")]
    rows = experiments.robustness(study, args.phi, trials=args.trials, seed=args.seed, methods=methods,
                                  max_iterations=args.max_iter)
    meta = _meta(study)
    meta.update(trials=args.trials, seed=args.seed, success_tol_deg=experiments.SUCCESS_TOL_DEG)
    _emit(args, "robustness", rows, meta)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", required=True, help="case file (.m or .json) or bundled case name")
    common.add_argument("--start", choices=("hot", "cold"), default="hot")
    load = common.add_mutually_exclusive_group()
    load.add_argument("--lambda", dest="lam", type=float, help="scale non-slack injections by this factor")
    load.add_argument("--stress-fraction", type=float, help="load to this fraction of the NR solvability limit")
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iter", type=int)
    common.add_argument("--psi-guard", choices=("fail", "clamp"), default="fail")
    common.add_argument("--out", help="output file (default stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lossydc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve with one or more methods")
    p.add_argument("--methods", type=_methods, default=["lmdcpf"])
    p.add_argument("--certify", action="store_true", help="fail if the radial certificate is refused")
    p.add_argument("--bound-iterations", type=int, default=10)
    p.set_defaults(func=cmd_solve, tol=1e-10, max_iter=50)

    p = sub.add_parser("compare", parents=[common], help="per-iteration error traces")
    p.add_argument("--methods", type=_methods, default=list(experiments.METHODS))
    p.set_defaults(func=cmd_compare, tol=1e-13, max_iter=50)

    p = sub.add_parser("table", parents=[common], help="frozen-x L-MDCPF errors after k iterations")
    p.add_argument("--k", type=_int_list, default=[1, 2, 3])
    p.set_defaults(func=cmd_table, tol=1e-10, max_iter=50)

    p = sub.add_parser("stress", parents=[common], help="locate the solvability limit by bisection")
    p.add_argument("--save-case", help="write the scaled case as canonical JSON")
    p.set_defaults(func=cmd_stress, tol=1e-10, max_iter=50)

    p = sub.add_parser("robustness", parents=[common], help="success rates from random initial angles")
    p.add_argument("--methods", type=_methods, default=["nr", "cnr", "lmdcpf"])
    p.add_argument("--phi", type=_float_list, default=[0, 15, 20, 25, 30, 40, 70, 80])
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_robustness, tol=1e-10, max_iter=200)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "trials", 1) < 1:
        parser.error("--trials must be at least 1")
    if any(p < 0 for p in getattr(args, "phi", [])):
        parser.error("--phi values must be non-negative")
    try:
        return args.func(args)
    except (CaseSyntaxError, FileNotFoundError) as exc:
        print(f"error: cannot read case: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (HypothesisViolationError, TopologyError, NonInductiveBranchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except PsiOutOfRangeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PSI
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IndefiniteMatrixError, SingularMatrixError) as exc:
        print(f"error: linear solve failed: {exc}", file=sys.stderr)
        return EXIT_LINEAR


if __name__ == "__main__":
    sys.exit(main())
