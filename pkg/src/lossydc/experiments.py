"""Experiment drivers behind the command-line interface.

Each function returns plain rows (lists of dicts) so the CLI can write
them as CSV or JSON and tests can inspect them directly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from lossydc.caseio import read_case, scale_loading, to_network
from lossydc.errors import ConvergenceError, PsiOutOfRangeError
from lossydc.netmodel import Network, TopologyCache, build_topology
from lossydc.solvers import (
    IterationTrace,
    SolveOptions,
    chord_newton,
    dcpf,
    ldcpf,
    lmdcpf,
    mdcpf,
    newton_raphson,
    reference_solution,
)

logger = logging.getLogger(__name__)

METHODS = ("dcpf", "mdcpf", "ldcpf", "lmdcpf", "nr", "cnr")
STRESS_NOTE = (
    "loading = uniform scaling of non-slack injections; insolvability located by "
    "bisection on Newton-Raphson solvability from flat start (approximates continuation power flow)"
)
SUCCESS_TOL_DEG = 1e-6
# full Newton converges in under ten steps when it converges at all; undamped
# runs that wander are cut off here instead of at the fixed-point budget
NR_MAX_ITERATIONS = 50


@dataclass(frozen=True, eq=False)
class Study:
    """A network ready for solving, with its cache and loading metadata."""

    name: str
    net: Network
    cache: TopologyCache
    lam: float = 1.0
    lambda_star: float | None = None


def load_study(case: str, start: str = "hot", lam: float | None = None,
               stress_fraction: float | None = None) -> Study:
    cf = read_case(case)
    net = to_network(cf, start)
    cache = build_topology(net)
    study = Study(cf.name or str(case), net, cache)
    if stress_fraction is not None:
        return stress(study, stress_fraction)
    if lam is not None:
        return Study(study.name, scale_loading(net, lam), cache, lam)
    return study


def nr_solvable(net: Network, cache: TopologyCache, max_iterations: int = 50) -> bool:
    opts = SolveOptions(max_iterations=max_iterations, tolerance=1e-10, record=False)
    _, trace = newton_raphson(net, cache, None, opts)
    return trace.converged


def find_lambda_star(net: Network, cache: TopologyCache, resolution: float = 1e-3,
                     max_iterations: int = 50) -> float:
    """Largest injection scaling (to ``resolution``) at which NR from flat start converges."""
    if not nr_solvable(net, cache, max_iterations):
        raise ConvergenceError("base case is not solvable by Newton-Raphson from flat start")
    lo, hi = 1.0, 2.0
    while nr_solvable(scale_loading(net, hi), cache, max_iterations):
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise ConvergenceError("no insolvability found up to loading 1e6")
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if nr_solvable(scale_loading(net, mid), cache, max_iterations):
            lo = mid
        else:
            hi = mid
    return lo


def stress(study: Study, fraction: float, resolution: float = 1e-3) -> Study:
    lam_star = find_lambda_star(study.net, study.cache, resolution)
    lam = fraction * lam_star
    return Study(study.name, scale_loading(study.net, lam), study.cache, lam, lam_star)


# ---------------------------------------------------------------- compare

def run_method(method: str, net: Network, cache: TopologyCache, opts: SolveOptions,
               theta0=None) -> tuple[np.ndarray, IterationTrace]:
    """Run one iterative method from ``theta0`` (flat start if None)."""
    if method == "lmdcpf":
        psi0 = None if theta0 is None else np.sin(cache.A_r.T @ theta0)
        state, trace = lmdcpf(net, cache, opts, psi0=psi0)
        return state.theta_r, trace
    if method == "ldcpf":
        state, trace = ldcpf(net, cache, opts, theta0)
        return state.theta_r, trace
    if method == "nr":
        return newton_raphson(net, cache, theta0, opts)
    if method == "cnr":
        return chord_newton(net, cache, theta0, opts)
    raise ValueError(f"not an iterative method: {method!r}")


def compare(study: Study, methods, iterations: int = 50, tolerance: float = 1e-13,
            reference=None, psi_guard: str = "fail") -> list[dict]:
    """Per-iteration angle errors of each method against the NR reference."""
    net, cache = study.net, study.cache
    if reference is None:
        reference = reference_solution(net, cache)
    rows = []
    for method in methods:
        if method in ("dcpf", "mdcpf"):
            theta = dcpf(net, cache) if method == "dcpf" else mdcpf(net, cache)[0]
            err = math.degrees(float(np.max(np.abs(theta - reference))))
            for k in range(1, iterations + 1):
                rows.append(dict(method=method, k=k, theta_err_deg=err, psi_step=math.nan,
                                 inj_residual=math.nan, kvl_residual=math.nan))
            continue
        opts = SolveOptions(max_iterations=iterations, tolerance=tolerance, reference=reference,
                            psi_guard=psi_guard)
        _, trace = run_method(method, net, cache, opts)
        for r in trace.records:
            rows.append(dict(method=method, k=r.k, theta_err_deg=r.theta_err_deg, psi_step=r.psi_step,
                             inj_residual=r.injection_residual, kvl_residual=r.kvl_residual))
    return rows


# ---------------------------------------------------------------- tables

def error_table(study: Study, ks, reference=None) -> list[dict]:
    """Frozen-x L-MDCPF angle error (degrees) after each ``k`` in ``ks``."""
    net, cache = study.net, study.cache
    if reference is None:
        reference = reference_solution(net, cache)
    kmax = max(ks)
    opts = SolveOptions(max_iterations=kmax, tolerance=1e-300, reference=reference, freeze_x=True)
    _, trace = lmdcpf(net, cache, opts)
    by_k = {r.k: r.theta_err_deg for r in trace.records}
    last = trace.records[-1].theta_err_deg
    if trace.reason == "psi_out_of_range":
        last = math.nan
    return [dict(case=study.name, k=k, theta_err_deg=by_k.get(k, last)) for k in ks]


# ---------------------------------------------------------------- robustness

def _err_deg(theta, reference) -> float:
    return math.degrees(float(np.max(np.abs(np.asarray(theta) - reference))))


def robustness_trial(study: Study, reference, phi_deg: float, rng: np.random.Generator,
                     methods, max_iterations: int, nr_max_iterations: int = NR_MAX_ITERATIONS) -> dict[str, bool]:
    """One random initialization, shared by every method in ``methods``."""
    net, cache = study.net, study.cache
    theta0 = np.radians(rng.uniform(-phi_deg, phi_deg, cache.n))
    out = {}
    for method in methods:
        # the lossy iteration may step outside |psi| < 1 from a random start; clamping
        # keeps it in the domain, a failure is then judged by the final answer
        guard = "clamp" if method == "lmdcpf" else "fail"
        tol = 1e-10 if method in ("nr", "cnr") else 1e-11
        cap = min(max_iterations, nr_max_iterations) if method == "nr" else max_iterations
        opts = SolveOptions(max_iterations=cap, tolerance=tol, psi_guard=guard, record=False)
        try:
            theta, trace = run_method(method, net, cache, opts, theta0)
        except PsiOutOfRangeError:
            out[method] = False
            continue
        out[method] = bool(trace.converged and np.all(np.isfinite(theta))
                           and _err_deg(theta, reference) <= SUCCESS_TOL_DEG)
    return out


def robustness(study: Study, phis, trials: int = 1000, seed: int = 0,
               methods=("nr", "cnr", "lmdcpf"), max_iterations: int = 200,
               reference=None, nr_max_iterations: int = NR_MAX_ITERATIONS) -> list[dict]:
    """Success rates from random initial angles uniform on ``[-phi, phi]`` degrees.

    Trial ``t`` at the ``i``-th ``phi`` draws from ``default_rng([seed, i, t])``
    so results do not depend on execution order.
    """
    if reference is None:
        reference = reference_solution(study.net, study.cache)
    rows = []
    for i, phi in enumerate(phis):
        wins = dict.fromkeys(methods, 0)
        for t in range(trials):
            rng = np.random.default_rng([seed, i, t])
            for method, ok in robustness_trial(study, reference, phi, rng, methods, max_iterations,
                                                       nr_max_iterations).items():
                wins[method] += ok
        for method in methods:
            rows.append(dict(phi_deg=phi, method=method, success_rate=wins[method] / trials))
        logger.info("phi=%g: %s", phi, {m: wins[m] / trials for m in methods})
    return rows
