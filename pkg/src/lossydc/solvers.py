"""Active power flow solvers on a fixed-voltage network.

The lossy iterations (:func:`lmdcpf`, :func:`ldcpf`) solve one DC power
flow per step with a loss-corrected injection vector; :func:`dcpf` and
:func:`mdcpf` are the one-shot baselines and :func:`newton_raphson` /
:func:`chord_newton` are the reference solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from lossydc.errors import ConvergenceError, PsiOutOfRangeError, SingularMatrixError
from lossydc.netmodel import Network, TopologyCache
from lossydc.splinalg import _amax, _fabs, factorize_lu

PSI_CLAMP = 1.0 - 1e-12
DIVERGENCE_LIMIT = 1e8
REASONS = ("converged", "max_iter", "psi_out_of_range", "linear_failure", "diverged")


@dataclass(frozen=True, eq=False)
class SolveOptions:
    max_iterations: int = 50
    tolerance: float = 1e-10
    reference: np.ndarray | None = None
    psi_guard: str = "fail"
    freeze_x: bool = False
    record: bool = True

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.psi_guard not in ("fail", "clamp"):
            raise ValueError(f"psi_guard must be 'fail' or 'clamp', got {self.psi_guard!r}")


@dataclass(frozen=True)
class IterationRecord:
    k: int
    theta_err_deg: float
    psi_step: float
    injection_residual: float
    kvl_residual: float


@dataclass
class IterationTrace:
    method: str
    records: list[IterationRecord] = field(default_factory=list)
    reason: str = "max_iter"
    clamped: bool = False

    @property
    def converged(self) -> bool:
        return self.reason == "converged"

    @property
    def iterations(self) -> int:
        return self.records[-1].k if self.records else 0

    def errors(self) -> np.ndarray:
        return np.array([r.theta_err_deg for r in self.records])

    def iterations_to(self, threshold_deg: float) -> int | None:
        """First k whose angle error is at or below ``threshold_deg``."""
        for r in self.records:
            if r.theta_err_deg <= threshold_deg:
                return r.k
        return None


@dataclass(frozen=True, eq=False)
class SolverState:
    k: int
    psi: np.ndarray
    x: np.ndarray
    theta_r: np.ndarray
    injection_residual: float
    kvl_residual: float


# ---------------------------------------------------------------- residuals

def active_residual(net: Network, cache: TopologyCache, theta_r) -> np.ndarray:
    """Injection mismatch ``P_r - (A_r D_B sin + G V^2 - |A|_r D_G cos)`` at ``theta_r``."""
    kern = cache.kernels
    d = kern.ArT @ np.asarray(theta_r, dtype=float)
    return (
        net.p_r
        - kern.Ar @ (kern.D_B * np.sin(d))
        - cache.G_diag * cache.v_r**2
        + kern.Aabs @ (kern.D_G * np.cos(d))
    )


def kvl_residual(cache: TopologyCache, psi) -> float:
    """Largest cycle sum of ``arcsin(psi)``, wrapped to (-pi, pi]."""
    if cache.c == 0:
        return 0.0
    s = cache.kernels.CT @ np.arcsin(np.clip(psi, -1.0, 1.0))
    wrapped = -np.remainder(-s + math.pi, 2 * math.pi) + math.pi
    return float(np.max(np.abs(wrapped)))


def _inf(v) -> float:
    return float(_amax(_fabs(v))) if np.size(v) else 0.0


def _err_deg(theta, reference) -> float:
    if reference is None:
        return math.nan
    return math.degrees(_inf(np.asarray(theta) - reference))


def _recover(cache: TopologyCache, psi) -> np.ndarray:
    return cache.angle_op.solve(cache.kernels.Ar @ np.arcsin(psi))


# ---------------------------------------------------------------- baselines

def dcpf(net: Network, cache: TopologyCache) -> np.ndarray:
    """Classical DC power flow ``L_B^{-1} P_r``."""
    return cache.L_B_op.solve(net.p_r)


def mdcpf(net: Network, cache: TopologyCache) -> tuple[np.ndarray, np.ndarray]:
    """Modified DC power flow: angles recovered through ``arcsin`` of the branch solution.

    Returns ``(theta_r, psi_mdc)``.
    """
    psi = cache.kernels.ArT @ cache.L_B_op.solve(net.p_r)
    if _inf(psi) >= 1.0:
        raise PsiOutOfRangeError(f"MDCPF branch solution has |psi| = {_inf(psi):.6g} >= 1")
    return _recover(cache, psi), psi


# ---------------------------------------------------------------- lossy iterations

def _state(net, cache, k, psi, x, theta, last: IterationRecord | None = None) -> SolverState:
    """Final solver state; reuses the residuals of ``last`` when it describes the same iterate."""
    if last is None:
        inj, kvl = _inf(active_residual(net, cache, theta)), kvl_residual(cache, psi)
    else:
        inj, kvl = last.injection_residual, last.kvl_residual
    return SolverState(k=k, psi=psi, x=x, theta_r=theta, injection_residual=inj, kvl_residual=kvl)


def _guard(values: np.ndarray, opts: SolveOptions, trace: IterationTrace, limit: float = 1.0):
    """Apply the |psi| < 1 guard; returns the (possibly clamped) array or None."""
    if values.size == 0 or np.abs(values).max() < limit:
        return values
    if not np.all(np.isfinite(values)):
        trace.reason = "linear_failure"
        return None
    if opts.psi_guard == "clamp":
        trace.clamped = True
        return np.clip(values, -PSI_CLAMP, PSI_CLAMP)
    trace.reason = "psi_out_of_range"
    return None


def lmdcpf(
    net: Network,
    cache: TopologyCache,
    opts: SolveOptions | None = None,
    psi0=None,
    x0=None,
) -> tuple[SolverState, IterationTrace]:
    """Lossy Modified DC Power Flow.

    Each step updates the cycle variable ``x`` by a chord-Newton step on
    ``C^T arcsin(psi) = 0`` (skipped on radial networks or when
    ``opts.freeze_x``), solves ``L_B delta = P_r[k]`` with the
    loss-corrected injections, forms ``psi = A_r^T delta + D_B^{-1} C x``
    and recovers angles by least squares.  Starts flat unless ``psi0`` /
    ``x0`` are given.
    """
    opts = opts or SolveOptions()
    kern = cache.kernels
    trace = IterationTrace("lmdcpf")
    psi = np.zeros(cache.m) if psi0 is None else np.array(psi0, dtype=float)
    x = np.zeros(cache.c) if x0 is None else np.array(x0, dtype=float)
    p_eff = net.p_r - cache.G_diag * cache.v_r**2
    AabsDG, D_B = kern.AabsDG, kern.D_B
    cyclic = cache.c > 0
    update_x = cyclic and not opts.freeze_x
    solve_L = cache.L_B_op.solve
    ref = opts.reference

    checked = _guard(psi, opts, trace)
    if checked is None:
        raise PsiOutOfRangeError("initial psi must satisfy |psi| < 1")
    psi = checked

    def record(k, theta, step):
        trace.records.append(
            IterationRecord(
                k=k,
                theta_err_deg=_err_deg(theta, ref),
                psi_step=step,
                injection_residual=_inf(active_residual(net, cache, theta)),
                kvl_residual=kvl_residual(cache, psi),
            )
        )

    if opts.record:
        record(0, _recover(cache, psi), math.nan)
    k = 0
    step = math.nan
    for k in range(1, opts.max_iterations + 1):
        if update_x:
            x = x - cache.cycle_op.solve(kern.CT @ np.arcsin(psi))
        new = kern.ArT @ solve_L(p_eff + AabsDG @ np.sqrt(1.0 - psi * psi))
        if cyclic:
            new = new + (kern.C @ x) / D_B
        clamped = False
        if new.size and not _amax(_fabs(new)) < 1.0:
            new = _guard(new, opts, trace)
            if new is None:
                k -= 1
                break
            clamped = True
        step = float(_amax(_fabs(new - psi))) if new.size else 0.0
        psi = new
        done = step <= opts.tolerance
        if opts.record:
            theta = _recover(cache, psi)
            record(k, theta, step)
        if done:
            # a fixed point of the clamped map is not a power flow solution
            trace.reason = "psi_out_of_range" if clamped else "converged"
            break
    theta = _recover(cache, psi) if not opts.record or k == 0 else theta
    if not opts.record:
        record(k, theta, step)
    return _state(net, cache, k, psi, x, theta, trace.records[-1]), trace


def ldcpf(
    net: Network,
    cache: TopologyCache,
    opts: SolveOptions | None = None,
    theta0=None,
) -> tuple[SolverState, IterationTrace]:
    """Lossy DC Power Flow: the loss-corrected DCPF iterated on angles, no ``arcsin``, no cycle term."""
    opts = opts or SolveOptions()
    kern = cache.kernels
    trace = IterationTrace("ldcpf")
    theta = np.zeros(cache.n) if theta0 is None else np.array(theta0, dtype=float)
    p_eff = net.p_r - cache.G_diag * cache.v_r**2
    ref = opts.reference

    def record(k, theta, step):
        trace.records.append(
            IterationRecord(
                k=k,
                theta_err_deg=_err_deg(theta, ref),
                psi_step=step,
                injection_residual=_inf(active_residual(net, cache, theta)),
                kvl_residual=kvl_residual(cache, np.sin(kern.ArT @ theta)),
            )
        )

    record(0, theta, math.nan)
    k = 0
    for k in range(1, opts.max_iterations + 1):
        raw = kern.ArT @ theta
        d = _guard(raw, opts, trace, limit=1.0 + 1e-15)
        if d is None:
            k -= 1
            break
        new = cache.L_B_op.solve(p_eff + kern.AabsDG @ np.sqrt(np.maximum(1.0 - d * d, 0.0)))
        step = _inf(np.sin(kern.ArT @ new) - np.sin(raw))
        theta = new
        if opts.record or step <= opts.tolerance:
            record(k, theta, step)
        if step <= opts.tolerance:
            # a fixed point of the clamped map is not a solution of the iteration
            trace.reason = "psi_out_of_range" if d is not raw else "converged"
            break
    psi = np.sin(kern.ArT @ theta)
    return _state(net, cache, k, psi, np.zeros(cache.c), theta), trace


# ---------------------------------------------------------------- Newton family

def newton_iterate(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], object],
    z0,
    *,
    frozen: bool = False,
    max_iterations: int = 50,
    tolerance: float = 1e-10,
    callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, str, int]:
    """Newton (or chord Newton when ``frozen``) on ``fun(z) = 0``.

    Iterates ``z <- z - J^{-1} fun(z)`` with ``J`` refreshed every step or
    fixed at ``z0``.  Stops when ``||fun||_inf <= tolerance``.  Returns
    ``(z, reason, k)``.
    """
    z = np.array(z0, dtype=float)
    F = np.asarray(fun(z), dtype=float)
    if callback:
        callback(0, z, F)
    if _inf(F) <= tolerance:
        return z, "converged", 0
    op = None
    for k in range(1, max_iterations + 1):
        if op is None or not frozen:
            try:
                op = factorize_lu(jac(z))
            except SingularMatrixError:
                return z, "linear_failure", k - 1
        z = z - op.solve(F)
        F = np.asarray(fun(z), dtype=float)
        if not np.all(np.isfinite(F)) or _inf(F) > DIVERGENCE_LIMIT:
            return z, "diverged", k
        if callback:
            callback(k, z, F)
        if _inf(F) <= tolerance:
            return z, "converged", k
    return z, "max_iter", max_iterations


def residual_jacobian(net: Network, cache: TopologyCache, theta_r) -> sp.csc_matrix:
    """Jacobian of :func:`active_residual` with respect to ``theta_r``."""
    kern = cache.kernels
    indices, indptr, S1, S2 = kern.jacobian_map(cache)
    d = kern.ArT @ np.asarray(theta_r, dtype=float)
    data = S1 @ (kern.D_B * np.cos(d)) + S2 @ (kern.D_G * np.sin(d))
    return sp.csc_matrix((-data, indices, indptr), shape=(cache.n, cache.n))


def _newton_solve(net, cache, theta0, opts, frozen, method):
    opts = opts or SolveOptions()
    kern = cache.kernels
    trace = IterationTrace(method)
    ref = opts.reference
    last_psi = [None]

    def fun(theta):
        return active_residual(net, cache, theta)

    def jac(theta):
        return residual_jacobian(net, cache, theta)

    def callback(k, theta, F):
        psi = np.sin(kern.ArT @ theta)
        step = math.nan if last_psi[0] is None else _inf(psi - last_psi[0])
        last_psi[0] = psi
        if opts.record:
            trace.records.append(
                IterationRecord(k, _err_deg(theta, ref), step, _inf(F), kvl_residual(cache, psi))
            )

    theta0 = np.zeros(cache.n) if theta0 is None else np.asarray(theta0, dtype=float)
    theta, reason, k = newton_iterate(
        fun, jac, theta0, frozen=frozen, max_iterations=opts.max_iterations,
        tolerance=opts.tolerance, callback=callback,
    )
    trace.reason = reason
    if not opts.record:
        F = fun(theta)
        trace.records.append(IterationRecord(k, _err_deg(theta, ref), math.nan, _inf(F),
                                             kvl_residual(cache, np.sin(kern.ArT @ theta))))
    return theta, trace


def newton_raphson(
    net: Network, cache: TopologyCache, theta0=None, opts: SolveOptions | None = None
) -> tuple[np.ndarray, IterationTrace]:
    """Full Newton-Raphson on the active power mismatch with voltages fixed."""
    return _newton_solve(net, cache, theta0, opts, frozen=False, method="nr")


def chord_newton(
    net: Network, cache: TopologyCache, theta0=None, opts: SolveOptions | None = None
) -> tuple[np.ndarray, IterationTrace]:
    """Chord Newton: the Jacobian is factored once at ``theta0`` and reused."""
    return _newton_solve(net, cache, theta0, opts, frozen=True, method="cnr")


def reference_solution(net: Network, cache: TopologyCache, theta0=None, tolerance: float = 1e-12) -> np.ndarray:
    """Newton-Raphson solution used as the exact answer; raises if NR fails."""
    opts = SolveOptions(max_iterations=50, tolerance=tolerance, record=False)
    theta, trace = newton_raphson(net, cache, theta0, opts)
    if not trace.converged:
        raise ConvergenceError(f"Newton-Raphson reference failed ({trace.reason})")
    return theta


# ---------------------------------------------------------------- two-bus

def two_bus_residual(g: float, b: float, V1: float, V2: float, P1: float, theta: float) -> float:
    return g * V1 * V1 - g * V1 * V2 * math.cos(theta) + b * V1 * V2 * math.sin(theta) - P1


def two_bus_closed_form(g: float, b: float, V1: float, V2: float, P1: float) -> list[float]:
    """All angles in (-pi/2, pi/2) solving the two-bus active power equation at bus 1.

    With ``q = g V1/V2 - P1/(V1 V2)`` the equation reads
    ``g sqrt(1 - psi^2) = b psi + q``; squaring gives a quadratic in
    ``psi`` whose roots are kept only if ``b psi + q >= 0`` and ``|psi| < 1``.
    """
    if not (b > 0 and V1 > 0 and V2 > 0):
        raise ValueError("two-bus closed form needs b > 0 and positive voltages")
    q = g * V1 / V2 - P1 / (V1 * V2)
    if g == 0:
        candidates = [-q / b]
    else:
        a2 = b * b + g * g
        disc = g * g * (a2 - q * q)
        scale = g * g * a2
        if disc < -1e-14 * scale:
            return []
        root = math.sqrt(max(disc, 0.0))
        candidates = [(-b * q - root) / a2, (-b * q + root) / a2]
        if root == 0.0:
            candidates = candidates[:1]
    out = []
    tol = 1e-12 * max(1.0, abs(P1), b * V1 * V2, g * V1 * V1)
    for psi in candidates:
        if abs(psi) >= 1.0:
            continue
        if b * psi + q < -1e-12 * max(1.0, abs(q)):
            continue
        theta = math.asin(psi)
        if abs(two_bus_residual(g, b, V1, V2, P1, theta)) <= tol:
            out.append(theta)
    return sorted(out)
