"""Existence, uniqueness and convergence certificates for radial networks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from lossydc.errors import HypothesisViolationError, InfeasibleCertificateError
from lossydc.netmodel import Network, TopologyCache
from lossydc.splinalg import factorize_lu

VOLTAGE_RTOL = 1e-12


def beta_bounds(rho: float, gamma: float) -> tuple[float, float]:
    """Roots of ``(1+rho^2) beta^2 - 2(gamma+rho) beta + (gamma+rho)^2 - rho^2 = 0``.

    Raises :class:`InfeasibleCertificateError` when ``gamma^2 + 2 gamma rho > 1``.
    At equality the two roots coincide.
    """
    cond = gamma * gamma + 2.0 * gamma * rho
    if cond > 1.0 + 1e-14:
        raise InfeasibleCertificateError(f"gamma^2 + 2 gamma rho = {cond:.6g} exceeds 1")
    spread = rho * math.sqrt(max(0.0, 1.0 - cond))
    denom = 1.0 + rho * rho
    return (gamma + rho - spread) / denom, (gamma + rho + spread) / denom


def contraction_constant(rho: float, gamma: float) -> float:
    """Lipschitz bound ``rho beta_- / sqrt(1 - beta_-^2)`` of the fixed-point map."""
    beta_minus, _ = beta_bounds(rho, gamma)
    if beta_minus >= 1.0:
        return math.inf
    return rho * beta_minus / math.sqrt(1.0 - beta_minus * beta_minus)


def critical_gamma(rho: float) -> float:
    """Largest ``gamma`` allowed by the condition, ``-rho + sqrt(1 + rho^2)``."""
    return -rho + math.sqrt(1.0 + rho * rho)


@dataclass(frozen=True)
class Certificate:
    rho: float
    gamma: float
    condition_value: float
    feasible: bool
    beta_minus: float | None = None
    beta_plus: float | None = None
    contraction_c: float | None = None
    angle_bound: float | None = None

    def error_bound(self, k: int) -> float:
        """Upper bound on ``||psi[k] - psi*||_inf`` for the flat-started iteration."""
        if not self.feasible:
            raise InfeasibleCertificateError("error bound needs a feasible certificate")
        c = self.contraction_c
        return self.gamma / (1.0 - c) * c**k

    def to_dict(self, bound_iterations: int = 0) -> dict:
        out = asdict(self)
        if self.feasible and bound_iterations:
            out["error_bound"] = [{"k": k, "bound": self.error_bound(k)} for k in range(bound_iterations + 1)]
        return out


def _check_hypotheses(net: Network, cache: TopologyCache) -> None:
    if not cache.radial:
        raise HypothesisViolationError(f"certificate requires a radial network (found {cache.c} cycles)")
    if net.has_taps:
        raise HypothesisViolationError("certificate requires nominal tap ratios")
    V = net.voltages
    if np.max(np.abs(V - V[0])) > VOLTAGE_RTOL * V[0]:
        raise HypothesisViolationError("certificate requires equal voltage magnitudes")


def effective_injections(net: Network, cache: TopologyCache) -> np.ndarray:
    """``P_r - G_diag V^2 + |A|_r D_G 1``: injections net of shunt conductance draw."""
    return net.p_r - cache.G_diag * cache.v_r**2 + cache.A_abs_r @ cache.D_G


def loss_coupling(cache: TopologyCache) -> np.ndarray:
    """Dense ``H = D_B^{-1} A_r^{-1} |A|_r D_G`` via column solves with the square ``A_r``."""
    op = factorize_lu(cache.A_r)
    rhs = (cache.A_abs_r @ np.diag(cache.D_G)) if cache.m else np.zeros((0, 0))
    X = np.column_stack([op.solve(rhs[:, j]) for j in range(cache.m)]) if cache.m else rhs
    return X / np.asarray(cache.D_B)[:, None]


def loss_coupling_laplacian(cache: TopologyCache) -> np.ndarray:
    """Same matrix as :func:`loss_coupling`, through ``A_r^T L_B^{-1}``."""
    rhs = cache.A_abs_r @ np.diag(cache.D_G)
    cols = [cache.A_r.T @ cache.L_B_op.solve(rhs[:, j]) for j in range(cache.m)]
    return np.column_stack(cols) if cols else np.zeros((0, 0))


def certify_radial(net: Network, cache: TopologyCache) -> Certificate:
    """Compute ``rho``, ``Gamma``, ``beta_+-`` and the contraction constant.

    Refuses (:class:`HypothesisViolationError`) networks that are meshed,
    carry off-nominal taps or have unequal voltage magnitudes.
    """
    _check_hypotheses(net, cache)
    H = loss_coupling(cache)
    rho = float(np.max(np.sum(np.abs(H), axis=1))) if H.size else 0.0
    psi_mdc = cache.A_r.T @ cache.L_B_op.solve(effective_injections(net, cache))
    gamma = float(np.max(np.abs(psi_mdc))) if psi_mdc.size else 0.0
    cond = gamma * gamma + 2.0 * gamma * rho
    if cond >= 1.0:
        return Certificate(rho=rho, gamma=gamma, condition_value=cond, feasible=False)
    beta_minus, beta_plus = beta_bounds(rho, gamma)
    return Certificate(
        rho=rho,
        gamma=gamma,
        condition_value=cond,
        feasible=True,
        beta_minus=beta_minus,
        beta_plus=beta_plus,
        contraction_c=contraction_constant(rho, gamma),
        angle_bound=math.asin(beta_minus),
    )


def no_solution_band(cert: Certificate) -> tuple[float, float]:
    """Open interval of branch angle differences (radians) that no solution can occupy."""
    if not cert.feasible:
        raise InfeasibleCertificateError("no-solution band needs a feasible certificate")
    return math.asin(cert.beta_minus), math.asin(cert.beta_plus)


@dataclass
class ProbeReport:
    samples: int
    invariance_ok: bool
    max_image_norm: float
    max_quotient: float
    lipschitz_ok: bool
    jacobian_max_error: float
    jacobian_ok: bool
    fixed_point_spread: float
    counterexamples: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.invariance_ok and self.lipschitz_ok and self.jacobian_ok and not self.counterexamples


class FixedPointMap:
    """``f(psi) = psi_mdc + H (1 - sqrt(1 - psi^2))`` and its Jacobian."""

    def __init__(self, psi_mdc: np.ndarray, H: np.ndarray):
        self.psi_mdc = psi_mdc
        self.H = H

    def __call__(self, psi: np.ndarray) -> np.ndarray:
        return self.psi_mdc + self.H @ (1.0 - np.sqrt(1.0 - psi * psi))

    def jacobian(self, psi: np.ndarray) -> np.ndarray:
        return self.H * (psi / np.sqrt(1.0 - psi * psi))[None, :]


def fixed_point_map(net: Network, cache: TopologyCache) -> FixedPointMap:
    _check_hypotheses(net, cache)
    psi_mdc = cache.A_r.T @ cache.L_B_op.solve(effective_injections(net, cache))
    return FixedPointMap(psi_mdc, loss_coupling(cache))


def contraction_probe(
    net: Network,
    cache: TopologyCache,
    cert: Certificate,
    samples: int = 10_000,
    seed: int = 0,
    jacobian_points: int = 20,
    multistart: int = 100,
) -> ProbeReport:
    """Numerically check invariance, the Lipschitz bound and the Jacobian of the fixed-point map.

    Draws ``samples`` pairs uniformly from the cube ``||psi|| <= beta_-``,
    compares the analytic Jacobian with central differences at
    ``jacobian_points`` points and iterates the map from ``multistart``
    random points inside ``||psi|| < beta_+``.
    """
    if not cert.feasible:
        raise InfeasibleCertificateError("contraction probe needs a feasible certificate")
    f = fixed_point_map(net, cache)
    rng = np.random.default_rng(seed)
    m = cache.m
    beta, c = cert.beta_minus, cert.contraction_c
    bad: list[dict] = []

    P1 = rng.uniform(-beta, beta, size=(samples, m))
    P2 = rng.uniform(-beta, beta, size=(samples, m))
    F1 = f.psi_mdc + (1.0 - np.sqrt(1.0 - P1 * P1)) @ f.H.T
    F2 = f.psi_mdc + (1.0 - np.sqrt(1.0 - P2 * P2)) @ f.H.T
    img = max(np.max(np.abs(F1)), np.max(np.abs(F2))) if m else 0.0
    invariance_ok = img <= beta + 1e-12
    if not invariance_ok:
        i = int(np.argmax(np.max(np.abs(F1), axis=1)))
        bad.append({"check": "invariance", "psi": P1[i].tolist()})
    num = np.max(np.abs(F1 - F2), axis=1) if m else np.zeros(samples)
    den = np.max(np.abs(P1 - P2), axis=1) if m else np.ones(samples)
    quotients = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    qmax = float(np.max(quotients)) if samples else 0.0
    lipschitz_ok = qmax <= c + 1e-9
    if not lipschitz_ok:
        i = int(np.argmax(quotients))
        bad.append({"check": "lipschitz", "psi1": P1[i].tolist(), "psi2": P2[i].tolist()})

    jac_err = 0.0
    h = min(1e-6, (1.0 - beta) / 2.0)
    for j in range(min(jacobian_points, samples)):
        psi = P1[j]
        J = f.jacobian(psi)
        fd = np.empty_like(J)
        for e in range(m):
            dp = np.zeros(m)
            dp[e] = h
            fd[:, e] = (f(psi + dp) - f(psi - dp)) / (2.0 * h)
        err = float(np.max(np.abs(J - fd))) if m else 0.0
        if err > 1e-6:
            bad.append({"check": "jacobian", "psi": psi.tolist(), "error": err})
        jac_err = max(jac_err, err)

    finals = []
    for _ in range(multistart):
        psi = rng.uniform(-1.0, 1.0, m) * cert.beta_plus * (1.0 - 1e-9)
        for _ in range(20_000):
            new = f(psi)
            if not np.all(np.abs(new) < 1.0):
                break
            done = np.max(np.abs(new - psi)) <= 1e-14 if m else True
            psi = new
            if done:
                break
        finals.append(psi)
    spread = float(max(np.max(np.abs(p - finals[0])) for p in finals)) if finals and m else 0.0

    return ProbeReport(
        samples=samples,
        invariance_ok=bool(invariance_ok),
        max_image_norm=float(img),
        max_quotient=qmax,
        lipschitz_ok=bool(lipschitz_ok),
        jacobian_max_error=jac_err,
        jacobian_ok=jac_err <= 1e-6,
        fixed_point_spread=spread,
        counterexamples=bad,
    )
