from __future__ import annotations

import functools
from pathlib import Path

import numpy as np
import pytest

import lossydc.solvers
from lossydc.netmodel import Branch, Bus, Network, build_topology

DATA = Path(__file__).parent / "data"

# Every converged L-MDCPF run anywhere in the suite must satisfy the power
# flow equations.  The solver is wrapped before any test module (or the
# experiments module) binds the name, so all call sites are observed.
CONSISTENCY_TOL = 1e-8
CONSISTENCY = {"runs": 0, "violations": []}
ACCEPTANCE: dict[int, str] = {}
_lmdcpf = lossydc.solvers.lmdcpf


@functools.wraps(_lmdcpf)
def _observed_lmdcpf(net, cache, *args, **kwargs):
    state, trace = _lmdcpf(net, cache, *args, **kwargs)
    if trace.converged:
        CONSISTENCY["runs"] += 1
        if not (state.injection_residual <= CONSISTENCY_TOL and state.kvl_residual <= CONSISTENCY_TOL):
            CONSISTENCY["violations"].append((state.injection_residual, state.kvl_residual))
    return state, trace


lossydc.solvers.lmdcpf = _observed_lmdcpf


@pytest.fixture(autouse=True)
def _lmdcpf_consistency():
    before = len(CONSISTENCY["violations"])
    yield
    new = CONSISTENCY["violations"][before:]
    assert not new, f"converged L-MDCPF runs with residuals above {CONSISTENCY_TOL:g}: {new[:5]}"


def two_bus(g=0.0, b=1.0, p1=0.0, v1=1.0, v2=1.0, tap=1.0, gs=0.0) -> Network:
    """Bus 1 carries the injection, bus 2 is the slack; branch oriented 1 -> 2."""
    return Network(
        buses=(Bus(1, v=v1, p=p1, gs=gs), Bus(2, v=v2)),
        branches=(Branch(1, 2, g=g, b=b, tap=tap),),
        slack=2,
    )


def path3(weights=(1.0, 1.0), p=(0.1, 0.2), g=(0.0, 0.0)) -> Network:
    """Slack 0 - 1 - 2 with the slack at one end."""
    return Network(
        buses=(Bus(0), Bus(1, p=p[0]), Bus(2, p=p[1])),
        branches=(Branch(0, 1, g=g[0], b=weights[0]), Branch(1, 2, g=g[1], b=weights[1])),
        slack=0,
    )


def triangle(p=(0.3, -0.5), gb=((0.1, 1.0), (0.3, 2.0), (0.05, 1.5))) -> Network:
    buses = (Bus(0), Bus(1, p=p[0]), Bus(2, p=p[1]))
    ends = ((0, 1), (1, 2), (2, 0))
    branches = tuple(Branch(f, t, g=g, b=b) for (f, t), (g, b) in zip(ends, gb))
    return Network(buses=buses, branches=branches, slack=0)


def random_tree_edges(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    """Random labelled tree on ``n`` nodes (each node attaches to an earlier one), random orientation."""
    order = rng.permutation(n)
    edges = []
    for k in range(1, n):
        u, v = int(order[k]), int(order[rng.integers(0, k)])
        edges.append((u, v) if rng.random() < 0.5 else (v, u))
    return edges


def random_radial(rng: np.random.Generator, n_buses: int, rx=(0.0, 0.5), load=0.3, v=1.0) -> Network:
    """Random radial lossy network with equal voltages and injections summing to ~0."""
    edges = random_tree_edges(rng, n_buses)
    slack = int(rng.integers(0, n_buses))
    b = rng.uniform(2.0, 10.0, len(edges))
    g = b * rng.uniform(*rx, len(edges))
    p = rng.uniform(-load, load, n_buses)
    buses = tuple(Bus(i, v=v, p=float(p[i]) if i != slack else 0.0) for i in range(n_buses))
    branches = tuple(Branch(f, t, g=float(gg), b=float(bb)) for (f, t), gg, bb in zip(edges, g, b))
    return Network(buses=buses, branches=branches, slack=slack)


def random_connected(rng: np.random.Generator, n_buses: int, extra: int, load=0.2, rx=(0.0, 0.4)) -> Network:
    """Random tree plus ``extra`` chords (parallel branches allowed)."""
    edges = random_tree_edges(rng, n_buses)
    for _ in range(extra):
        u, v = rng.choice(n_buses, size=2, replace=False)
        edges.append((int(u), int(v)))
    slack = int(rng.integers(0, n_buses))
    b = rng.uniform(2.0, 10.0, len(edges))
    g = b * rng.uniform(*rx, len(edges))
    p = rng.uniform(-load, load, n_buses)
    buses = tuple(Bus(i, p=float(p[i]) if i != slack else 0.0) for i in range(n_buses))
    branches = tuple(Branch(f, t, g=float(gg), b=float(bb)) for (f, t), gg, bb in zip(edges, g, b))
    return Network(buses=buses, branches=branches, slack=slack)


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def tri():
    net = triangle()
    return net, build_topology(net)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
    terminalreporter.write_line(
        f"suite-wide L-MDCPF consistency: {CONSISTENCY['runs']} converged runs, "
        f"{len(CONSISTENCY['violations'])} with residual above {CONSISTENCY_TOL:g}"
    )
