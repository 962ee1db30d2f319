"""Network description and the graph matrices derived from it.

A :class:`Network` is the per-unit bus/branch model in which every
non-slack bus is PV.  :func:`build_topology` turns it into a
:class:`TopologyCache` holding the incidence matrices, the fundamental
cycle basis, the branch weights and a factored reduced Laplacian.
"""

from __future__ import annotations

import dataclasses
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph

from lossydc.errors import NonInductiveBranchError, TopologyError
from lossydc.splinalg import SpdOperator, factorize

# operators smaller than this are kept dense inside iterations
_DENSE_OPERATOR_SIZE = 4096


@dataclass(frozen=True)
class Bus:
    id: int
    v: float = 1.0
    p: float = 0.0
    gs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    tap: float = 1.0


@dataclass(frozen=True)
class Network:
    """Immutable per-unit network.

    ``p`` is the net active injection at each bus, ``gs`` the shunt
    conductance, ``g``/``b`` the series conductance and susceptance of each
    branch with ``y = g - jb`` so inductive branches have ``b > 0``.  Taps
    sit on the from side.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack: int
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise TopologyError("duplicate bus ids")
        if self.slack not in ids:
            raise TopologyError(f"slack bus {self.slack} is not a bus of the network")
        for bus in self.buses:
            if not bus.v > 0:
                raise ValueError(f"bus {bus.id}: voltage magnitude must be positive, got {bus.v}")
        known = set(ids)
        for k, br in enumerate(self.branches):
            if br.from_bus not in known or br.to_bus not in known:
                raise TopologyError(f"branch {k} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise TopologyError(f"branch {k} is a self-loop at bus {br.from_bus}")
            if not br.tap > 0:
                raise ValueError(f"branch {k}: tap ratio must be positive, got {br.tap}")

    @cached_property
    def index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        return self.index[self.slack]

    @cached_property
    def nonslack(self) -> np.ndarray:
        s = self.slack_index
        return np.array([i for i in range(len(self.buses)) if i != s], dtype=int)

    @property
    def voltages(self) -> np.ndarray:
        return np.array([b.v for b in self.buses])

    @property
    def injections(self) -> np.ndarray:
        return np.array([b.p for b in self.buses])

    @property
    def p_r(self) -> np.ndarray:
        """Injections at the non-slack buses, in bus order."""
        return self.injections[self.nonslack]

    @property
    def has_taps(self) -> bool:
        return any(br.tap != 1.0 for br in self.branches)

    def with_injections(self, p) -> Network:
        buses = tuple(dataclasses.replace(b, p=float(x)) for b, x in zip(self.buses, p))
        return dataclasses.replace(self, buses=buses)


@dataclass(frozen=True, eq=False)
class BusAdmittance:
    G: sp.csr_matrix
    B: sp.csr_matrix
    bus_ids: tuple[int, ...]


def _edge_arrays(net: Network) -> tuple[np.ndarray, np.ndarray]:
    idx = net.index
    f = np.array([idx[br.from_bus] for br in net.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in net.branches], dtype=int)
    return f, t


def _check_connected(net: Network) -> None:
    nb = len(net.buses)
    f, t = _edge_arrays(net)
    adj = sp.csr_matrix((np.ones(len(f)), (f, t)), shape=(nb, nb))
    ncomp, _ = csgraph.connected_components(adj, directed=False)
    if ncomp != 1:
        raise TopologyError(f"network graph has {ncomp} connected components")


def build_admittance(net: Network) -> BusAdmittance:
    """Assemble the conductance and susceptance parts of the bus admittance matrix.

    Off-diagonals are ``-y/t``; the from-bus diagonal receives ``y/t**2`` and
    the to-bus diagonal ``y``.  Shunt conductance is added to the diagonal;
    shunt susceptance and line charging play no role in active power.
    """
    _check_connected(net)
    nb = len(net.buses)
    f, t = _edge_arrays(net)
    g = np.array([br.g for br in net.branches])
    b = np.array([br.b for br in net.branches])
    tap = np.array([br.tap for br in net.branches])
    # Y = G + jB with y = g - jb
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([t, f, f, t])
    gv = np.concatenate([-g / tap, -g / tap, g / tap**2, g])
    bv = np.concatenate([b / tap, b / tap, -b / tap**2, -b])
    gs = np.array([bus.gs for bus in net.buses])
    diag = np.arange(nb)
    G = sp.csr_matrix(
        (np.concatenate([gv, gs]), (np.concatenate([rows, diag]), np.concatenate([cols, diag]))),
        shape=(nb, nb),
    )
    B = sp.csr_matrix((bv, (rows, cols)), shape=(nb, nb))
    return BusAdmittance(G=G, B=B, bus_ids=tuple(bus.id for bus in net.buses))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


def _fast(M):
    M = sp.csr_matrix(M)
    if M.shape[0] * M.shape[1] <= _DENSE_OPERATOR_SIZE:
        return M.toarray()
    return M


@dataclass(frozen=True, eq=False)
class TopologyCache:
    """Graph matrices and factorizations for one network.

    Matrices are indexed by non-slack bus position (rows) and branch input
    order (columns).  The cache depends on topology, admittances and voltage
    magnitudes, not on injections, so :func:`lossydc.caseio.scale_loading`
    keeps it valid.
    """

    bus_ids: tuple[int, ...]
    slack_index: int
    nonslack: np.ndarray
    edge_from: np.ndarray
    edge_to: np.ndarray
    tree_mask: np.ndarray
    A: sp.csr_matrix
    A_r: sp.csr_matrix
    A_abs_r: sp.csr_matrix
    C: sp.csr_matrix
    D_B: np.ndarray
    D_G: np.ndarray
    G_diag: np.ndarray
    v_r: np.ndarray
    L_B: sp.csc_matrix
    L_B_op: SpdOperator = field(repr=False)
    angle_op: SpdOperator = field(repr=False)
    cycle_op: SpdOperator | None = field(repr=False)

    @property
    def n(self) -> int:
        return self.A_r.shape[0]

    @property
    def m(self) -> int:
        return self.A_r.shape[1]

    @property
    def c(self) -> int:
        return self.C.shape[1]

    @property
    def radial(self) -> bool:
        return self.c == 0

    @property
    def edge_order(self) -> tuple[int, ...]:
        return tuple(range(self.m))

    @cached_property
    def kernels(self) -> _Kernels:
        return _Kernels(self)


class _Kernels:
    """Operators laid out for fast repeated application inside iterations."""

    def __init__(self, cache: TopologyCache):
        self.Ar = _fast(cache.A_r)
        self.ArT = _fast(cache.A_r.T)
        self.Aabs = _fast(cache.A_abs_r)
        self.AabsT = _fast(cache.A_abs_r.T)
        self.C = _fast(cache.C)
        self.CT = _fast(cache.C.T)
        self.D_B = np.asarray(cache.D_B)
        self.D_G = np.asarray(cache.D_G)
        # |A|_r diag(D_G), applied to sqrt(1 - psi^2) in every lossy iteration
        self.AabsDG = _fast(cache.A_abs_r @ sp.diags(cache.D_G))
        self._jacobian_map = None

    def jacobian_map(self, cache: TopologyCache):
        """Pattern of ``A_r A_r^T`` (CSC) and maps from branch weights to its entries.

        ``A_r diag(w1) A_r^T + |A|_r diag(w2) A_r^T`` has CSC data
        ``S1 @ w1 + S2 @ w2`` on the returned ``(indices, indptr)``.
        """
        if self._jacobian_map is None:
            Ar = cache.A_r.tocsc()
            rows, cols, edges, v1, v2 = [], [], [], [], []
            for e in range(cache.m):
                lo, hi = Ar.indptr[e], Ar.indptr[e + 1]
                idx, val = Ar.indices[lo:hi], Ar.data[lo:hi]
                for a, va in zip(idx, val):
                    for b, vb in zip(idx, val):
                        rows.append(a)
                        cols.append(b)
                        edges.append(e)
                        v1.append(va * vb)
                        v2.append(abs(va) * vb)
            n = cache.n
            pattern = sp.csc_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            pattern.sum_duplicates()
            pattern.sort_indices()
            pos = {}
            for j in range(n):
                for p in range(pattern.indptr[j], pattern.indptr[j + 1]):
                    pos[(int(pattern.indices[p]), j)] = p
            where = [pos[(int(r), int(c))] for r, c in zip(rows, cols)]
            shape = (pattern.nnz, cache.m)
            S1 = sp.csr_matrix((v1, (where, edges)), shape=shape)
            S2 = sp.csr_matrix((v2, (where, edges)), shape=shape)
            self._jacobian_map = (pattern.indices, pattern.indptr, S1, S2)
        return self._jacobian_map


def incidence(nb: int, f: np.ndarray, t: np.ndarray) -> sp.csr_matrix:
    """Signed node-edge incidence: +1 at the source, -1 at the sink."""
    m = len(f)
    e = np.arange(m)
    return sp.csr_matrix(
        (np.concatenate([np.ones(m), -np.ones(m)]), (np.concatenate([f, t]), np.concatenate([e, e]))),
        shape=(nb, m),
    )


def fundamental_cycles(nb: int, f: np.ndarray, t: np.ndarray, root: int) -> tuple[sp.csr_matrix, np.ndarray]:
    """Edge-cycle matrix from a BFS spanning tree rooted at ``root``.

    Each non-tree edge closes one cycle, traversed along the edge's own
    orientation (coefficient +1) and back through the tree; tree edges get
    +1 when traversed along their orientation and -1 against it.
    """
    m = len(f)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(nb)]
    for e in range(m):
        adj[f[e]].append((t[e], e))
        adj[t[e]].append((f[e], e))
    parent = [-1] * nb
    parent_edge = [-1] * nb
    depth = [-1] * nb
    depth[root] = 0
    tree = np.zeros(m, dtype=bool)
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, e in adj[u]:
            if depth[v] < 0:
                depth[v] = depth[u] + 1
                parent[v] = u
                parent_edge[v] = e
                tree[e] = True
                queue.append(v)
    if min(depth) < 0:
        raise TopologyError("network graph is disconnected")

    rows, cols, vals = [], [], []
    j = 0
    for e in range(m):
        if tree[e]:
            continue
        coef = {e: 1}
        # walk from the sink back to the source of e through the tree
        a, b = int(t[e]), int(f[e])
        while a != b:
            if depth[a] >= depth[b]:
                pe = parent_edge[a]
                coef[pe] = coef.get(pe, 0) + (1 if f[pe] == a else -1)
                a = parent[a]
            else:
                pe = parent_edge[b]
                coef[pe] = coef.get(pe, 0) + (-1 if f[pe] == b else 1)
                b = parent[b]
        for edge, s in coef.items():
            if s:
                rows.append(edge)
                cols.append(j)
                vals.append(s)
        j += 1
    C = sp.csr_matrix((np.array(vals, dtype=float), (rows, cols)), shape=(m, j))
    return C, tree


def build_topology(net: Network, admittance: BusAdmittance | None = None) -> TopologyCache:
    """Build the :class:`TopologyCache` for ``net``.

    Raises :class:`NonInductiveBranchError` if any branch weight
    ``V_i V_j b/t`` is non-positive or any ``g`` is negative.
    """
    if admittance is None:
        admittance = build_admittance(net)
    else:
        _check_connected(net)
    nb = len(net.buses)
    f, t = _edge_arrays(net)
    g = np.array([br.g for br in net.branches])
    b = np.array([br.b for br in net.branches])
    tap = np.array([br.tap for br in net.branches])
    V = net.voltages

    D_B = V[f] * V[t] * b / tap
    bad = np.flatnonzero(~(D_B > 0))
    if bad.size:
        e = int(bad[0])
        br = net.branches[e]
        raise NonInductiveBranchError(
            f"branch {e} ({br.from_bus}-{br.to_bus}) has non-positive susceptance weight {D_B[e]:.6g}"
        )
    if np.any(g < 0):
        e = int(np.flatnonzero(g < 0)[0])
        raise NonInductiveBranchError(f"branch {e} has negative series conductance {g[e]:.6g}")
    D_G = V[f] * V[t] * g / tap

    keep = net.nonslack
    A = incidence(nb, f, t)
    A_r = A[keep]
    A_abs_r = abs(A_r).tocsr()
    C, tree = fundamental_cycles(nb, f, t, net.slack_index)

    L_B = (A_r @ sp.diags(D_B) @ A_r.T).tocsc()
    L_B_op = factorize(L_B)
    angle_op = factorize(A_r @ A_r.T)
    cycle_op = factorize(C.T @ sp.diags(1.0 / D_B) @ C) if C.shape[1] else None

    return TopologyCache(
        bus_ids=tuple(bus.id for bus in net.buses),
        slack_index=net.slack_index,
        nonslack=keep,
        edge_from=f,
        edge_to=t,
        tree_mask=tree,
        A=A,
        A_r=A_r,
        A_abs_r=A_abs_r,
        C=C,
        D_B=_readonly(D_B),
        D_G=_readonly(D_G),
        G_diag=_readonly(admittance.G.diagonal()[keep]),
        v_r=_readonly(V[keep]),
        L_B=L_B,
        L_B_op=L_B_op,
        angle_op=angle_op,
        cycle_op=cycle_op,
    )


def cycle_basis_check(cache: TopologyCache) -> bool:
    """True iff ``A C = 0`` exactly and ``C`` has full column rank ``m - n``."""
    A = cache.A.astype(np.int64)
    C = cache.C
    if C.shape[1] == 0:
        return cache.m - cache.n == 0
    Ci = C.astype(np.int64)
    if np.any(C.data != np.round(C.data)):
        return False
    if (A @ Ci).count_nonzero():
        return False
    if cache.c != cache.m - cache.n:
        return False
    return int(np.linalg.matrix_rank(C.toarray())) == cache.c


def stamp_laplacian(net: Network, weights: np.ndarray) -> np.ndarray:
    """Reduced weighted Laplacian assembled branch by branch (dense)."""
    nb = len(net.buses)
    f, t = _edge_arrays(net)
    L = np.zeros((nb, nb))
    for e, w in enumerate(weights):
        i, j = f[e], t[e]
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w
    keep = net.nonslack
    return L[np.ix_(keep, keep)]
