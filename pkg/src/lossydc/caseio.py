"""Case ingestion: MATPOWER ``.m`` subset and a canonical JSON format."""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from lossydc.errors import CaseSyntaxError, NonInductiveBranchError
from lossydc.netmodel import Branch, Bus, Network

logger = logging.getLogger(__name__)

BUS_TYPES = {1: "PQ", 2: "PV", 3: "REF", 4: "NONE"}
_TYPE_CODES = {v: k for k, v in BUS_TYPES.items()}

# minimum MATPOWER column counts for the fields we read
_MIN_COLUMNS = {"bus": 13, "gen": 8, "branch": 11}


@dataclass(frozen=True)
class CaseBus:
    id: int
    type: str
    pd: float = 0.0
    gs: float = 0.0
    vm: float = 1.0
    va: float = 0.0


@dataclass(frozen=True)
class CaseGen:
    bus: int
    pg: float
    status: int = 1


@dataclass(frozen=True)
class CaseBranch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    tap: float = 1.0
    status: int = 1


@dataclass(frozen=True)
class CaseFile:
    """In-service case data in MATPOWER units (MW, per-unit impedances)."""

    base_mva: float
    buses: tuple[CaseBus, ...]
    gens: tuple[CaseGen, ...]
    branches: tuple[CaseBranch, ...]
    name: str = ""

    def __post_init__(self):
        refs = [b.id for b in self.buses if b.type == "REF"]
        if len(refs) != 1:
            raise CaseSyntaxError(f"expected exactly one REF bus, found {len(refs)}")
        for b in self.buses:
            if not b.vm > 0:
                raise CaseSyntaxError(f"bus {b.id}: Vm must be positive, got {b.vm}")
        for k, br in enumerate(self.branches):
            if br.x == 0:
                raise CaseSyntaxError(f"branch {k} ({br.from_bus}-{br.to_bus}) has zero reactance")

    @property
    def slack(self) -> int:
        return next(b.id for b in self.buses if b.type == "REF")


@dataclass(frozen=True)
class StartPolicy:
    """``hot`` takes voltage magnitudes from the case, ``cold`` sets them to 1."""

    mode: str = "hot"

    def __post_init__(self):
        if self.mode not in ("hot", "cold"):
            raise ValueError(f"start mode must be 'hot' or 'cold', got {self.mode!r}")


# ---------------------------------------------------------------- MATPOWER

_FIELD_RE = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    i = line.find("%")
    return line if i < 0 else line[:i]


def _parse_matpower(text: str, name: str = "") -> CaseFile:
    base_mva = None
    tables: dict[str, list[tuple[int, list[float]]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = _strip_comment(lines[i])
        m = _FIELD_RE.match(line)
        i += 1
        if not m:
            continue
        field_name, rest = m.group(1), m.group(2).strip()
        if rest.startswith("["):
            rows: list[tuple[int, list[float]]] = []
            body = rest[1:]
            lineno = i
            while True:
                end = body.find("]")
                chunk = body if end < 0 else body[:end]
                for seg in chunk.split(";"):
                    toks = [t for t in re.split(r"[\s,]+", seg.strip()) if t]
                    if toks:
                        try:
                            rows.append((lineno, [float(t) for t in toks]))
                        except ValueError:
                            raise CaseSyntaxError(f"non-numeric entry in mpc.{field_name}: {seg.strip()!r}", lineno) from None
                if end >= 0:
                    break
                if i >= len(lines):
                    raise CaseSyntaxError(f"unterminated matrix mpc.{field_name}", lineno)
                body = _strip_comment(lines[i])
                i += 1
                lineno = i
            tables[field_name] = rows
        elif rest.startswith("{"):
            # cell arrays (bus names etc.) are skipped
            depth = rest.count("{") - rest.count("}")
            while depth > 0 and i < len(lines):
                seg = _strip_comment(lines[i])
                depth += seg.count("{") - seg.count("}")
                i += 1
        elif field_name == "baseMVA":
            try:
                base_mva = float(rest.rstrip(";").strip())
            except ValueError:
                raise CaseSyntaxError(f"bad baseMVA value {rest!r}", i) from None

    if base_mva is None:
        raise CaseSyntaxError("missing mpc.baseMVA")
    for key in ("bus", "gen", "branch"):
        if key not in tables:
            raise CaseSyntaxError(f"missing table mpc.{key}")
        rows = tables[key]
        if not rows:
            continue
        width = len(rows[0][1])
        if width < _MIN_COLUMNS[key]:
            raise CaseSyntaxError(
                f"mpc.{key} row has {width} columns, need at least {_MIN_COLUMNS[key]}", rows[0][0]
            )
        for lineno, row in rows:
            if len(row) != width:
                raise CaseSyntaxError(f"mpc.{key} row has {len(row)} columns, expected {width}", lineno)

    buses = []
    isolated = set()
    for lineno, row in tables["bus"]:
        code = int(row[1])
        if code not in BUS_TYPES:
            raise CaseSyntaxError(f"unknown bus type {code}", lineno)
        if code == 4:
            isolated.add(int(row[0]))
            continue
        buses.append(CaseBus(id=int(row[0]), type=BUS_TYPES[code], pd=row[2], gs=row[4], vm=row[7], va=row[8]))
    gens = [
        CaseGen(bus=int(row[0]), pg=row[1], status=int(row[7]))
        for _, row in tables["gen"]
        if row[7] > 0 and int(row[0]) not in isolated
    ]
    branches = []
    for lineno, row in tables["branch"]:
        if row[10] <= 0:
            continue
        f, t = int(row[0]), int(row[1])
        if f in isolated or t in isolated:
            logger.warning("dropping branch %d-%d attached to an isolated bus", f, t)
            continue
        if row[9] != 0:
            logger.warning("ignoring phase shift %.4g deg on branch %d-%d", row[9], f, t)
        tap = row[8] if row[8] != 0 else 1.0
        branches.append(CaseBranch(from_bus=f, to_bus=t, r=row[2], x=row[3], tap=tap, status=1))
    return CaseFile(base_mva=base_mva, buses=tuple(buses), gens=tuple(gens), branches=tuple(branches), name=name)


# ---------------------------------------------------------------- JSON

def _parse_json(text: str, name: str = "") -> CaseFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno) from None
    try:
        slack = doc.get("slack")
        buses = []
        for b in doc["buses"]:
            btype = b.get("type", "PV")
            if slack is not None:
                if b["id"] == slack:
                    btype = "REF"
                elif btype == "REF":
                    raise CaseSyntaxError(f"bus {b['id']} is REF but slack is {slack}")
            buses.append(CaseBus(id=int(b["id"]), type=btype, pd=-float(b.get("p", 0.0)),
                                 gs=float(b.get("gs", 0.0)), vm=float(b.get("v", 1.0))))
        branches = [
            CaseBranch(from_bus=int(br["from"]), to_bus=int(br["to"]), r=float(br["r"]), x=float(br["x"]),
                       tap=float(br.get("tap", 1.0)))
            for br in doc["branches"]
        ]
        return CaseFile(base_mva=float(doc["base_mva"]), buses=tuple(buses), gens=(),
                        branches=tuple(branches), name=doc.get("name", name))
    except KeyError as exc:
        raise CaseSyntaxError(f"missing key {exc.args[0]!r}") from None


def dump_json(case: CaseFile) -> str:
    """Serialize to the canonical JSON schema (net injection ``p`` in MW)."""
    pg = {}
    for g in case.gens:
        pg[g.bus] = pg.get(g.bus, 0.0) + g.pg
    doc = {
        "name": case.name,
        "base_mva": case.base_mva,
        "slack": case.slack,
        "buses": [
            {"id": b.id, "type": b.type, "v": b.vm, "p": pg.get(b.id, 0.0) - b.pd, "gs": b.gs}
            for b in case.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x, "tap": br.tap}
            for br in case.branches
        ],
    }
    return json.dumps(doc, indent=1)


def parse_case(text: str, name: str = "") -> CaseFile:
    """Parse MATPOWER ``.m`` text or canonical JSON (detected by a leading ``{``)."""
    if text.lstrip().startswith("{"):
        return _parse_json(text, name)
    return _parse_matpower(text, name)


def bundled_cases() -> list[str]:
    root = resources.files("lossydc") / "data" / "cases"
    return sorted(p.name.rsplit(".", 1)[0] for p in root.iterdir() if p.name.endswith(".m"))


def read_case(path_or_name: str | Path) -> CaseFile:
    """Read a case from a file path, or a bundled case by name (e.g. ``case118``)."""
    path = Path(path_or_name)
    if path.exists():
        return parse_case(path.read_text(), name=path.stem)
    bundled = resources.files("lossydc") / "data" / "cases" / f"{path_or_name}.m"
    if bundled.is_file():
        return parse_case(bundled.read_text(), name=str(path_or_name))
    raise FileNotFoundError(f"no case file or bundled case named {str(path_or_name)!r}")


# ---------------------------------------------------------------- conversion

def to_network(case: CaseFile, start: StartPolicy | str = "hot") -> Network:
    """Convert to per-unit :class:`Network`; every non-slack bus becomes PV."""
    if isinstance(start, str):
        start = StartPolicy(start)
    base = case.base_mva
    pg: dict[int, float] = {}
    for g in case.gens:
        pg[g.bus] = pg.get(g.bus, 0.0) + g.pg
    buses = tuple(
        Bus(
            id=b.id,
            v=b.vm if start.mode == "hot" else 1.0,
            p=(pg.get(b.id, 0.0) - b.pd) / base,
            gs=b.gs / base,
        )
        for b in case.buses
    )
    branches = []
    for k, br in enumerate(case.branches):
        y = 1.0 / complex(br.r, br.x)
        g, b = y.real, -y.imag
        if not b > 0:
            raise NonInductiveBranchError(
                f"branch {k} ({br.from_bus}-{br.to_bus}) has non-positive susceptance {b:.6g}"
            )
        branches.append(Branch(from_bus=br.from_bus, to_bus=br.to_bus, g=g, b=b, tap=br.tap))
    return Network(buses=buses, branches=tuple(branches), slack=case.slack, base_mva=base)


def network_to_case(net: Network, name: str = "") -> CaseFile:
    """Inverse of :func:`to_network` (hot start); injections become negative demand."""
    base = net.base_mva
    buses = tuple(
        CaseBus(id=b.id, type="REF" if b.id == net.slack else "PV", pd=-b.p * base, gs=b.gs * base, vm=b.v)
        for b in net.buses
    )
    branches = []
    for br in net.branches:
        z = 1.0 / complex(br.g, -br.b)
        branches.append(CaseBranch(from_bus=br.from_bus, to_bus=br.to_bus, r=z.real, x=z.imag, tap=br.tap))
    return CaseFile(base_mva=base, buses=buses, gens=(), branches=tuple(branches), name=name)


def scale_loading(net: Network, lam: float) -> Network:
    """Copy of ``net`` with every non-slack injection multiplied by ``lam``."""
    if lam < 0:
        raise ValueError(f"loading factor must be non-negative, got {lam}")
    buses = tuple(b if b.id == net.slack else dataclasses.replace(b, p=b.p * lam) for b in net.buses)
    return dataclasses.replace(net, buses=buses)
