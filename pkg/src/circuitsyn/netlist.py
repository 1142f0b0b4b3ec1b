"""Netlist extraction: merge equipotential grid nodes and build the branch graph."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Hashable, Iterable

from .layout import CC_KINDS, COMPONENT_KINDS, VC_KINDS, DiagramLayout

SCHEMA_VERSION = 1
REF = "0"

BRANCH_KINDS = COMPONENT_KINDS + ("Ammeter",)
KIND_PREFIX = {
    "Resistor": "R",
    "VSource": "V",
    "ISource": "I",
    "VCVS": "E",
    "VCCS": "G",
    "CCVS": "H",
    "CCCS": "F",
    "Ammeter": "V",
}
AMMETER_PREFIX = "V_"


class NetlistError(ValueError):
    pass


class Disconnected(NetlistError):
    pass


class DanglingControl(NetlistError):
    pass


class UnionFind:
    def __init__(self, items: Iterable[Hashable] = ()):
        self.parent: dict[Hashable, Hashable] = {}
        self.rank: dict[Hashable, int] = {}
        for x in items:
            self.add(x)

    def add(self, x: Hashable) -> None:
        if x not in self.parent:
            self.parent[x] = x
            self.rank[x] = 0

    def find(self, x: Hashable) -> Hashable:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: Hashable, b: Hashable) -> Hashable:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return ra


@dataclass(frozen=True)
class Branch:
    name: str
    kind: str
    n_plus: str
    n_minus: str
    value: Fraction | None = None
    control: tuple[str, str] | str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "n_plus": self.n_plus,
            "n_minus": self.n_minus,
            "value": None if self.value is None else str(self.value),
            "control": list(self.control) if isinstance(self.control, tuple) else self.control,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Branch:
        ctrl = d.get("control")
        return cls(
            d["name"], d["kind"], d["n_plus"], d["n_minus"],
            None if d.get("value") is None else Fraction(d["value"]),
            tuple(ctrl) if isinstance(ctrl, list) else ctrl,
        )


@dataclass(frozen=True)
class MeasurementSpec:
    label: str
    kind: str  # VoltageObs | CurrentObs
    nodes: tuple[str, str] | None = None
    branch: str | None = None


@dataclass
class Netlist:
    nodes: set[str]
    branches: list[Branch]
    measurements: list[MeasurementSpec] = field(default_factory=list)
    # series-ammeter midpoints introduced by extraction; not equipotential grid nodes
    internal_nodes: frozenset[str] = frozenset()

    def branch(self, name: str) -> Branch:
        for b in self.branches:
            if b.name == name:
                return b
        raise KeyError(name)

    def validate(self) -> None:
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise NetlistError("branch names are not unique")
        by_name = {b.name: b for b in self.branches}
        for b in self.branches:
            if b.kind not in BRANCH_KINDS:
                raise NetlistError(f"{b.name}: unknown kind {b.kind}")
            if b.n_plus not in self.nodes or b.n_minus not in self.nodes:
                raise NetlistError(f"{b.name}: endpoint not in node set")
            if b.kind == "Resistor" and b.value is not None and b.value <= 0:
                raise NetlistError(f"{b.name}: resistance must be positive")
            if b.kind == "Ammeter" and b.value != 0:
                raise NetlistError(f"{b.name}: ammeter must be a 0 V source")
            if b.kind in VC_KINDS:
                if not (isinstance(b.control, tuple) and all(x in self.nodes for x in b.control)):
                    raise DanglingControl(f"{b.name}: control nodes {b.control!r} missing")
            if b.kind in CC_KINDS:
                if not isinstance(b.control, str) or b.control not in by_name:
                    raise DanglingControl(f"{b.name}: sensing branch {b.control!r} missing")
        labels = [mm.label for mm in self.measurements]
        if len(set(labels)) != len(labels):
            raise NetlistError("measurement labels are not unique")
        for mm in self.measurements:
            if mm.kind == "VoltageObs" and not (mm.nodes and all(x in self.nodes for x in mm.nodes)):
                raise NetlistError(f"measurement {mm.label} references missing nodes")
            if mm.kind == "CurrentObs" and mm.branch not in by_name:
                raise NetlistError(f"measurement {mm.label} references missing branch")
        _check_connected(self.nodes, self.branches)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "nodes": sorted(self.nodes, key=node_sort_key),
            "branches": [b.to_dict() for b in self.branches],
            "measurements": [
                {"label": mm.label, "kind": mm.kind, "nodes": list(mm.nodes) if mm.nodes else None, "branch": mm.branch}
                for mm in self.measurements
            ],
            "internal_nodes": sorted(self.internal_nodes, key=node_sort_key),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Netlist:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported netlist schema_version {d.get('schema_version')!r}")
        return cls(
            nodes=set(d["nodes"]),
            branches=[Branch.from_dict(b) for b in d["branches"]],
            measurements=[
                MeasurementSpec(m["label"], m["kind"], tuple(m["nodes"]) if m.get("nodes") else None, m.get("branch"))
                for m in d["measurements"]
            ],
            internal_nodes=frozenset(d.get("internal_nodes", [])),
        )


def node_sort_key(node: str) -> tuple[int, int, str]:
    return (0, int(node), "") if node.isdigit() else (1, 0, node)


def _check_connected(nodes: set[str], branches: list[Branch]) -> None:
    if not branches:
        raise Disconnected("netlist has no branches")
    if REF not in nodes:
        raise Disconnected("reference node 0 carries no branch")
    adj: dict[str, set[str]] = defaultdict(set)
    for b in branches:
        adj[b.n_plus].add(b.n_minus)
        adj[b.n_minus].add(b.n_plus)
    seen = {REF}
    stack = [REF]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if seen != nodes:
        raise Disconnected(f"nodes {sorted(nodes - seen)} are unreachable from the reference node")


def equipotential_node_count(netlist: Netlist) -> int:
    return len(netlist.nodes - netlist.internal_nodes)


def extract_netlist(layout: DiagramLayout, with_values: bool | None = None) -> Netlist:
    """Turn a grid layout into a netlist.

    Plain wire (``Short``) edges merge their endpoints; a wire carrying a
    current observation becomes a 0 V ammeter instead. Current observations
    on component edges add an ammeter in series at a new midpoint node.
    The class of grid node (0, 0) becomes node ``"0"``; other classes are
    numbered in row-major order of first appearance.

    ``with_values`` defaults to True for Numerical layouts; Label layouts
    then get ``value=None`` on every component.
    """
    if with_values is None:
        with_values = layout.circuit_kind == "Numerical"

    uf = UnionFind((r, c) for r in range(layout.m) for c in range(layout.n))
    for e in layout.edges:
        if e.kind == "Short" and not _has_current_obs(e):
            uf.union(*e.endpoints)

    live = [e for e in layout.edges if e.kind != "Open" and not (e.kind == "Short" and not _has_current_obs(e))]
    used_roots = {uf.find(p) for e in live for p in e.endpoints}
    ref_root = uf.find((0, 0))
    names: dict[Hashable, str] = {ref_root: REF}
    counter = 0
    for r in range(layout.m):
        for c in range(layout.n):
            root = uf.find((r, c))
            if root in used_roots and root not in names:
                counter += 1
                names[root] = str(counter)

    def node(p: tuple[int, int]) -> str:
        return names[uf.find(p)]

    volt_pairs: dict[str, tuple[str, str]] = {}
    for e in layout.edges:
        if e.measurement is not None and e.measurement.kind == "VoltageObs":
            p, q = node(e.endpoints[0]), node(e.endpoints[1])
            volt_pairs[e.measurement.label] = (p, q) if e.measurement.polarity == 0 else (q, p)

    branches: list[Branch] = []
    measurements: list[MeasurementSpec] = []
    internal: set[str] = set()
    mid_count = 0
    for e in live:
        p, q = node(e.endpoints[0]), node(e.endpoints[1])
        meas = e.measurement
        if meas is not None and meas.kind == "CurrentObs":
            ammeter = AMMETER_PREFIX + meas.label
            if e.kind == "Short":
                mid = p
            else:
                mid_count += 1
                mid = f"m{mid_count}"
                internal.add(mid)
            a, b = (mid, q) if meas.polarity == 0 else (q, mid)
            if e.kind != "Short":
                branches.append(_component_branch(e, p, mid, with_values, volt_pairs))
            branches.append(Branch(ammeter, "Ammeter", a, b, Fraction(0)))
            measurements.append(MeasurementSpec(meas.label, "CurrentObs", branch=ammeter))
            continue
        branches.append(_component_branch(e, p, q, with_values, volt_pairs))
        if meas is not None:
            measurements.append(MeasurementSpec(meas.label, "VoltageObs", nodes=volt_pairs[meas.label]))

    nodes = {b.n_plus for b in branches} | {b.n_minus for b in branches}
    net = Netlist(nodes, branches, measurements, frozenset(internal))
    _check_connected(nodes, branches)
    names_set = {b.name for b in branches}
    for b in branches:
        if b.kind in CC_KINDS and b.control not in names_set:
            raise DanglingControl(f"{b.name}: sensing branch {b.control!r} missing")
        if b.kind in VC_KINDS and b.control is None:
            raise DanglingControl(f"{b.name}: control voltage missing")
    net.validate()
    return net


def _has_current_obs(e) -> bool:
    return e.measurement is not None and e.measurement.kind == "CurrentObs"


def _component_branch(e, p: str, q: str, with_values: bool, volt_pairs: dict[str, tuple[str, str]]) -> Branch:
    n_plus, n_minus = (p, q) if e.direction == 0 else (q, p)
    control: tuple[str, str] | str | None = None
    if e.kind in VC_KINDS:
        control = volt_pairs.get(e.control_ref)
    elif e.kind in CC_KINDS:
        control = AMMETER_PREFIX + e.control_ref
    value = e.si_value() if with_values else None
    return Branch(e.label, e.kind, n_plus, n_minus, value, control)


# -- equality -----------------------------------------------------------------


def netlist_equal(a: Netlist, b: Netlist) -> bool:
    """Isomorphism test under node relabeling, with ``"0"`` fixed.

    Branch names, kinds, values, controls and measurements must match
    exactly. Resistors may be connected in either orientation.
    """
    if len(a.nodes) != len(b.nodes) or len(a.branches) != len(b.branches):
        return False
    bb = {x.name: x for x in b.branches}
    if set(bb) != {x.name for x in a.branches}:
        return False
    constraints: list[list[list[tuple[str, str]]]] = []
    for x in a.branches:
        y = bb[x.name]
        if x.kind != y.kind or x.value != y.value:
            return False
        options = [[(x.n_plus, y.n_plus), (x.n_minus, y.n_minus)]]
        if x.kind == "Resistor":
            options.append([(x.n_plus, y.n_minus), (x.n_minus, y.n_plus)])
        constraints.append(options)
        if isinstance(x.control, tuple) or isinstance(y.control, tuple):
            if not (isinstance(x.control, tuple) and isinstance(y.control, tuple)):
                return False
            constraints.append([list(zip(x.control, y.control))])
        elif x.control != y.control:
            return False
    bm = {mm.label: mm for mm in b.measurements}
    if len(bm) != len(a.measurements) or set(bm) != {mm.label for mm in a.measurements}:
        return False
    for mm in a.measurements:
        other = bm[mm.label]
        if mm.kind != other.kind or mm.branch != other.branch:
            return False
        if mm.nodes is not None or other.nodes is not None:
            if mm.nodes is None or other.nodes is None:
                return False
            constraints.append([list(zip(mm.nodes, other.nodes))])
    # forced constraints first keeps the search shallow
    constraints.sort(key=len)
    return _search(constraints, 0, {REF: REF}, {REF: REF})


def _search(constraints, i: int, fwd: dict[str, str], bwd: dict[str, str]) -> bool:
    if i == len(constraints):
        return True
    for option in constraints[i]:
        added: list[tuple[str, str]] = []
        ok = True
        for u, v in option:
            if u in fwd or v in bwd:
                if fwd.get(u) != v or bwd.get(v) != u:
                    ok = False
                    break
            else:
                fwd[u] = v
                bwd[v] = u
                added.append((u, v))
        if ok and _search(constraints, i + 1, fwd, bwd):
            return True
        for u, v in added:
            del fwd[u]
            del bwd[v]
    return False
