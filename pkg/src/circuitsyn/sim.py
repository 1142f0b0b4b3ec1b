"""DC operating point by modified nodal analysis.

Sign convention: a branch current is positive when it flows from ``n_plus``
to ``n_minus`` *inside* the element. ``I(V1)`` for a 10 V source driving a
5 ohm load therefore reads -2 A.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np

from .netlist import REF, node_sort_key
from .spice import VOLTAGE_DEFINED, SpiceDeck, SpiceError, parse_spice

TEMPERATURE_C = 27.0
NOMINAL_TEMPERATURE_C = 27.0
PIVOT_RTOL = 1e-12
# Stamps and factorization run in extended precision where the platform has it;
# values are converted to float only on output.
WORK_DTYPE = np.longdouble

STATUS_OK = "Ok"
STATUS_SINGULAR = "Singular"
STATUS_INCOMPLETE = "Incomplete"
STATUS_PARSE_FAILED = "ParseFailed"


class SimulationError(RuntimeError):
    pass


class IncompleteDeck(SimulationError):
    pass


class UnknownSenseBranch(SimulationError):
    pass


class Singular(SimulationError):
    pass


@dataclass
class MnaSystem:
    node_index: dict[str, int]
    aux_index: dict[str, int]
    A: np.ndarray
    b: np.ndarray
    deck: SpiceDeck | None = None

    @property
    def size(self) -> int:
        return self.A.shape[0]


def build_mna(deck: SpiceDeck) -> MnaSystem:
    if not deck.is_complete:
        raise IncompleteDeck(f"deck has <Empty> values: {', '.join(deck.empty_names)}")
    nodes = sorted(deck.node_set() - {REF}, key=node_sort_key)
    node_index = {n: i for i, n in enumerate(nodes)}
    n_nodes = len(nodes)
    aux = [e.name for e in deck.elements if e.kind in VOLTAGE_DEFINED]
    aux_index = {name: n_nodes + k for k, name in enumerate(aux)}
    size = n_nodes + len(aux)
    A = np.zeros((size, size), dtype=WORK_DTYPE)
    b = np.zeros(size, dtype=WORK_DTYPE)

    def at(node: str) -> int | None:
        if node == REF:
            return None
        try:
            return node_index[node]
        except KeyError:
            raise SimulationError(f"node {node!r} is not connected to any element") from None

    def add(r: int | None, c: int | None, v) -> None:
        if r is not None and c is not None:
            A[r, c] += v

    for e in deck.elements:
        p, q = at(e.n_plus), at(e.n_minus)
        val = _work(e.value)
        kind = e.kind
        if kind == "Resistor":
            g = _work(1 / e.value)
            add(p, p, g)
            add(q, q, g)
            add(p, q, -g)
            add(q, p, -g)
        elif kind == "ISource":
            if p is not None:
                b[p] -= val
            if q is not None:
                b[q] += val
        elif kind == "VCCS":
            cp, cn = at(e.control[0]), at(e.control[1])
            add(p, cp, val)
            add(p, cn, -val)
            add(q, cp, -val)
            add(q, cn, val)
        elif kind == "CCCS":
            k = _sense(aux_index, e)
            add(p, k, val)
            add(q, k, -val)
        else:
            # voltage-defined: own current unknown plus a constraint row
            k = aux_index[e.name]
            add(p, k, 1.0)
            add(q, k, -1.0)
            add(k, p, 1.0)
            add(k, q, -1.0)
            if kind in ("VSource", "Ammeter"):
                b[k] = val
            elif kind == "VCVS":
                cp, cn = at(e.control[0]), at(e.control[1])
                add(k, cp, -val)
                add(k, cn, val)
            elif kind == "CCVS":
                add(k, _sense(aux_index, e), -val)
    return MnaSystem(node_index, aux_index, A, b, deck)


def _work(value: Fraction):
    """Fraction to working precision without a float64 detour."""
    return WORK_DTYPE(value.numerator) / WORK_DTYPE(value.denominator)


def _sense(aux_index: dict[str, int], e) -> int:
    try:
        return aux_index[e.control]
    except KeyError:
        raise UnknownSenseBranch(f"{e.name} senses {e.control!r}, which has no current unknown") from None


def lu_factor(A: np.ndarray, rtol: float = PIVOT_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """In-place style Doolittle LU with partial pivoting; returns (LU, perm)."""
    lu = np.array(A, dtype=WORK_DTYPE, copy=True)
    n = lu.shape[0]
    perm = np.arange(n)
    scale = float(np.max(np.abs(lu))) if n else 0.0
    if n and scale == 0.0:
        raise Singular("matrix is all zeros")
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= rtol * scale:
            raise Singular(f"pivot {lu[p, k]:.3g} at column {k} below {rtol:g} * max|A|")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = lu.shape[0]
    y = np.array(b, dtype=WORK_DTYPE)[perm]
    for i in range(1, n):
        y[i] -= lu[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
    return y


@dataclass
class OperatingPoint:
    node_voltages: dict[str, float]
    aux_currents: dict[str, float]


def _equilibrate(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Power-of-two row then column scales bringing each row/column max near 1.

    Conductances, gains and unit stamps can span ten decades in one matrix;
    scaling first keeps partial pivoting and the singularity test meaningful.
    Powers of two make the scaling itself exact.
    """
    def scales(m: np.ndarray) -> np.ndarray:
        m = np.where(m > 0, m, 1)
        return np.exp2(-np.round(np.log2(m.astype(float)))).astype(WORK_DTYPE)

    absA = np.abs(A)
    r = scales(absA.max(axis=1)) if A.size else np.ones(0, dtype=WORK_DTYPE)
    c = scales((absA * r[:, None]).max(axis=0)) if A.size else np.ones(0, dtype=WORK_DTYPE)
    return r, c


def solve_linear(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Equilibrated LU solve of ``A x = b`` in working precision."""
    A = np.asarray(A, dtype=WORK_DTYPE)
    b = np.asarray(b, dtype=WORK_DTYPE)
    r, c = _equilibrate(A)
    lu, perm = lu_factor(A * r[:, None] * c[None, :])
    return c * lu_solve(lu, perm, r * b)


def solve(system: MnaSystem) -> OperatingPoint:
    """Operating point in working precision (convert with ``float`` for output)."""
    x = solve_linear(system.A, system.b)
    volts = {REF: WORK_DTYPE(0)}
    volts.update({n: x[i] for n, i in system.node_index.items()})
    currents = {name: x[i] for name, i in system.aux_index.items()}
    return OperatingPoint(volts, currents)


def branch_currents(deck: SpiceDeck, op: OperatingPoint) -> dict[str, Any]:
    """Current through every element, positive from n_plus to n_minus inside it."""
    v = op.node_voltages
    out: dict[str, Any] = {}
    for e in deck.elements:
        val = _work(e.value)
        kind = e.kind
        if kind == "Resistor":
            out[e.name] = (v[e.n_plus] - v[e.n_minus]) / val
        elif kind == "ISource":
            out[e.name] = val
        elif kind == "VCCS":
            out[e.name] = val * (v[e.control[0]] - v[e.control[1]])
        elif kind == "CCCS":
            out[e.name] = val * op.aux_currents[e.control]
        else:
            out[e.name] = op.aux_currents[e.name]
    return out


@dataclass
class SimulationResult:
    status: str
    values: dict[str, float] = field(default_factory=dict)
    raw_node_voltages: dict[str, float] = field(default_factory=dict)
    branch_currents: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    meta: dict[str, float] = field(
        default_factory=lambda: {"temperature_c": TEMPERATURE_C, "tnom_c": NOMINAL_TEMPERATURE_C}
    )

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"status": self.status, "values": dict(self.values), "meta": dict(self.meta)}
        if self.raw_node_voltages:
            d["node_voltages"] = dict(self.raw_node_voltages)
        if self.error:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SimulationResult:
        return cls(
            status=d["status"],
            values={k: float(v) for k, v in d.get("values", {}).items()},
            raw_node_voltages={k: float(v) for k, v in d.get("node_voltages", {}).items()},
            error=d.get("error"),
            meta=dict(d.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def values_text(self) -> str:
        """The dictionary view handed to the reasoning model."""
        return json.dumps({k: _round_sig(v) for k, v in self.values.items()}, indent=2)


def _round_sig(x: float, digits: int = 10) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


def simulate(deck: SpiceDeck | str) -> SimulationResult:
    """Run the operating point and evaluate every ``.PRINT`` probe.

    Never raises for circuit problems: failures land in ``status``. With no
    probes at all, every node voltage is reported.
    """
    if isinstance(deck, str):
        try:
            deck = parse_spice(deck)
        except SpiceError as exc:
            return SimulationResult(STATUS_PARSE_FAILED, error=str(exc))
    try:
        system = build_mna(deck)
    except IncompleteDeck as exc:
        return SimulationResult(STATUS_INCOMPLETE, error=str(exc))
    except SimulationError as exc:
        return SimulationResult(STATUS_PARSE_FAILED, error=str(exc))
    try:
        op = solve(system)
    except Singular as exc:
        return SimulationResult(STATUS_SINGULAR, error=str(exc))

    currents = branch_currents(deck, op)
    values: dict[str, float] = {}
    for probe in deck.probes:
        if probe.kind == "V":
            a, b = probe.nodes
            if a not in op.node_voltages or b not in op.node_voltages:
                return SimulationResult(STATUS_PARSE_FAILED, error=f"probe {probe.expr} names an unknown node")
            values[probe.key] = float(op.node_voltages[a] - op.node_voltages[b])
        else:
            if probe.branch not in currents:
                return SimulationResult(STATUS_PARSE_FAILED, error=f"probe {probe.expr} names an unknown element")
            values[probe.key] = float(currents[probe.branch])
    volts = {n: float(v) for n, v in op.node_voltages.items()}
    if not deck.probes:
        values = {f"V({n})": v for n, v in volts.items() if n != REF}
    return SimulationResult(STATUS_OK, values, volts, {k: float(v) for k, v in currents.items()})


def check_valid(result: SimulationResult) -> bool:
    return result.status == STATUS_OK and bool(result.values) and all(math.isfinite(v) for v in result.values.values())
