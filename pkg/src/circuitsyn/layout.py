"""Diagram layouts on a planar grid and the hierarchical layout sampler.

A layout is an ``m x n`` grid of nodes. Every horizontal and vertical grid
edge carries exactly one :class:`EdgeSpec`; empty edges are explicit
``Open`` entries so the grid stays structurally complete.

Grid coordinates are ``(row, col)`` with row 0 at the bottom. Edges are
ordered horizontal-first, each group row-major.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable

import numpy as np

SCHEMA_VERSION = 1

COMPONENT_KINDS = ("Resistor", "VSource", "ISource", "VCVS", "VCCS", "CCVS", "CCCS")
EDGE_KINDS = COMPONENT_KINDS + ("Short", "Open")
CONTROLLED_KINDS = ("VCVS", "VCCS", "CCVS", "CCCS")
VC_KINDS = ("VCVS", "VCCS")
CC_KINDS = ("CCVS", "CCCS")
SOURCE_KINDS = ("VSource", "ISource")
MEASUREMENT_KINDS = ("VoltageObs", "CurrentObs")

UNIT_SCALE: dict[str, Fraction] = {
    "Ohm": Fraction(1),
    "kOhm": Fraction(1000),
    "V": Fraction(1),
    "A": Fraction(1),
    "mA": Fraction(1, 1000),
    "gain": Fraction(1),
}

DEFAULT_CONFIG_PATH = Path(__file__).parent / "data" / "default_config.json"


class ConfigError(ValueError):
    pass


class RetryExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class ValueRange:
    unit: str
    low: int
    high: int
    p: float = 1.0


@dataclass
class SamplerConfig:
    grid_dims: list[tuple[tuple[int, int], float]]
    spacing_range: tuple[float, float]
    component_type_dist: dict[str, float]
    value_ranges: dict[str, list[ValueRange]]
    label_prefixes: dict[str, str]
    measurement_probs: dict[str, float]
    circuit_kind: dict[str, float]
    seed: int = 0
    max_retries: int = 500
    require_simulatable: bool = True

    def validate(self) -> None:
        _check_dist("grid_dims", [p for _, p in self.grid_dims])
        for (m, n), _ in self.grid_dims:
            if m < 1 or n < 1 or m * n < 2:
                raise ConfigError(f"grid dims must give at least two nodes, got {m}x{n}")
        d_min, d_max = self.spacing_range
        if not d_min < d_max:
            raise ConfigError(f"spacing_range needs d_min < d_max, got {self.spacing_range}")
        unknown = set(self.component_type_dist) - set(EDGE_KINDS)
        if unknown:
            raise ConfigError(f"unknown edge kinds {sorted(unknown)}")
        _check_dist("component_type_dist", list(self.component_type_dist.values()))
        for kind in COMPONENT_KINDS:
            if self.component_type_dist.get(kind, 0.0) <= 0:
                continue
            ranges = self.value_ranges.get(kind)
            if not ranges:
                raise ConfigError(f"no value range for {kind}")
            _check_dist(f"value_ranges[{kind}]", [r.p for r in ranges])
            for r in ranges:
                if r.unit not in UNIT_SCALE:
                    raise ConfigError(f"unknown unit {r.unit!r}")
                if not 0 < r.low <= r.high:
                    raise ConfigError(f"bad integer range {r.low}..{r.high} for {kind}")
            if kind not in self.label_prefixes:
                raise ConfigError(f"no label prefix for {kind}")
        for kind in MEASUREMENT_KINDS:
            if kind not in self.label_prefixes:
                raise ConfigError(f"no label prefix for {kind}")
        pv = self.measurement_probs.get("VoltageObs", 0.0)
        pc = self.measurement_probs.get("CurrentObs", 0.0)
        if pv < 0 or pc < 0 or pv + pc > 1:
            raise ConfigError("measurement probabilities must be non-negative and sum to <= 1")
        if set(self.circuit_kind) - {"Numerical", "Label"}:
            raise ConfigError("circuit_kind keys must be Numerical and/or Label")
        _check_dist("circuit_kind", list(self.circuit_kind.values()))
        if self.max_retries < 1:
            raise ConfigError("max_retries must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "grid_dims": [{"m": m, "n": n, "p": p} for (m, n), p in self.grid_dims],
            "spacing_range": list(self.spacing_range),
            "component_type_dist": dict(self.component_type_dist),
            "value_ranges": {
                k: [{"unit": r.unit, "low": r.low, "high": r.high, "p": r.p} for r in v]
                for k, v in self.value_ranges.items()
            },
            "label_prefixes": dict(self.label_prefixes),
            "measurement_probs": dict(self.measurement_probs),
            "circuit_kind": dict(self.circuit_kind),
            "seed": self.seed,
            "max_retries": self.max_retries,
            "require_simulatable": self.require_simulatable,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SamplerConfig:
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        try:
            kind = data["circuit_kind"]
            if isinstance(kind, str):
                kind = {kind: 1.0}
            cfg = cls(
                grid_dims=[((int(g["m"]), int(g["n"])), float(g["p"])) for g in data["grid_dims"]],
                spacing_range=(float(data["spacing_range"][0]), float(data["spacing_range"][1])),
                component_type_dist={k: float(v) for k, v in data["component_type_dist"].items()},
                value_ranges={
                    k: [ValueRange(r["unit"], int(r["low"]), int(r["high"]), float(r.get("p", 1.0))) for r in v]
                    for k, v in data["value_ranges"].items()
                },
                label_prefixes=dict(data["label_prefixes"]),
                measurement_probs={k: float(v) for k, v in data["measurement_probs"].items()},
                circuit_kind={k: float(v) for k, v in kind.items()},
                seed=int(data.get("seed", 0)),
                max_retries=int(data.get("max_retries", 500)),
                require_simulatable=bool(data.get("require_simulatable", True)),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"malformed sampler config: {exc!r}") from exc
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        """Hash of everything but the seed, so datasets record which distribution made them."""
        payload = self.to_dict()
        payload.pop("seed")
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _check_dist(name: str, probs: list[float]) -> None:
    if not probs:
        raise ConfigError(f"{name} is empty")
    if any(p < 0 for p in probs):
        raise ConfigError(f"{name} has negative probabilities")
    if abs(math.fsum(probs) - 1.0) > 1e-12:
        raise ConfigError(f"{name} sums to {math.fsum(probs)!r}, expected 1")


def load_config(path: str | Path | None = None) -> SamplerConfig:
    path = Path(path) if path is not None else DEFAULT_CONFIG_PATH
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return SamplerConfig.from_dict(data)


def default_config(**overrides: Any) -> SamplerConfig:
    cfg = load_config()
    for key, value in overrides.items():
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class Measurement:
    kind: str  # VoltageObs | CurrentObs
    label: str
    polarity: int = 0


@dataclass(frozen=True)
class EdgeSpec:
    endpoints: tuple[tuple[int, int], tuple[int, int]]
    kind: str
    direction: int = 0
    value: tuple[int, str] | None = None  # (magnitude, unit)
    label: str | None = None
    measurement: Measurement | None = None
    control_ref: str | None = None

    @property
    def is_component(self) -> bool:
        return self.kind in COMPONENT_KINDS

    def si_value(self) -> Fraction | None:
        if self.value is None:
            return None
        magnitude, unit = self.value
        return Fraction(magnitude) * UNIT_SCALE[unit]

    def to_dict(self) -> dict[str, Any]:
        return {
            "endpoints": [list(self.endpoints[0]), list(self.endpoints[1])],
            "kind": self.kind,
            "direction": self.direction,
            "value": None if self.value is None else {"magnitude": self.value[0], "unit": self.value[1]},
            "label": self.label,
            "measurement": None if self.measurement is None else {
                "kind": self.measurement.kind,
                "label": self.measurement.label,
                "polarity": self.measurement.polarity,
            },
            "control_ref": self.control_ref,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EdgeSpec:
        (r0, c0), (r1, c1) = d["endpoints"]
        value = d.get("value")
        meas = d.get("measurement")
        return cls(
            endpoints=((int(r0), int(c0)), (int(r1), int(c1))),
            kind=d["kind"],
            direction=int(d.get("direction", 0)),
            value=None if value is None else (int(value["magnitude"]), value["unit"]),
            label=d.get("label"),
            measurement=None if meas is None else Measurement(meas["kind"], meas["label"], int(meas.get("polarity", 0))),
            control_ref=d.get("control_ref"),
        )


@dataclass
class DiagramLayout:
    m: int
    n: int
    h_spacing: list[float]
    v_spacing: list[float]
    edges: list[EdgeSpec]
    circuit_kind: str = "Numerical"

    def validate(self) -> None:
        expected = expected_edge_count(self.m, self.n)
        if len(self.edges) != expected:
            raise ValueError(f"layout has {len(self.edges)} edges, expected {expected}")
        if len(self.h_spacing) != self.n - 1 or len(self.v_spacing) != self.m - 1:
            raise ValueError("spacing vector lengths do not match the grid")
        for e, (a, b) in zip(self.edges, grid_edges(self.m, self.n)):
            if e.endpoints != (a, b):
                raise ValueError(f"edge {e.endpoints} out of grid order, expected {(a, b)}")
        meas = {}
        for e in self.edges:
            if e.measurement is not None:
                if e.measurement.label in meas:
                    raise ValueError(f"duplicate measurement label {e.measurement.label}")
                meas[e.measurement.label] = e.measurement.kind
        for e in self.edges:
            if e.kind in CONTROLLED_KINDS:
                want = "VoltageObs" if e.kind in VC_KINDS else "CurrentObs"
                if meas.get(e.control_ref) != want:
                    raise ValueError(f"{e.label} control_ref {e.control_ref!r} does not name a {want}")
            if e.is_component:
                if e.label is None:
                    raise ValueError(f"component at {e.endpoints} has no label")
                if self.circuit_kind == "Numerical" and e.value is None:
                    raise ValueError(f"component {e.label} has no value in a Numerical layout")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "m": self.m,
            "n": self.n,
            "h_spacing": list(self.h_spacing),
            "v_spacing": list(self.v_spacing),
            "circuit_kind": self.circuit_kind,
            "edges": [e.to_dict() for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DiagramLayout:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported layout schema_version {d.get('schema_version')!r}")
        return cls(
            m=int(d["m"]),
            n=int(d["n"]),
            h_spacing=[float(x) for x in d["h_spacing"]],
            v_spacing=[float(x) for x in d["v_spacing"]],
            edges=[EdgeSpec.from_dict(e) for e in d["edges"]],
            circuit_kind=d.get("circuit_kind", "Numerical"),
        )

    @classmethod
    def from_json(cls, text: str) -> DiagramLayout:
        return cls.from_dict(json.loads(text))

    def component_values(self) -> dict[str, Fraction]:
        """Label -> SI value for every valued component, hidden or not."""
        return {e.label: e.si_value() for e in self.edges if e.is_component and e.value is not None}


def expected_edge_count(m: int, n: int) -> int:
    return m * (n - 1) + (m - 1) * n


def grid_edges(m: int, n: int) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    edges = [((r, c), (r, c + 1)) for r in range(m) for c in range(n - 1)]
    edges += [((r, c), (r + 1, c)) for r in range(m - 1) for c in range(n)]
    return edges


def sample_rng(seed: int, index: int | None = None) -> np.random.Generator:
    """Independent stream per (dataset seed, sample index)."""
    key = [seed] if index is None else [seed, index]
    return np.random.default_rng(np.random.SeedSequence(key))


# -- sampling -----------------------------------------------------------------


def _choice(rng: np.random.Generator, items: list, probs: list[float]):
    return items[int(rng.choice(len(items), p=np.asarray(probs, dtype=float)))]


def _draw_layout(cfg: SamplerConfig, rng: np.random.Generator) -> DiagramLayout | None:
    kinds_c = sorted(cfg.circuit_kind)
    circuit_kind = _choice(rng, kinds_c, [cfg.circuit_kind[k] for k in kinds_c])
    m, n = _choice(rng, [g for g, _ in cfg.grid_dims], [p for _, p in cfg.grid_dims])

    d_min, d_max = cfg.spacing_range
    h_spacing = [_spacing(rng, d_min, d_max) for _ in range(n - 1)]
    v_spacing = [_spacing(rng, d_min, d_max) for _ in range(m - 1)]

    pairs = grid_edges(m, n)
    type_items = [k for k in EDGE_KINDS if cfg.component_type_dist.get(k, 0.0) > 0]
    type_probs = [cfg.component_type_dist[k] for k in type_items]
    kinds = [_choice(rng, type_items, type_probs) for _ in pairs]
    directions = [int(rng.integers(0, 2)) for _ in pairs]

    values: list[tuple[int, str] | None] = []
    for kind in kinds:
        if kind in COMPONENT_KINDS:
            ranges = cfg.value_ranges[kind]
            r = _choice(rng, ranges, [x.p for x in ranges])
            values.append((int(rng.integers(r.low, r.high + 1)), r.unit))
        else:
            values.append(None)

    counters: dict[str, int] = {}
    labels: list[str | None] = []
    for kind in kinds:
        if kind in COMPONENT_KINDS:
            counters[kind] = counters.get(kind, 0) + 1
            labels.append(f"{cfg.label_prefixes[kind]}{counters[kind]}")
        else:
            labels.append(None)

    # measurements: at most one per edge, only on non-Open edges, no voltage obs across wires
    pv = cfg.measurement_probs.get("VoltageObs", 0.0)
    pc = cfg.measurement_probs.get("CurrentObs", 0.0)
    meas: list[tuple[str, int] | None] = []
    for kind in kinds:
        u = rng.random()
        pol = int(rng.integers(0, 2))
        if kind == "Open":
            meas.append(None)
        elif u < pv and kind != "Short":
            meas.append(("VoltageObs", pol))
        elif pv <= u < pv + pc:
            meas.append(("CurrentObs", pol))
        else:
            meas.append(None)

    # controlled sources point at a measurement elsewhere, creating one when needed
    control_edge: dict[int, int] = {}
    for i, kind in enumerate(kinds):
        if kind not in CONTROLLED_KINDS:
            continue
        want = "VoltageObs" if kind in VC_KINDS else "CurrentObs"
        existing = [j for j, mm in enumerate(meas) if mm is not None and mm[0] == want and j != i]
        if existing:
            control_edge[i] = existing[int(rng.integers(0, len(existing)))]
            continue
        free = [
            j for j, k in enumerate(kinds)
            if j != i and k != "Open" and meas[j] is None and not (want == "VoltageObs" and k == "Short")
        ]
        if not free:
            return None
        j = free[int(rng.integers(0, len(free)))]
        meas[j] = (want, int(rng.integers(0, 2)))
        control_edge[i] = j

    if all(mm is None for mm in meas):
        eligible = [j for j, k in enumerate(kinds) if k in COMPONENT_KINDS]
        if not eligible:
            return None
        j = eligible[int(rng.integers(0, len(eligible)))]
        meas[j] = ("VoltageObs", int(rng.integers(0, 2)))

    meas_labels: list[str | None] = []
    mcount = {"VoltageObs": 0, "CurrentObs": 0}
    for mm in meas:
        if mm is None:
            meas_labels.append(None)
        else:
            mcount[mm[0]] += 1
            meas_labels.append(f"{cfg.label_prefixes[mm[0]]}{mcount[mm[0]]}")

    edges = []
    for i, ((a, b), kind) in enumerate(zip(pairs, kinds)):
        mm = meas[i]
        edges.append(EdgeSpec(
            endpoints=(a, b),
            kind=kind,
            direction=directions[i],
            value=values[i],
            label=labels[i],
            measurement=None if mm is None else Measurement(mm[0], meas_labels[i], mm[1]),
            control_ref=meas_labels[control_edge[i]] if i in control_edge else None,
        ))
    return DiagramLayout(m, n, h_spacing, v_spacing, edges, circuit_kind)


def _spacing(rng: np.random.Generator, d_min: float, d_max: float) -> float:
    return float(min(max(round(rng.uniform(d_min, d_max), 2), d_min), d_max))


def _structurally_valid(layout: DiagramLayout) -> bool:
    from .netlist import NetlistError, extract_netlist

    kinds = [e.kind for e in layout.edges]
    if not any(k in SOURCE_KINDS for k in kinds) or "Resistor" not in kinds:
        return False
    try:
        extract_netlist(layout)
    except NetlistError:
        return False
    return True


def _simulatable(layout: DiagramLayout) -> bool:
    from .netlist import extract_netlist
    from .sim import check_valid, simulate
    from .spice import emit_spice

    deck = emit_spice(extract_netlist(layout, with_values=True))
    return check_valid(simulate(deck))


@dataclass
class SampleOutcome:
    layout: DiagramLayout
    attempts: int
    simulatable: bool


def sample_layout_ex(config: SamplerConfig, rng: np.random.Generator | None = None) -> SampleOutcome:
    """Like :func:`sample_layout` but also reports attempts and simulatability."""
    config.validate()
    if rng is None:
        rng = sample_rng(config.seed)
    fallback: tuple[DiagramLayout, int] | None = None
    for attempt in range(1, config.max_retries + 1):
        layout = _draw_layout(config, rng)
        if layout is None or not _structurally_valid(layout):
            continue
        if not config.require_simulatable:
            return SampleOutcome(layout, attempt, _simulatable(layout))
        if _simulatable(layout):
            return SampleOutcome(layout, attempt, True)
        if fallback is None:
            fallback = (layout, attempt)
    if fallback is not None:
        return SampleOutcome(fallback[0], config.max_retries, False)
    raise RetryExhausted(f"no valid layout after {config.max_retries} attempts")


def sample_layout(config: SamplerConfig, rng: np.random.Generator | None = None) -> DiagramLayout:
    """Draw one layout; deterministic in ``(config, rng state)``.

    Draws are repeated until the layout has a source, a resistor and a
    connected netlist that includes the reference node. With
    ``require_simulatable`` the sampler also prefers layouts whose operating
    point exists, falling back to the first structurally valid draw.
    """
    return sample_layout_ex(config, rng).layout


# -- statistics -----------------------------------------------------------------

STAT_ROWS = (
    "nodes",
    "branches",
    "resistors",
    "voltage_sources",
    "current_sources",
    "controlled_sources",
    "shorts",
    "voltage_measurements",
    "current_measurements",
)


@dataclass(frozen=True)
class StatRow:
    mean: float
    std: float
    max: float
    min: float


@dataclass
class StatsReport:
    count: int
    rows: dict[str, StatRow] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "rows": {k: {"mean": r.mean, "std": r.std, "max": r.max, "min": r.min} for k, r in self.rows.items()},
        }

    def format_table(self) -> str:
        lines = [f"{'Parameter':<24}{'Mean':>10}{'Std':>10}{'Max':>8}{'Min':>8}"]
        for name, r in self.rows.items():
            lines.append(f"{'#' + name:<24}{r.mean:>10.3f}{r.std:>10.3f}{r.max:>8.1f}{r.min:>8.1f}")
        return "\n".join(lines)


def layout_counts(layout: DiagramLayout) -> dict[str, int]:
    """Per-layout counts behind each stats row.

    Shorts are only the wire edges that carry a current observation; plain
    wires merge into equipotential nodes and are not branches.
    """
    from .netlist import equipotential_node_count, extract_netlist

    kinds = [e.kind for e in layout.edges]
    c = {
        "resistors": kinds.count("Resistor"),
        "voltage_sources": kinds.count("VSource"),
        "current_sources": kinds.count("ISource"),
        "controlled_sources": sum(kinds.count(k) for k in CONTROLLED_KINDS),
        "shorts": sum(
            1 for e in layout.edges
            if e.kind == "Short" and e.measurement is not None and e.measurement.kind == "CurrentObs"
        ),
        "voltage_measurements": sum(
            1 for e in layout.edges if e.measurement is not None and e.measurement.kind == "VoltageObs"
        ),
        "current_measurements": sum(
            1 for e in layout.edges if e.measurement is not None and e.measurement.kind == "CurrentObs"
        ),
    }
    c["branches"] = (
        c["resistors"] + c["voltage_sources"] + c["current_sources"] + c["controlled_sources"] + c["shorts"]
    )
    c["nodes"] = equipotential_node_count(extract_netlist(layout))
    return c


def layout_stats(layouts: Iterable[DiagramLayout]) -> StatsReport:
    per = [layout_counts(lay) for lay in layouts]
    if not per:
        raise ValueError("layout_stats needs at least one layout")
    report = StatsReport(count=len(per))
    for name in STAT_ROWS:
        arr = np.array([c[name] for c in per], dtype=float)
        report.rows[name] = StatRow(float(arr.mean()), float(arr.std()), float(arr.max()), float(arr.min()))
    return report
