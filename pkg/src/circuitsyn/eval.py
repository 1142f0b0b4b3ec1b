"""Perception-model metrics: component quantity, component value, simulation agreement."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .netlist import Netlist, equipotential_node_count
from .sim import SimulationResult, check_valid, simulate
from .spice import ELEMENT_LETTERS, SpiceDeck, SpiceError, parse_spice

VALUE_RTOL = 1e-9
SIM_RTOL = 1e-4
SIM_ATOL = 1e-9


class NotApplicable(ValueError):
    pass


def kind_counts(deck: SpiceDeck) -> Counter:
    """Element counts per SPICE letter. Ammeters are measurements, not components."""
    c = Counter({letter: 0 for letter in ELEMENT_LETTERS})
    for e in deck.elements:
        if e.kind != "Ammeter":
            c[e.letter] += 1
    return c


def score_quantity(pred: SpiceDeck, gold: SpiceDeck) -> bool:
    return kind_counts(pred) == kind_counts(gold)


def _values_by_letter(deck: SpiceDeck) -> dict[str, list[Fraction]]:
    out: dict[str, list[Fraction]] = {letter: [] for letter in ELEMENT_LETTERS}
    for e in deck.elements:
        if e.kind != "Ammeter":
            out[e.letter].append(e.value)
    return {k: sorted(v) for k, v in out.items()}


def score_value(pred: SpiceDeck, gold: SpiceDeck, rel_tol: float = VALUE_RTOL) -> bool:
    """Counts match and the per-kind value multisets agree; order of cards is irrelevant."""
    if not gold.is_complete:
        raise NotApplicable("component values are only scored for Numerical decks")
    if not score_quantity(pred, gold):
        return False
    if not pred.is_complete:
        return False
    pv, gv = _values_by_letter(pred), _values_by_letter(gold)
    return all(
        math.isclose(float(a), float(b), rel_tol=rel_tol, abs_tol=0.0)
        for letter in ELEMENT_LETTERS
        for a, b in zip(pv[letter], gv[letter])
    )


def compare_results(
    pred: SimulationResult, gold: SimulationResult, rel_tol: float = SIM_RTOL, abs_tol: float = SIM_ATOL
) -> tuple[bool, str | None]:
    if not check_valid(pred):
        return False, f"prediction did not simulate: {pred.status}"
    if not check_valid(gold):
        return False, f"gold did not simulate: {gold.status}"
    if set(pred.values) != set(gold.values):
        return False, "measurement labels differ"
    for label, g in gold.values.items():
        if not math.isclose(pred.values[label], g, rel_tol=rel_tol, abs_tol=abs_tol):
            return False, f"{label}: {pred.values[label]!r} != {g!r}"
    return True, None


def score_simulation(
    pred: SpiceDeck, gold: SpiceDeck, rel_tol: float = SIM_RTOL, abs_tol: float = SIM_ATOL
) -> bool:
    return compare_results(simulate(pred), simulate(gold), rel_tol, abs_tol)[0]


@dataclass
class PpmScore:
    acc_cq: bool
    acc_cv: bool | None = None
    acc_sim: bool | None = None
    failure_reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def score_sample(
    pred_text: str,
    gold: SpiceDeck | str,
    circuit_kind: str = "Numerical",
    gold_result: SimulationResult | None = None,
    rel_tol: float = SIM_RTOL,
    abs_tol: float = SIM_ATOL,
) -> PpmScore:
    """Score one prediction.

    ``acc_sim`` is None when the gold deck itself does not simulate (such
    samples leave the denominator); a prediction that fails to simulate
    scores False.
    """
    gold_deck = parse_spice(gold) if isinstance(gold, str) else gold
    numerical = circuit_kind == "Numerical"
    if gold_result is None:
        gold_result = simulate(gold_deck)
    gold_ok = check_valid(gold_result)
    try:
        pred = parse_spice(pred_text)
    except SpiceError as exc:
        return PpmScore(False, False if numerical else None, False if gold_ok else None, f"parse: {exc}")
    cq = score_quantity(pred, gold_deck)
    cv = score_value(pred, gold_deck) if numerical and gold_deck.is_complete else None
    if not gold_ok:
        return PpmScore(cq, cv, None, f"gold not simulatable: {gold_result.status}")
    ok, reason = compare_results(simulate(pred), gold_result, rel_tol, abs_tol)
    return PpmScore(cq, cv, ok, reason)


# -- aggregate ------------------------------------------------------------------


def _rate(flags: Iterable[bool | None]) -> tuple[float | None, int]:
    vals = [f for f in flags if f is not None]
    return (sum(vals) / len(vals) if vals else None), len(vals)


def aggregate_scores(rows: Sequence[tuple[str, PpmScore]]) -> dict[str, dict[str, Any]]:
    """Rates per circuit kind, laid out like a CQ/CV/sim by Num./Lab. table."""
    report: dict[str, dict[str, Any]] = {}
    for kind in ("Numerical", "Label"):
        scores = [s for k, s in rows if k == kind]
        if not scores:
            continue
        entry: dict[str, Any] = {"n": len(scores)}
        for metric, attr in (("ACC_CQ", "acc_cq"), ("ACC_CV", "acc_cv"), ("ACC_sim", "acc_sim")):
            rate, n = _rate(getattr(s, attr) for s in scores)
            entry[metric] = rate
            entry[f"{metric}_n"] = n
        report[kind] = entry
    return report


def format_metric_table(report: dict[str, dict[str, Any]]) -> str:
    kinds = [k for k in ("Numerical", "Label") if k in report]
    head = "Metric    " + "".join(f"{k[:3] + '.':>10}" for k in kinds)
    lines = [head]
    for metric in ("ACC_CQ", "ACC_CV", "ACC_sim"):
        cells = []
        for k in kinds:
            v = report[k].get(metric)
            cells.append(f"{'-':>10}" if v is None else f"{100 * v:>10.1f}")
        lines.append(f"{metric:<10}" + "".join(cells))
    return "\n".join(lines)


# -- complexity bins ------------------------------------------------------------

DEFAULT_NODE_EDGES = (4, 7, 10, 13)
DEFAULT_BRANCH_EDGES = (5, 10, 15, 20)


def netlist_complexity(netlist: Netlist) -> tuple[int, int]:
    """(equipotential nodes, branches), not counting ammeters placed in series with components."""
    series = {
        b.name for b in netlist.branches
        if b.kind == "Ammeter" and ({b.n_plus, b.n_minus} & netlist.internal_nodes)
    }
    return equipotential_node_count(netlist), len(netlist.branches) - len(series)


@dataclass
class Bucket:
    label: str
    low: int
    high: int | None
    count: int = 0
    scored: int = 0
    correct: int = 0

    @property
    def rate(self) -> float | None:
        return self.correct / self.scored if self.scored else None


@dataclass
class ComplexityReport:
    by_nodes: list[Bucket] = field(default_factory=list)
    by_branches: list[Bucket] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        def rows(buckets: list[Bucket]) -> list[dict[str, Any]]:
            return [
                {"bucket": b.label, "count": b.count, "scored": b.scored, "acc_sim": b.rate}
                for b in buckets
            ]
        return {"by_nodes": rows(self.by_nodes), "by_branches": rows(self.by_branches)}

    def format_table(self) -> str:
        lines = []
        for title, buckets in (("#Nodes", self.by_nodes), ("#Branches", self.by_branches)):
            lines.append(f"{title:<12}{'count':>8}{'ACC_sim':>10}")
            for b in buckets:
                rate = "-" if b.rate is None else f"{100 * b.rate:.1f}"
                lines.append(f"{b.label:<12}{b.count:>8}{rate:>10}")
        return "\n".join(lines)


def _make_buckets(edges: Sequence[int]) -> list[Bucket]:
    buckets = []
    low = 0
    for hi in edges:
        buckets.append(Bucket(f"{low}-{hi}", low, hi))
        low = hi + 1
    buckets.append(Bucket(f">={low}", low, None))
    return buckets


def _place(buckets: list[Bucket], value: int) -> Bucket:
    for b in buckets:
        if b.high is None or value <= b.high:
            return b
    return buckets[-1]


def complexity_report(
    samples: Sequence[tuple[Netlist | tuple[int, int], PpmScore]],
    node_edges: Sequence[int] = DEFAULT_NODE_EDGES,
    branch_edges: Sequence[int] = DEFAULT_BRANCH_EDGES,
) -> ComplexityReport:
    """ACC_sim rate bucketed by node count and by branch count.

    Buckets are inclusive ``low-high`` ranges closed by an open-ended last one.
    Samples whose ``acc_sim`` is None count toward ``count`` but not the rate.
    """
    if not samples:
        raise ValueError("complexity_report needs at least one sample")
    report = ComplexityReport(_make_buckets(node_edges), _make_buckets(branch_edges))
    for gold, score in samples:
        nodes, branches = gold if isinstance(gold, tuple) else netlist_complexity(gold)
        for bucket in (_place(report.by_nodes, nodes), _place(report.by_branches, branches)):
            bucket.count += 1
            if score.acc_sim is not None:
                bucket.scored += 1
                bucket.correct += int(score.acc_sim)
    return report


# -- mutation harness -----------------------------------------------------------


def mutate_value(deck: SpiceDeck, name: str, factor: Fraction | float) -> SpiceDeck:
    factor = Fraction(factor)
    elements = [replace(e, value=e.value * factor) if e.name == name else e for e in deck.elements]
    return replace(deck, elements=elements)


def mutate_random_resistor(deck: SpiceDeck, rng: np.random.Generator, factor=Fraction(11, 10)) -> tuple[SpiceDeck, str | None]:
    names = [e.name for e in deck.elements if e.kind == "Resistor" and e.value is not None]
    if not names:
        return deck, None
    name = names[int(rng.integers(0, len(names)))]
    return mutate_value(deck, name, factor), name


def degraded_prediction(
    deck: SpiceDeck,
    branch_count: int,
    rng: np.random.Generator,
    probability: Callable[[int], float] | None = None,
    factor=Fraction(2),
) -> SpiceDeck:
    """A synthetic weak perception model: misreads one resistor with a probability that grows with size."""
    if probability is None:
        probability = lambda b: min(1.0, b / 25.0)  # noqa: E731
    if rng.random() < probability(branch_count):
        return mutate_random_resistor(deck, rng, factor)[0]
    return deck
