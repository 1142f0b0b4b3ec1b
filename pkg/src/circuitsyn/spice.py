"""A closed SPICE subset for DC operating-point decks.

See ``docs/spice-subset.md`` for the grammar. Values are kept as exact
:class:`~fractions.Fraction` objects in SI units so that emit/parse
round-trips are byte-stable.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Mapping, Protocol

from .netlist import AMMETER_PREFIX, KIND_PREFIX, REF, Branch, MeasurementSpec, Netlist

EMPTY = "<Empty>"

LETTER_KIND = {"R": "Resistor", "V": "VSource", "I": "ISource", "E": "VCVS", "G": "VCCS", "H": "CCVS", "F": "CCCS"}
ELEMENT_LETTERS = tuple(LETTER_KIND)
VOLTAGE_DEFINED = ("VSource", "Ammeter", "VCVS", "CCVS")

# longest match first so "meg" wins over "m"
_SUFFIXES = (
    ("meg", Fraction(10**6)),
    ("t", Fraction(10**12)),
    ("g", Fraction(10**9)),
    ("k", Fraction(10**3)),
    ("m", Fraction(1, 10**3)),
    ("u", Fraction(1, 10**6)),
    ("n", Fraction(1, 10**9)),
    ("p", Fraction(1, 10**12)),
    ("f", Fraction(1, 10**15)),
)
_EMIT_SCALES = (
    ("meg", Fraction(10**6)),
    ("k", Fraction(10**3)),
    ("", Fraction(1)),
    ("m", Fraction(1, 10**3)),
    ("u", Fraction(1, 10**6)),
    ("n", Fraction(1, 10**9)),
    ("p", Fraction(1, 10**12)),
)
_NUMBER_RE = re.compile(r"([+-]?(?:\d+\.?\d*|\.\d+)(?:e[+-]?\d+)?)(meg|[tgkmunpf])?(ohms?|v|a|s)?", re.IGNORECASE)
_NAME_RE = re.compile(r"[A-Za-z0-9_]+")
_PROBE_RE = re.compile(
    r"(?:(?P<label>[A-Za-z_][A-Za-z0-9_]*)=)?(?P<kind>[VvIi])\((?P<args>[^()]*)\)$"
)


class SpiceError(ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class SpiceSyntaxError(SpiceError):
    pass


class UnknownElementKind(SpiceError):
    pass


class DanglingReference(SpiceError):
    pass


def parse_value(token: str) -> Fraction:
    """``"5k"`` -> 5000, ``"10m"`` -> 1/100, ``"2.2meg"`` -> 2200000."""
    m = _NUMBER_RE.fullmatch(token)
    if m is None:
        raise ValueError(f"not a SPICE number: {token!r}")
    number, suffix, _unit = m.groups()
    value = Fraction(number)
    if suffix:
        value *= dict(_SUFFIXES)[suffix.lower()]
    return value


def format_value(value: Fraction) -> str:
    value = Fraction(value)
    if value == 0:
        return "0"
    for suffix, scale in _EMIT_SCALES:
        mantissa = value / scale
        if mantissa.denominator == 1:
            return f"{mantissa.numerator}{suffix}"
    return _exact_decimal(value)


def _exact_decimal(value: Fraction) -> str:
    den = value.denominator
    k = 0
    while den % 10**k and k < 30:
        k += 1
    if (10**k) % den:
        return repr(float(value))
    scaled = abs(value.numerator) * (10**k // den)
    digits = str(scaled).rjust(k + 1, "0")
    sign = "-" if value < 0 else ""
    return f"{sign}{digits[:-k]}.{digits[-k:]}".rstrip("0").rstrip(".")


@dataclass(frozen=True)
class ElementCard:
    name: str
    n_plus: str
    n_minus: str
    value: Fraction | None  # None is the <Empty> token
    control: tuple[str, str] | str | None = None

    @property
    def letter(self) -> str:
        return self.name[0].upper()

    @property
    def kind(self) -> str:
        if self.name.startswith(AMMETER_PREFIX) and self.letter == "V":
            return "Ammeter"
        return LETTER_KIND[self.letter]

    def to_text(self) -> str:
        parts = [self.name, self.n_plus, self.n_minus]
        if isinstance(self.control, tuple):
            parts.extend(self.control)
        elif isinstance(self.control, str):
            parts.append(self.control)
        parts.append(EMPTY if self.value is None else format_value(self.value))
        return " ".join(parts)


@dataclass(frozen=True)
class Probe:
    kind: str  # "V" or "I"
    nodes: tuple[str, str] | None = None
    branch: str | None = None
    label: str | None = None

    @property
    def expr(self) -> str:
        if self.kind == "I":
            return f"I({self.branch})"
        a, b = self.nodes
        return f"V({a})" if b == REF else f"V({a},{b})"

    @property
    def key(self) -> str:
        """Result dictionary key: the label, or the probe expression when unlabeled."""
        return self.label if self.label is not None else self.expr

    def to_text(self) -> str:
        if self.label is None or self.label == self.expr:
            return self.expr
        return f"{self.label}={self.expr}"


@dataclass(frozen=True)
class OpCard:
    def to_text(self) -> str:
        return ".OP"


@dataclass(frozen=True)
class PrintCard:
    probes: tuple[Probe, ...]

    def to_text(self) -> str:
        return ".PRINT " + " ".join(p.to_text() for p in self.probes)


@dataclass
class SpiceDeck:
    title: str = ""
    elements: list[ElementCard] = field(default_factory=list)
    controls: list[OpCard | PrintCard] = field(default_factory=list)
    end_marker: bool = True

    @property
    def probes(self) -> list[Probe]:
        return [p for c in self.controls if isinstance(c, PrintCard) for p in c.probes]

    @property
    def is_complete(self) -> bool:
        return all(e.value is not None for e in self.elements)

    @property
    def empty_names(self) -> list[str]:
        return [e.name for e in self.elements if e.value is None]

    def element(self, name: str) -> ElementCard:
        for e in self.elements:
            if e.name == name:
                return e
        raise KeyError(name)

    def node_set(self) -> set[str]:
        nodes = set()
        for e in self.elements:
            nodes.update((e.n_plus, e.n_minus))
        return nodes

    def to_text(self) -> str:
        lines = []
        if self.title:
            lines.append(f"* {self.title}")
        lines.extend(e.to_text() for e in self.elements)
        lines.extend(c.to_text() for c in self.controls)
        if self.end_marker:
            lines.append(".END")
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return self.to_text()


# -- emit -----------------------------------------------------------------------


def emit_spice(netlist: Netlist, title: str = "lprc") -> SpiceDeck:
    """One card per branch in netlist order, ``.OP``, then one ``.PRINT`` per measurement."""
    elements = [
        ElementCard(b.name, b.n_plus, b.n_minus, b.value, b.control)
        for b in netlist.branches
    ]
    controls: list[OpCard | PrintCard] = [OpCard()]
    for mm in netlist.measurements:
        if mm.kind == "VoltageObs":
            probe = Probe("V", nodes=mm.nodes, label=mm.label)
        else:
            probe = Probe("I", branch=mm.branch, label=mm.label)
        controls.append(PrintCard((probe,)))
    return SpiceDeck(title, elements, controls, True)


def deck_to_netlist(deck: SpiceDeck, validate: bool = False) -> Netlist:
    branches = []
    for e in deck.elements:
        kind = e.kind
        if kind == "Ammeter":
            value = Fraction(0) if e.value is None else e.value
        else:
            value = e.value
        if KIND_PREFIX[kind] != e.letter:
            raise ValueError(f"{e.name}: letter does not match kind {kind}")
        branches.append(Branch(e.name, kind, e.n_plus, e.n_minus, value, e.control))
    measurements = []
    for p in deck.probes:
        if p.kind == "V":
            measurements.append(MeasurementSpec(p.key, "VoltageObs", nodes=p.nodes))
        else:
            measurements.append(MeasurementSpec(p.key, "CurrentObs", branch=p.branch))
    net = Netlist(deck.node_set(), branches, measurements)
    if validate:
        net.validate()
    return net


# -- parse ----------------------------------------------------------------------


def _node(token: str) -> str:
    if not _NAME_RE.fullmatch(token):
        raise ValueError(f"bad node name {token!r}")
    return REF if token.lower() == "gnd" else token


def parse_spice(text: str) -> SpiceDeck:
    """Parse deck text; raises a :class:`SpiceError` subclass carrying the line number."""
    deck = SpiceDeck(title="", end_marker=False)
    seen_first = False
    op_count = 0
    ended = False
    refs: list[tuple[int, str, str]] = []  # (line, kind, target)
    names: set[str] = set()
    labels: set[str] = set()

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if ended:
            raise SpiceSyntaxError(lineno, "content after .END")
        if line.startswith("*"):
            if not seen_first:
                deck.title = line[1:].strip()
            seen_first = True
            continue
        seen_first = True
        tokens = line.split()
        head = tokens[0]
        if head.startswith("."):
            keyword = head.lower()
            if keyword == ".op":
                if len(tokens) != 1:
                    raise SpiceSyntaxError(lineno, ".OP takes no arguments")
                op_count += 1
                deck.controls.append(OpCard())
            elif keyword == ".print":
                args = tokens[1:]
                if args and args[0].lower() in ("dc", "op"):
                    args = args[1:]
                if not args:
                    raise SpiceSyntaxError(lineno, ".PRINT needs at least one probe")
                probes = []
                for tok in args:
                    probe = _parse_probe(tok, lineno)
                    if probe.key in labels:
                        raise SpiceSyntaxError(lineno, f"duplicate probe label {probe.key!r}")
                    labels.add(probe.key)
                    if probe.kind == "V":
                        refs.extend((lineno, "node", n) for n in probe.nodes)
                    else:
                        refs.append((lineno, "element", probe.branch))
                    probes.append(probe)
                deck.controls.append(PrintCard(tuple(probes)))
            elif keyword == ".end":
                deck.end_marker = True
                ended = True
            else:
                raise SpiceSyntaxError(lineno, f"unsupported control card {head}")
            continue

        letter = head[0].upper()
        if letter not in LETTER_KIND:
            raise UnknownElementKind(lineno, f"unknown element kind {head[0]!r}")
        if not _NAME_RE.fullmatch(head):
            raise SpiceSyntaxError(lineno, f"bad element name {head!r}")
        if head in names:
            raise SpiceSyntaxError(lineno, f"duplicate element name {head!r}")
        args = tokens[1:]
        if letter in "VI" and len(args) == 4 and args[2].lower() == "dc":
            args = args[:2] + args[3:]
        arity = {"R": 3, "V": 3, "I": 3, "E": 5, "G": 5, "H": 4, "F": 4}[letter]
        if len(args) != arity:
            raise SpiceSyntaxError(lineno, f"{head}: expected {arity} fields after the name, got {len(args)}")
        try:
            n_plus, n_minus = _node(args[0]), _node(args[1])
            control: tuple[str, str] | str | None = None
            if letter in "EG":
                control = (_node(args[2]), _node(args[3]))
            elif letter in "HF":
                if not _NAME_RE.fullmatch(args[2]):
                    raise ValueError(f"bad sensing element name {args[2]!r}")
                control = args[2]
                refs.append((lineno, "element", args[2]))
            value_tok = args[-1]
            value = None if value_tok == EMPTY else parse_value(value_tok)
        except ValueError as exc:
            raise SpiceSyntaxError(lineno, str(exc)) from None
        if letter == "R" and value is not None and value <= 0:
            raise SpiceSyntaxError(lineno, f"{head}: resistance must be positive")
        if isinstance(control, tuple):
            refs.extend((lineno, "node", n) for n in control)
        names.add(head)
        deck.elements.append(ElementCard(head, n_plus, n_minus, value, control))

    if op_count != 1:
        raise SpiceSyntaxError(max(1, len(text.splitlines())), f"expected exactly one .OP card, found {op_count}")
    if not deck.elements:
        raise SpiceSyntaxError(1, "deck has no elements")
    nodes = deck.node_set() | {REF}
    for lineno, kind, target in refs:
        if kind == "node" and target not in nodes:
            raise DanglingReference(lineno, f"node {target!r} is not connected to any element")
        if kind == "element" and target not in names:
            raise DanglingReference(lineno, f"element {target!r} is not declared")
    return deck


def _parse_probe(token: str, lineno: int) -> Probe:
    m = _PROBE_RE.fullmatch(token)
    if m is None:
        raise SpiceSyntaxError(lineno, f"bad probe {token!r}")
    args = [a.strip() for a in m.group("args").split(",")]
    label = m.group("label")
    try:
        if m.group("kind").upper() == "V":
            if len(args) not in (1, 2):
                raise ValueError("V() takes one or two nodes")
            a = _node(args[0])
            b = _node(args[1]) if len(args) == 2 else REF
            return Probe("V", nodes=(a, b), label=label)
        if len(args) != 1 or not _NAME_RE.fullmatch(args[0]):
            raise ValueError("I() takes one element name")
        return Probe("I", branch=args[0], label=label)
    except ValueError as exc:
        raise SpiceSyntaxError(lineno, str(exc)) from None


# -- refine ---------------------------------------------------------------------

_UNIT_BASES = {"Ω": "Ohm", "ohm": "Ohm", "ohms": "Ohm", "Ohm": "Ohm", "Ohms": "Ohm", "V": "V", "A": "A", "S": "S"}
_UNIT_PREFIX = {"": Fraction(1), "k": Fraction(1000), "M": Fraction(10**6), "m": Fraction(1, 1000),
                "u": Fraction(1, 10**6), "µ": Fraction(1, 10**6)}
_VALUE_MAP_RE = re.compile(
    r"\b([A-Za-z][A-Za-z0-9_]*)\s*=\s*([+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)\s*"
    r"(?:(k|M|m|u|µ)?(Ω|ohms?|Ohms?|V|A|S)(?![A-Za-z0-9]))?"
)


def unit_scale(unit: str) -> Fraction:
    """Scale factor for units like ``"kOhm"``, ``"kΩ"``, ``"mA"``, ``"gain"`` or ``""``."""
    from .layout import UNIT_SCALE

    if unit in UNIT_SCALE:
        return UNIT_SCALE[unit]
    if unit == "":
        return Fraction(1)
    for base in sorted(_UNIT_BASES, key=len, reverse=True):
        if unit.endswith(base):
            prefix = unit[: -len(base)]
            if prefix in _UNIT_PREFIX:
                return _UNIT_PREFIX[prefix]
    raise ValueError(f"unknown unit {unit!r}")


def extract_value_map(text: str) -> dict[str, tuple[Fraction, str]]:
    """Pull ``LABEL = NUMBER UNIT`` assignments out of question text."""
    out: dict[str, tuple[Fraction, str]] = {}
    for m in _VALUE_MAP_RE.finditer(text):
        label, number, prefix, base = m.groups()
        unit = (prefix or "") + (base or "")
        out.setdefault(label, (Fraction(number), unit))
    return out


def _si(entry: Any) -> Fraction:
    if isinstance(entry, tuple):
        magnitude, unit = entry
        return Fraction(magnitude) * unit_scale(unit)
    return Fraction(entry)


class TextClient(Protocol):
    def complete(self, prompt: str, image: str | None = None) -> str: ...


def refine_deck(
    deck: SpiceDeck,
    value_map: Mapping[str, Any],
    client: TextClient | None = None,
    question: str = "",
    transcript: list[dict[str, Any]] | None = None,
) -> SpiceDeck:
    """Fill ``<Empty>`` values from ``value_map``, then from ``client`` if given.

    Whatever is still empty stays empty; check ``deck.is_complete``.
    """
    if deck.is_complete:
        return deck
    elements = [
        replace(e, value=_si(value_map[e.name])) if e.value is None and e.name in value_map else e
        for e in deck.elements
    ]
    refined = replace(deck, elements=elements)
    if refined.is_complete or client is None:
        return refined

    from .prompts import render

    prompt = render("prompt_refine", question=question, sl=refined.to_text())
    reply = client.complete(prompt)
    if transcript is not None:
        transcript.append({"step": "refine", "prompt": prompt, "response": reply})
    try:
        suggested = parse_spice(strip_code_fences(reply))
    except SpiceError:
        return refined
    proposals = {e.name: e.value for e in suggested.elements if e.value is not None}
    elements = [
        replace(e, value=proposals[e.name]) if e.value is None and e.name in proposals else e
        for e in refined.elements
    ]
    return replace(refined, elements=elements)


def strip_code_fences(text: str) -> str:
    m = re.search(r"```(?:[A-Za-z]*)\n(.*?)```", text, re.DOTALL)
    return m.group(1) if m else text
