"""Paired diagram/SPICE dataset: generation, splits, persistence.

Layout on disk::

    out_dir/
      manifest.json
      train.jsonl  val.jsonl  test.jsonl

Each JSONL line is one :class:`DatasetRecord`. Files carry no timestamps so
identical (config, seed, n) runs produce identical bytes.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from .layout import DiagramLayout, SamplerConfig, layout_counts, layout_stats, sample_layout_ex, sample_rng
from .netlist import Netlist, extract_netlist
from .sim import check_valid, simulate
from .spice import SpiceDeck, emit_spice, parse_spice, refine_deck
from .tikz import render_tikz

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"
_SPLIT_SALT = 0x53504C54


class DatasetError(RuntimeError):
    pass


class SchemaMismatch(DatasetError):
    pass


class CorruptRecord(DatasetError):
    def __init__(self, path: Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


@dataclass
class DatasetRecord:
    id: str
    index: int
    split: str
    circuit_kind: str
    layout: dict[str, Any]
    tikz: str
    spice: str
    sim_result: dict[str, Any]
    simulatable: bool
    seed: int
    config_hash: str
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DatasetRecord:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def diagram_layout(self) -> DiagramLayout:
        return DiagramLayout.from_dict(self.layout)

    def netlist(self) -> Netlist:
        return extract_netlist(self.diagram_layout())

    def deck(self) -> SpiceDeck:
        return parse_spice(self.spice)

    def resolved_deck(self) -> SpiceDeck:
        """Gold deck with Label-type ``<Empty>`` values filled from the layout."""
        return refine_deck(self.deck(), self.diagram_layout().component_values())


def parse_split_ratio(text: str | Sequence[Any]) -> tuple[Fraction, ...]:
    """``"8:1:1"`` (parts summing to 10) or ``"0.8:0.1:0.1"`` (summing to 1)."""
    parts = text.split(":") if isinstance(text, str) else list(text)
    if len(parts) != len(SPLITS):
        raise ValueError(f"split ratio needs {len(SPLITS)} parts, got {len(parts)}")
    try:
        fracs = [Fraction(str(p)).limit_denominator(10**6) for p in parts]
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"bad split ratio {text!r}") from exc
    if any(f < 0 for f in fracs):
        raise ValueError("split ratios must be non-negative")
    total = sum(fracs)
    if total == 10:
        fracs = [f / 10 for f in fracs]
    elif total != 1:
        raise ValueError(f"split ratio {text!r} must sum to 1 (or to 10 as tenths), got {total}")
    return tuple(fracs)


def split_of(index: int, ratio: Sequence[Fraction], seed: int) -> str:
    """Split membership as a pure function of (index, ratio, seed).

    Indices are grouped in cycles of T slots, T the common denominator of
    the ratios; each cycle holds exactly ratio*T slots per split in a
    seeded order. Counts are exact whenever n is a multiple of T.
    """
    period = math.lcm(*(f.denominator for f in ratio))
    pattern = [name for name, f in zip(SPLITS, ratio) for _ in range(int(f * period))]
    cycle, slot = divmod(index, period)
    order = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_SALT, cycle])).permutation(period)
    return pattern[int(order[slot])]


def make_record(config: SamplerConfig, seed: int, index: int, split: str) -> tuple[DatasetRecord, int]:
    outcome = sample_layout_ex(config, sample_rng(seed, index))
    layout = outcome.layout
    gold = emit_spice(extract_netlist(layout))
    resolved = refine_deck(gold, layout.component_values())
    result = simulate(resolved)
    record = DatasetRecord(
        id=f"lprc-{index:06d}",
        index=index,
        split=split,
        circuit_kind=layout.circuit_kind,
        layout=layout.to_dict(),
        tikz=render_tikz(layout).source_text,
        spice=gold.to_text(),
        sim_result=result.to_dict(),
        simulatable=check_valid(result),
        seed=seed,
        config_hash=config.config_hash(),
    )
    return record, outcome.attempts


def _make_chunk(args: tuple[dict[str, Any], int, list[tuple[int, str]]]) -> list[tuple[str, int]]:
    cfg_dict, seed, jobs = args
    cfg = SamplerConfig.from_dict(cfg_dict)
    out = []
    for index, split in jobs:
        rec, attempts = make_record(cfg, seed, index, split)
        out.append((rec.to_json(), attempts))
    return out


def generate_dataset(
    config: SamplerConfig,
    n: int,
    split_ratio: str | Sequence[Any] = (Fraction(8, 10), Fraction(1, 10), Fraction(1, 10)),
    out_dir: str | Path = "dataset",
    seed: int | None = None,
    jobs: int = 1,
) -> dict[str, Any]:
    """Generate ``n`` records into ``out_dir`` and return the manifest."""
    config.validate()
    ratio = parse_split_ratio(split_ratio)
    if n < 1:
        raise ValueError("n must be positive")
    seed = config.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    assignments = [(i, split_of(i, ratio, seed)) for i in range(n)]
    if jobs > 1:
        chunk = max(1, math.ceil(n / (jobs * 4)))
        pieces = [assignments[i:i + chunk] for i in range(0, n, chunk)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = [r for part in pool.map(_make_chunk, [(config.to_dict(), seed, p) for p in pieces]) for r in part]
    else:
        results = _make_chunk((config.to_dict(), seed, assignments))

    by_split: dict[str, list[str]] = {s: [] for s in SPLITS}
    layouts = []
    attempts_total = 0
    simulatable = {s: 0 for s in SPLITS}
    for (index, split), (line, attempts) in zip(assignments, results):
        by_split[split].append(line)
        attempts_total += attempts
        d = json.loads(line)
        simulatable[split] += int(d["simulatable"])
        layouts.append(DiagramLayout.from_dict(d["layout"]))

    for split in SPLITS:
        with open(out_dir / f"{split}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for line in by_split[split]:
                fh.write(line + "\n")

    stats = layout_stats(layouts)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "n": n,
        "split_ratio": [str(f) for f in ratio],
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "splits": {s: {"count": len(by_split[s]), "simulatable": simulatable[s]} for s in SPLITS},
        "raw_attempts": attempts_total,
        "kept": n,
        "non_simulatable": n - sum(simulatable.values()),
        "stats": stats.to_dict(),
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d records to %s (%s)", n, out_dir, {s: len(v) for s, v in by_split.items()})
    return manifest


def load_manifest(directory: str | Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"{path}: schema_version {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return manifest


def load_split(directory: str | Path, split: str) -> Iterator[DatasetRecord]:
    """Stream records of one split, validating each line."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    load_manifest(directory)
    path = Path(directory) / f"{split}.jsonl"
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecord(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(data, dict):
                raise CorruptRecord(path, lineno, "record is not an object")
            if data.get("schema_version") != SCHEMA_VERSION:
                raise SchemaMismatch(f"{path}:{lineno}: schema_version {data.get('schema_version')!r}")
            missing = set(DatasetRecord.__dataclass_fields__) - set(data)
            if missing:
                raise CorruptRecord(path, lineno, f"missing fields {sorted(missing)}")
            yield DatasetRecord.from_dict(data)


def split_layout_counts(records: Sequence[DatasetRecord]) -> list[dict[str, int]]:
    return [layout_counts(r.diagram_layout()) for r in records]
