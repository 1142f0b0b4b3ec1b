"""Perceive -> refine -> simulate -> reason, over pluggable clients.

Clients are duck-typed:

* a perception client has ``perceive(problem) -> str`` returning SPICE text;
* a reasoning client has ``complete(prompt, image=None) -> str``.

Remote clients speak a minimal chat-style JSON contract: the request is
``{"model": ..., "messages": [{"role": "user", "content": ..., "image": ...}]}``
and the response is ``{"content": ...}``.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .dataset import DatasetRecord
from .layout import CONTROLLED_KINDS, DiagramLayout
from .netlist import extract_netlist
from .prompts import has_unfilled, render
from .sim import SimulationResult, check_valid, simulate
from .spice import SpiceDeck, SpiceError, emit_spice, extract_value_map, parse_spice, refine_deck, strip_code_fences

log = logging.getLogger(__name__)

MLLM_ENDPOINT_ENV = "MLLM_ENDPOINT"
MLLM_API_KEY_ENV = "MLLM_API_KEY"
PPM_ENDPOINT_ENV = "PPM_ENDPOINT"
PPM_API_KEY_ENV = "PPM_API_KEY"
DIAGRAM_KINDS = ("tikz", "image", "layout")


class PipelineError(RuntimeError):
    pass


class PerceptionFailed(PipelineError):
    def __init__(self, message: str, transcript: list[dict[str, Any]]):
        super().__init__(message)
        self.transcript = transcript


class TransportError(PipelineError):
    pass


class ClientConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Diagram:
    kind: str  # tikz | image | layout
    value: Any

    def __post_init__(self):
        if self.kind not in DIAGRAM_KINDS:
            raise ValueError(f"diagram kind must be one of {DIAGRAM_KINDS}, got {self.kind!r}")


@dataclass
class Problem:
    id: str
    question: str
    diagram: Diagram
    gold_answer: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "diagram": {"kind": self.diagram.kind, "value": self.diagram.value},
            "gold_answer": self.gold_answer,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Problem:
        diagram = d["diagram"]
        if not isinstance(diagram, dict) or len({"kind", "value"} & set(diagram)) != 2:
            raise ValueError(f"problem {d.get('id')!r}: diagram must be {{kind, value}}")
        return cls(str(d["id"]), d["question"], Diagram(diagram["kind"], diagram["value"]), d.get("gold_answer"))


def load_problems(path: str | Path) -> list[Problem]:
    problems = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    problems.append(Problem.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from None
    return problems


def write_problems(problems: Iterable[Problem], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


_UNIT_TEXT = {"Ohm": "Ω", "kOhm": "kΩ", "V": "V", "A": "A", "mA": "mA", "gain": ""}


def question_for_layout(layout: DiagramLayout) -> str:
    """A templated question: Label circuits state component values in the text."""
    targets = [e.measurement.label for e in layout.edges if e.measurement is not None]
    parts = ["In the circuit shown,"]
    if layout.circuit_kind == "Label":
        given = []
        for e in layout.edges:
            if e.is_component and e.value is not None:
                magnitude, unit = e.value
                given.append(f"{e.label} = {magnitude} {_UNIT_TEXT[unit]}".rstrip())
        parts.append(", ".join(given) + ".")
    ctrl = [e for e in layout.edges if e.kind in CONTROLLED_KINDS]
    if ctrl:
        parts.append("Controlled sources are proportional to the labeled measurement they reference.")
    parts.append(f"Find {', '.join(targets)}.")
    return " ".join(parts)


def problem_from_record(record: DatasetRecord) -> Problem:
    layout = record.diagram_layout()
    return Problem(record.id, question_for_layout(layout), Diagram("layout", record.layout))


# -- clients --------------------------------------------------------------------


class PerceptionClient(Protocol):
    def perceive(self, problem: Problem) -> str: ...


class ReasoningClient(Protocol):
    def complete(self, prompt: str, image: str | None = None) -> str: ...


class OracleClient:
    """Returns the gold deck: from an explicit id->text map, else derived from a layout diagram."""

    def __init__(self, gold: Mapping[str, str] | None = None):
        self.gold = dict(gold or {})

    def perceive(self, problem: Problem) -> str:
        if problem.id in self.gold:
            return self.gold[problem.id]
        if problem.diagram.kind == "layout":
            layout = DiagramLayout.from_dict(problem.diagram.value)
            return emit_spice(extract_netlist(layout)).to_text()
        raise PipelineError(f"oracle has no gold deck for problem {problem.id!r}")


class FileClient:
    """Pre-recorded perception outputs from JSONL lines ``{"id": ..., "spice": ...}``."""

    def __init__(self, source: str | Path | Mapping[str, str]):
        if isinstance(source, Mapping):
            self.outputs = dict(source)
        else:
            self.outputs = {}
            with open(source, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        d = json.loads(line)
                        self.outputs[str(d["id"])] = d.get("spice", d.get("output", ""))

    def perceive(self, problem: Problem) -> str:
        try:
            return self.outputs[problem.id]
        except KeyError:
            raise PipelineError(f"no recorded output for problem {problem.id!r}") from None


class EchoClient:
    """Offline reasoning client: answers with the prompt it was given."""

    def complete(self, prompt: str, image: str | None = None) -> str:
        return prompt


class RemoteClient:
    """HTTP JSON chat client; usable for both perception and reasoning."""

    def __init__(self, endpoint: str, api_key: str | None = None, model: str = "default", timeout: float = 120.0,
                 transport: httpx.BaseTransport | None = None):
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.transport = transport  # injectable for tests; None means real network

    @classmethod
    def from_env(cls, endpoint_var: str = MLLM_ENDPOINT_ENV, key_var: str = MLLM_API_KEY_ENV, **kw) -> RemoteClient:
        endpoint = os.environ.get(endpoint_var)
        if not endpoint:
            raise ClientConfigError(f"remote client needs the {endpoint_var} environment variable")
        return cls(endpoint, os.environ.get(key_var), **kw)

    def _post(self, message: dict[str, Any]) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"model": self.model, "messages": [message]}
        try:
            # a fresh client per call keeps instances safe to share across threads
            with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
                resp = client.post(self.endpoint, json=payload, headers=headers)
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.endpoint}: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"{self.endpoint}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise PipelineError(f"{self.endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return str(resp.json()["content"])
        except (ValueError, KeyError, TypeError) as exc:
            raise PipelineError(f"{self.endpoint}: malformed response") from exc

    def complete(self, prompt: str, image: str | None = None) -> str:
        message: dict[str, Any] = {"role": "user", "content": prompt}
        if image is not None:
            message["image"] = image
        return self._post(message)

    def perceive(self, problem: Problem) -> str:
        diagram = problem.diagram
        image = diagram.value if isinstance(diagram.value, str) else json.dumps(diagram.value, sort_keys=True)
        return self._post({
            "role": "user",
            "content": "Convert this circuit diagram into a SPICE netlist.",
            "image": image,
            "image_kind": diagram.kind,
        })


def call_with_retries(
    fn: Callable[[], str],
    attempts: int = 3,
    base_delay: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Retry transport errors with exponential backoff (base, 2*base, ...)."""
    for attempt in range(attempts):
        try:
            return fn()
        except TransportError:
            if attempt == attempts - 1:
                raise
            sleep(base_delay * 2**attempt)
    raise AssertionError("unreachable")


class _Retrying:
    def __init__(self, client: ReasoningClient, sleep: Callable[[float], None] = time.sleep):
        self.client = client
        self.sleep = sleep

    def complete(self, prompt: str, image: str | None = None) -> str:
        return call_with_retries(lambda: self.client.complete(prompt, image), sleep=self.sleep)


# -- inference ------------------------------------------------------------------


@dataclass
class CosOutcome:
    deck: SpiceDeck
    result: SimulationResult
    transcript: list[dict[str, Any]] = field(default_factory=list)


def _image_ref(problem: Problem) -> str | None:
    return problem.diagram.value if problem.diagram.kind == "image" else None


def chain_of_simulation(
    problem: Problem,
    ppm: PerceptionClient,
    mllm: ReasoningClient | None,
    sleep: Callable[[float], None] = time.sleep,
) -> CosOutcome:
    """Perceive the diagram as SPICE, fill ``<Empty>`` values, simulate."""
    transcript: list[dict[str, Any]] = []
    deck = None
    for attempt in range(2):
        raw = call_with_retries(lambda: ppm.perceive(problem), sleep=sleep)
        entry: dict[str, Any] = {"step": "perceive", "attempt": attempt + 1, "response": raw}
        transcript.append(entry)
        try:
            deck = parse_spice(strip_code_fences(raw))
            break
        except SpiceError as exc:
            entry["parse_error"] = str(exc)
    if deck is None:
        raise PerceptionFailed(f"perception output for {problem.id!r} did not parse twice", transcript)

    if not deck.is_complete:
        value_map = extract_value_map(problem.question)
        client = _Retrying(mllm, sleep) if mllm is not None else None
        before = deck.empty_names
        deck = refine_deck(deck, value_map, client, problem.question, transcript)
        transcript.append({
            "step": "refine_summary",
            "empty_before": before,
            "empty_after": deck.empty_names,
            "from_text": sorted(set(before) & set(value_map)),
        })

    result = simulate(deck)
    transcript.append({"step": "simulate", "result": result.to_dict()})
    return CosOutcome(deck, result, transcript)


def select_branch(result: SimulationResult) -> str:
    return "sar" if check_valid(result) else "sl"


def simulation_aided_reasoning(
    problem: Problem,
    deck: SpiceDeck,
    result: SimulationResult,
    mllm: ReasoningClient,
    transcript: list[dict[str, Any]] | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    branch = select_branch(result)
    if branch == "sar":
        prompt = render("prompt_sar", question=problem.question, sl=deck.to_text(), result=result.values_text())
    else:
        prompt = render("prompt_sl", question=problem.question, sl=deck.to_text())
    if has_unfilled(prompt):
        raise PipelineError("prompt still has unfilled placeholders")
    answer = call_with_retries(lambda: mllm.complete(prompt, _image_ref(problem)), sleep=sleep)
    if transcript is not None:
        transcript.append({"step": "reason", "branch": branch, "prompt": prompt, "response": answer})
    return answer


def solve_problem(problem: Problem, ppm: PerceptionClient, mllm: ReasoningClient,
                  sleep: Callable[[float], None] = time.sleep) -> dict[str, Any]:
    """One problem end to end; failures become data, never exceptions."""
    out: dict[str, Any] = {"id": problem.id}
    try:
        cos = chain_of_simulation(problem, ppm, mllm, sleep)
    except PerceptionFailed as exc:
        out.update(status="perception_failed", error=str(exc), transcript=exc.transcript)
        return out
    except Exception as exc:  # noqa: BLE001 - batch must not abort on one problem
        out.update(status="error", error=f"{type(exc).__name__}: {exc}", transcript=[])
        return out
    try:
        answer = simulation_aided_reasoning(problem, cos.deck, cos.result, mllm, cos.transcript, sleep)
    except Exception as exc:  # noqa: BLE001
        out.update(status="error", error=f"{type(exc).__name__}: {exc}", sl=cos.deck.to_text(),
                   result=cos.result.to_dict(), transcript=cos.transcript)
        return out
    out.update(
        status="ok",
        branch=select_branch(cos.result),
        valid=check_valid(cos.result),
        answer=answer,
        gold_answer=problem.gold_answer,
        sl=cos.deck.to_text(),
        result=cos.result.to_dict(),
        transcript=cos.transcript,
    )
    return out


@dataclass
class BatchReport:
    total: int = 0
    skipped: int = 0
    processed: int = 0
    ok: int = 0
    failed: int = 0
    sar: int = 0
    sl: int = 0

    def to_dict(self) -> dict[str, int]:
        return dict(self.__dict__)


def completed_ids(path: str | Path) -> set[str]:
    done: set[str] = set()
    path = Path(path)
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                done.add(str(json.loads(line)["id"]))
            except (json.JSONDecodeError, KeyError, TypeError):
                continue  # torn trailing line from an interrupted run
    return done


def run_batch(
    problems: Sequence[Problem],
    ppm: PerceptionClient,
    mllm: ReasoningClient,
    out_path: str | Path,
    jobs: int = 1,
    resume: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> BatchReport:
    """Solve every problem not already in ``out_path``; append one JSON line per problem."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    done = completed_ids(out_path) if resume else set()
    if not resume and out_path.exists():
        out_path.unlink()
    report = BatchReport(total=len(problems))
    todo = [p for p in problems if p.id not in done]
    report.skipped = len(problems) - len(todo)

    if out_path.exists() and out_path.stat().st_size:
        with open(out_path, "rb") as fh:
            fh.seek(-1, os.SEEK_END)
            needs_newline = fh.read(1) != b"\n"
        if needs_newline:
            with open(out_path, "a", encoding="utf-8") as fh:
                fh.write("\n")

    lock = threading.Lock()

    def work(problem: Problem) -> dict[str, Any]:
        return solve_problem(problem, ppm, mllm, sleep)

    with open(out_path, "a", encoding="utf-8") as fh, ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for row in pool.map(work, todo):
            line = json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n"
            with lock:
                fh.write(line)
                fh.flush()
            report.processed += 1
            if row["status"] == "ok":
                report.ok += 1
                report.sar += row["branch"] == "sar"
                report.sl += row["branch"] == "sl"
            else:
                report.failed += 1
    return report
