"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence


from . import __version__
from .dataset import SPLITS, DatasetError, generate_dataset, load_split, parse_split_ratio
from .eval import (
    DEFAULT_BRANCH_EDGES,
    DEFAULT_NODE_EDGES,
    aggregate_scores,
    complexity_report,
    degraded_prediction,
    format_metric_table,
    netlist_complexity,
    score_sample,
)
from .layout import ConfigError, RetryExhausted, load_config, sample_rng
from .pipeline import (
    PPM_API_KEY_ENV,
    PPM_ENDPOINT_ENV,
    ClientConfigError,
    EchoClient,
    FileClient,
    OracleClient,
    RemoteClient,
    load_problems,
    problem_from_record,
    run_batch,
    write_problems,
)
from .sim import SimulationResult, simulate

log = logging.getLogger("circuitsyn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _edges(text: str) -> tuple[int, ...]:
    try:
        edges = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bucket edges must be comma-separated integers, got {text!r}") from None
    if list(edges) != sorted(set(edges)):
        raise argparse.ArgumentTypeError("bucket edges must be strictly increasing")
    return edges


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="dataset / sampling seed")
    common.add_argument("--config", type=Path, default=None, help="sampler config JSON")
    common.add_argument("--out", type=Path, default=None, help="output path")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--jobs", type=int, default=1, help="worker parallelism cap")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")

    parser = argparse.ArgumentParser(prog="circuitsyn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"circuitsyn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a paired diagram/SPICE dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--split", default="8:1:1", help="train:val:test, tenths or fractions")

    p = sub.add_parser("simulate", parents=[common], help="DC operating point of a deck")
    p.add_argument("--deck", type=Path, required=True)

    p = sub.add_parser("eval-ppm", parents=[common], help="score perception outputs against a dataset split")
    p.add_argument("--gold", type=Path, required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--pred", type=Path, required=True, help="dataset-style directory or JSONL of {id, spice}")
    p.add_argument("--scores", type=Path, default=None, help="write per-sample scores as JSONL")
    p.add_argument("--node-bins", type=_edges, default=DEFAULT_NODE_EDGES)
    p.add_argument("--branch-bins", type=_edges, default=DEFAULT_BRANCH_EDGES)

    p = sub.add_parser("run", parents=[common], help="run perceive/refine/simulate/reason over problems")
    p.add_argument("--problems", type=Path, required=True)
    p.add_argument("--ppm", choices=["oracle", "file", "remote"], default="oracle")
    p.add_argument("--ppm-file", type=Path, default=None, help="recorded outputs for --ppm file")
    p.add_argument("--mllm", choices=["echo", "remote"], default="echo")
    p.add_argument("--model", default="default")
    p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("problems", parents=[common], help="export a dataset split as a problem file")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=SPLITS)

    p = sub.add_parser("degrade", parents=[common], help="write synthetic weak-perception predictions")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--scale", type=float, default=25.0, help="mutation probability is branches/scale, capped at 1")
    return parser


def _emit(args, payload: Any, text: str) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def cmd_gen(args) -> int:
    try:
        ratio = parse_split_ratio(args.split)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.out is None:
        raise UsageError("gen needs --out")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    manifest = generate_dataset(cfg, args.n, ratio, args.out, jobs=args.jobs)
    counts = {s: manifest["splits"][s]["count"] for s in SPLITS}
    _emit(args, {"out": str(args.out), "splits": counts, "config_hash": manifest["config_hash"]},
          f"wrote {args.n} records to {args.out}: " + ", ".join(f"{s}={c}" for s, c in counts.items()))
    return EXIT_OK


def cmd_simulate(args) -> int:
    if not args.deck.is_file():
        raise UsageError(f"deck file not found: {args.deck}")
    result = simulate(args.deck.read_text(encoding="utf-8"))
    print(json.dumps(result.to_dict(), sort_keys=True))
    return EXIT_OK


def _load_predictions(path: Path, split: str) -> dict[str, str]:
    if path.is_dir():
        path = path / f"{split}.jsonl"
    if not path.is_file():
        raise UsageError(f"prediction file not found: {path}")
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    d = json.loads(line)
                    preds[str(d["id"])] = d["spice"]
                except (json.JSONDecodeError, KeyError) as exc:
                    raise UsageError(f"{path}:{lineno}: bad prediction line ({exc})") from None
    return preds


def cmd_eval_ppm(args) -> int:
    if not (args.gold / "manifest.json").is_file():
        raise UsageError(f"not a dataset directory: {args.gold}")
    preds = _load_predictions(args.pred, args.split)
    rows, samples, lines = [], [], []
    for rec in load_split(args.gold, args.split):
        gold_result = SimulationResult.from_dict(rec.sim_result)
        score = score_sample(preds.get(rec.id, ""), rec.spice, rec.circuit_kind,
                             gold_result if rec.circuit_kind == "Numerical" else None)
        rows.append((rec.circuit_kind, score))
        if rec.circuit_kind == "Numerical":
            samples.append((netlist_complexity(rec.netlist()), score))
        lines.append(json.dumps({"id": rec.id, "circuit_kind": rec.circuit_kind, **score.to_dict()}, sort_keys=True))
    if not rows:
        raise UsageError(f"split {args.split!r} is empty")
    if args.scores is not None:
        args.scores.write_text("\n".join(lines) + "\n", encoding="utf-8")
    metrics = aggregate_scores(rows)
    payload: dict[str, Any] = {"metrics": metrics}
    text = format_metric_table(metrics)
    if samples:
        cx = complexity_report(samples, args.node_bins, args.branch_bins)
        payload["complexity"] = cx.to_dict()
        text += "\n\n" + cx.format_table()
    if args.out is not None:
        args.out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _emit(args, payload, text)
    return EXIT_OK


def _ppm_client(args, problems):
    if args.ppm == "oracle":
        return OracleClient()
    if args.ppm == "file":
        if args.ppm_file is None or not args.ppm_file.is_file():
            raise UsageError("--ppm file needs an existing --ppm-file")
        return FileClient(args.ppm_file)
    try:
        return RemoteClient.from_env(PPM_ENDPOINT_ENV, PPM_API_KEY_ENV, model=args.model)
    except ClientConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_run(args) -> int:
    if not args.problems.is_file():
        raise UsageError(f"problem file not found: {args.problems}")
    if args.out is None:
        raise UsageError("run needs --out for transcripts")
    try:
        problems = load_problems(args.problems)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ppm = _ppm_client(args, problems)
    if args.mllm == "echo":
        mllm = EchoClient()
    else:
        try:
            mllm = RemoteClient.from_env(model=args.model)
        except ClientConfigError as exc:
            raise UsageError(str(exc)) from None
    report = run_batch(problems, ppm, mllm, args.out, jobs=args.jobs, resume=args.resume)
    _emit(args, report.to_dict(), " ".join(f"{k}={v}" for k, v in report.to_dict().items()))
    return EXIT_OK


def cmd_problems(args) -> int:
    if args.out is None:
        raise UsageError("problems needs --out")
    problems = [problem_from_record(r) for r in load_split(args.data, args.split)]
    write_problems(problems, args.out)
    _emit(args, {"count": len(problems)}, f"wrote {len(problems)} problems to {args.out}")
    return EXIT_OK


def cmd_degrade(args) -> int:
    if args.out is None:
        raise UsageError("degrade needs --out")
    seed = 0 if args.seed is None else args.seed
    count = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in load_split(args.data, args.split):
            _, branches = netlist_complexity(rec.netlist())
            rng = sample_rng(seed, rec.index)
            deck = degraded_prediction(rec.deck(), branches, rng, lambda b: min(1.0, b / args.scale))
            fh.write(json.dumps({"id": rec.id, "spice": deck.to_text()}, sort_keys=True) + "\n")
            count += 1
    _emit(args, {"count": count}, f"wrote {count} degraded predictions to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "simulate": cmd_simulate,
    "eval-ppm": cmd_eval_ppm,
    "run": cmd_run,
    "problems": cmd_problems,
    "degrade": cmd_degrade,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RetryExhausted, DatasetError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
