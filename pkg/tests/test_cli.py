import json
import subprocess
import sys

import pytest

from circuitsyn.cli import main

from conftest import DIVIDER


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_counts_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen", "--n", "100", "--seed", "7", "--split", "8:1:1", "--out", str(a))[0] == 0
    assert run(capsys, "gen", "--n", "100", "--seed", "7", "--split", "8:1:1", "--out", str(b))[0] == 0
    sizes = {s: len((a / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test")}
    assert sizes == {"train": 80, "val": 10, "test": 10}
    for s in ("train", "val", "test"):
        assert (a / f"{s}.jsonl").read_bytes() == (b / f"{s}.jsonl").read_bytes()


def test_gen_bad_split(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--n", "10", "--split", "9:2:1", "--out", str(tmp_path / "x"))
    assert code == 2 and "9:2:1" in err


def test_gen_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    code, _, _ = run(capsys, "gen", "--n", "10", "--config", str(cfg), "--out", str(tmp_path / "x"))
    assert code == 2
    code, _, _ = run(capsys, "gen", "--n", "10", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x"))
    assert code == 2


def test_usage_error_exit_code(capsys):
    assert run(capsys, "gen")[0] == 2
    assert run(capsys, "nonsense")[0] == 2


def test_simulate(tmp_path, capsys):
    deck = tmp_path / "d.cir"
    deck.write_text("* d\nV1 in 0 10\nR1 in mid 1k\nR2 mid 0 1k\n.OP\n.PRINT V(mid)\n.END\n")
    code, out, _ = run(capsys, "simulate", "--deck", str(deck))
    assert code == 0
    assert json.loads(out)["values"] == {"V(mid)": 5.0}


def test_simulate_singular_is_not_failure(tmp_path, capsys):
    deck = tmp_path / "s.cir"
    deck.write_text("V1 a 0 10\nV2 a 0 5\n.OP\n.END\n")
    code, out, _ = run(capsys, "simulate", "--deck", str(deck))
    assert code == 0 and json.loads(out)["status"] == "Singular"


def test_simulate_missing_file(tmp_path, capsys):
    assert run(capsys, "simulate", "--deck", str(tmp_path / "nope.cir"))[0] == 2


@pytest.fixture
def cli_dataset(tmp_path_factory, capsys):
    out = tmp_path_factory.mktemp("cli") / "d"
    assert main(["gen", "--n", "50", "--seed", "4", "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def test_problems_run_and_resume(tmp_path, capsys, cli_dataset):
    probs = tmp_path / "p.jsonl"
    assert run(capsys, "problems", "--data", str(cli_dataset), "--split", "train", "--out", str(probs))[0] == 0
    lines = probs.read_text().splitlines()
    partial = tmp_path / "partial.jsonl"
    partial.write_text("\n".join(lines[:10]) + "\n")
    out = tmp_path / "t.jsonl"
    code, stdout, _ = run(capsys, "run", "--problems", str(partial), "--ppm", "oracle", "--mllm", "echo",
                          "--out", str(out), "--json")
    assert code == 0 and json.loads(stdout)["processed"] == 10
    code, stdout, _ = run(capsys, "run", "--problems", str(probs), "--ppm", "oracle", "--mllm", "echo",
                          "--out", str(out), "--json", "--jobs", "3")
    report = json.loads(stdout)
    assert code == 0 and report["skipped"] == 10 and report["processed"] == len(lines) - 10
    ids = [json.loads(x)["id"] for x in out.read_text().splitlines()]
    assert sorted(ids) == sorted(json.loads(x)["id"] for x in lines)


def test_run_remote_without_env(tmp_path, capsys, monkeypatch, cli_dataset):
    monkeypatch.delenv("MLLM_ENDPOINT", raising=False)
    monkeypatch.delenv("PPM_ENDPOINT", raising=False)
    probs = tmp_path / "p.jsonl"
    main(["problems", "--data", str(cli_dataset), "--out", str(probs)])
    capsys.readouterr()
    code, _, err = run(capsys, "run", "--problems", str(probs), "--mllm", "remote", "--out", str(tmp_path / "t"))
    assert code == 2 and "MLLM_ENDPOINT" in err
    code, _, err = run(capsys, "run", "--problems", str(probs), "--ppm", "remote", "--out", str(tmp_path / "t"))
    assert code == 2 and "PPM_ENDPOINT" in err


def test_run_file_ppm(tmp_path, capsys, cli_dataset):
    probs = tmp_path / "p.jsonl"
    main(["problems", "--data", str(cli_dataset), "--split", "test", "--out", str(probs)])
    ids = [json.loads(x)["id"] for x in probs.read_text().splitlines()]
    preds = tmp_path / "preds.jsonl"
    preds.write_text("".join(json.dumps({"id": i, "spice": DIVIDER}) + "\n" for i in ids))
    capsys.readouterr()
    code, out, _ = run(capsys, "run", "--problems", str(probs), "--ppm", "file", "--ppm-file", str(preds),
                       "--out", str(tmp_path / "t.jsonl"), "--json")
    assert code == 0 and json.loads(out)["ok"] == len(ids)
    assert run(capsys, "run", "--problems", str(probs), "--ppm", "file", "--out", str(tmp_path / "u"))[0] == 2


def test_eval_ppm_oracle_and_scores(tmp_path, capsys, cli_dataset):
    scores = tmp_path / "s.jsonl"
    report = tmp_path / "r.json"
    code, out, _ = run(capsys, "eval-ppm", "--gold", str(cli_dataset), "--split", "train",
                       "--pred", str(cli_dataset), "--scores", str(scores), "--out", str(report), "--json")
    assert code == 0
    payload = json.loads(out)
    assert payload["metrics"]["Numerical"]["ACC_CQ"] == 1.0
    assert payload["metrics"]["Numerical"]["ACC_sim"] == 1.0
    assert len(scores.read_text().splitlines()) == 40
    assert json.loads(report.read_text()) == payload


def test_eval_ppm_table_text(capsys, cli_dataset):
    code, out, _ = run(capsys, "eval-ppm", "--gold", str(cli_dataset), "--split", "train", "--pred", str(cli_dataset))
    assert code == 0 and "ACC_CQ" in out and "#Nodes" in out and "#Branches" in out


def test_eval_ppm_missing_inputs(tmp_path, capsys, cli_dataset):
    assert run(capsys, "eval-ppm", "--gold", str(tmp_path), "--pred", str(cli_dataset))[0] == 2
    assert run(capsys, "eval-ppm", "--gold", str(cli_dataset), "--pred", str(tmp_path / "x.jsonl"))[0] == 2


def test_degrade_roundtrip(tmp_path, capsys, cli_dataset):
    preds = tmp_path / "deg.jsonl"
    assert run(capsys, "degrade", "--data", str(cli_dataset), "--split", "train", "--out", str(preds), "--scale", "1")[0] == 0
    code, out, _ = run(capsys, "eval-ppm", "--gold", str(cli_dataset), "--split", "train", "--pred", str(preds), "--json")
    assert code == 0
    num = json.loads(out)["metrics"]["Numerical"]
    assert num["ACC_CQ"] == 1.0 and num["ACC_CV"] == 0.0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "circuitsyn", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("circuitsyn ")
