import json

import pytest
import yaml

from ianus.cli import main
from ianus.config import dump_config
from ianus.scenarios import SCENARIOS, ScenarioError, check, load_expectations, run_scenario
from conftest import tiny_model


@pytest.fixture
def tiny_yaml(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(dump_config(model=tiny_model()))
    return str(p)


def test_compile_emits_plan(tmp_path, tiny_yaml, capsys):
    out = tmp_path / "plan.txt"
    assert main(["compile", "--model", tiny_yaml, "--stage", "generation", "--step", "2",
                 "--emit-plan", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("# stage=generation(2)")
    assert "PIM_MACRO" in text
    assert "commands over 2 block(s)" in capsys.readouterr().out


def test_simulate_json(tmp_path, tiny_yaml, monkeypatch):
    monkeypatch.setenv("IANUS_OUT_DIR", str(tmp_path))
    assert main(["simulate", "--model", tiny_yaml, "--tokens", "8:2", "--format", "json", "--out", "r.json"]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["input_tokens"] == 8 and rep["total_ns"] > 0


def test_trace_dump_validates(tmp_path, tiny_yaml, capsys):
    tr = tmp_path / "t.txt"
    assert main(["simulate", "--model", tiny_yaml, "--tokens", "8:2", "--trace", str(tr), "--out",
                 str(tmp_path / "r.txt")]) == 0
    assert main(["validate-trace", str(tr)]) == 0
    assert "0 violation(s)" in capsys.readouterr().out


def test_validate_trace_reports_violations(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("0 0 0 ACT 1 0\n5 0 0 RD 1 0\n")
    assert main(["validate-trace", str(bad)]) == 1
    assert "tRCDRD" in capsys.readouterr().out


def test_dump_allocation_csv(capsys):
    assert main(["dump-allocation", "--model", "gpt2-m", "--mode", "partitioned"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("name,region,nbytes")
    assert any(",1,0" in line for line in lines[1:])  # duplicated weights


def test_errors_exit_two(capsys):
    assert main(["simulate", "--model", "nope"]) == 2
    assert "unknown model" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["run", "no-such-scenario"])


def test_scenario_files_and_thresholds(tmp_path):
    res = run_scenario("adaptive-map", {"models": ["gpt2-m"], "tokens": [8, 16]}, out_dir=tmp_path)
    assert res.passed
    assert res.checks == {"gpt2-m_n8_ffn": "pass", "gpt2-m_n16_ffn": "pass"}
    summary = json.loads(res.summary_path.read_text())
    assert summary["passed"] is True
    header = res.csv_path.read_text().splitlines()[0]
    assert header.startswith("model,n,map_fc_qkv")


def test_scenario_output_is_byte_stable_and_pool_independent(tmp_path):
    over = {"models": ["gpt2-m"], "tokens": [4, 8]}
    a = run_scenario("adaptive-map", over, out_dir=tmp_path / "a", workers=1)
    b = run_scenario("adaptive-map", over, out_dir=tmp_path / "b", workers=2)
    assert a.csv_path.read_bytes() == b.csv_path.read_bytes()
    assert a.summary_path.read_bytes() == b.summary_path.read_bytes()


def test_run_exit_code_follows_thresholds(tmp_path):
    exp = tmp_path / "exp.yaml"
    exp.write_text(yaml.safe_dump({"adaptive-map": {"gpt2-m_n8_ffn": {"equals": "MU"}}}))
    args = ["run", "adaptive-map", "--models", "gpt2-m", "--tokens", "8", "--out", str(tmp_path)]
    assert main(args + ["--expectations", str(exp), "--workers", "1"]) == 1
    assert main(args + ["--expectations", str(exp), "--workers", "1", "--explore"]) == 0


def test_out_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("IANUS_OUT_DIR", str(tmp_path))
    res = run_scenario("adaptive-map", {"models": ["gpt2-m"], "tokens": [4]}, explore=True)
    assert res.csv_path.parent == tmp_path


def test_invalid_overrides():
    with pytest.raises(ScenarioError, match="unknown scenario"):
        run_scenario("no-such-scenario")
    with pytest.raises(ScenarioError, match="takes no"):
        run_scenario("adaptive-map", {"cores": [1]})
    with pytest.raises(ScenarioError, match="INPUT:OUTPUT"):
        run_scenario("e2e-latency", {"io": ["128-8"]})
    with pytest.raises(ScenarioError, match="unknown model"):
        run_scenario("energy", {"models": ["gpt-9000"]})


def test_grids_are_deterministic():
    for sc in SCENARIOS.values():
        p = {k: list(v) for k, v in sc.defaults.items()}
        assert sc.grid(p) == sc.grid(p)
        assert sc.grid(p)


def test_every_threshold_names_a_known_scenario():
    exp = load_expectations()
    assert exp["version"] == 1
    assert set(exp) - {"version"} == set(SCENARIOS)


def test_check_operators():
    assert check(1.5, {"min": 1.2, "max": 1.8})
    assert not check(1.2, {"gt": 1.2})
    assert check("PIM", {"equals": "PIM"})
    assert check(3.0000000001, {"equals": 3.0})
    with pytest.raises(ScenarioError):
        check(1, {"about": 1})
