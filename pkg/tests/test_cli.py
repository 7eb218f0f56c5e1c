import json
from importlib import resources

import pytest

from objslam.cli import main
from objslam.runner import evaluate_run, load_scenario, run_pipeline
from objslam.sim import load_simulation


@pytest.fixture
def small_config(tmp_path):
    data = json.loads((resources.files("objslam") / "scenarios" / "loop.json").read_text())
    data["scene"]["trajectory"]["laps"] = 0.3
    path = tmp_path / "small.json"
    path.write_text(json.dumps(data))
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, json.loads(capsys.readouterr().out)


def test_simulate_associate_eval(tmp_path, capsys, small_config):
    stream, run = tmp_path / "stream", tmp_path / "run"
    code, out = run_cli(capsys, "simulate", "--config", small_config, "--out", stream)
    assert code == 0 and out["frames"] == 300
    code, out = run_cli(capsys, "loop", "--config", small_config, "--stream", stream, "--out", run)
    assert code == 0 and out["method"] == "mlv"
    for name in ("assoc.jsonl", "loops.jsonl", "map.json", "run.json"):
        assert (run / name).exists()
    code, report = run_cli(capsys, "eval", "--config", small_config, "--stream", stream, "--run", run)
    assert code == 0

    # the same reports computed in-process
    sc = load_scenario(str(small_config))
    sim = load_simulation(stream)
    live = evaluate_run(run_pipeline(sim, sc.engine, "mlv", sc.jda, True), sim, sc)
    assert report["construction"] == pytest.approx(live["construction"])
    assert report["association"] == live["association"]
    assert report["loops"] == live["loops"]


def test_eval_rejects_mismatched_run(tmp_path, capsys, small_config):
    stream, run = tmp_path / "stream", tmp_path / "run"
    run_cli(capsys, "simulate", "--config", small_config, "--out", stream)
    run_cli(capsys, "associate", "--config", small_config, "--stream", stream, "--out", run)
    meta = json.loads((run / "run.json").read_text())
    meta["run_id"] = "not-this-run"
    (run / "run.json").write_text(json.dumps(meta))
    code, err = run_cli(capsys, "eval", "--config", small_config, "--stream", stream, "--run", run)
    assert code == 1 and err["error"] == "input"


def test_config_errors_are_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"engine": {"delta1": 1.5}}')
    code, err = run_cli(capsys, "simulate", "--config", bad, "--out", tmp_path / "x")
    assert code == 1 and err["field"].endswith("delta1")
    code, err = run_cli(capsys, "simulate", "--config", "no-such-scenario")
    assert code == 1 and "error" in err
    broken = tmp_path / "broken.json"
    broken.write_text('{"engine": {\n  "delta1": }')
    code, err = run_cli(capsys, "simulate", "--config", broken)
    assert code == 1 and err.get("line") == 2


def test_missing_stream_is_an_input_error(capsys):
    code, err = run_cli(capsys, "associate")
    assert code == 1 and err["error"] == "input"


def test_run_and_bench(tmp_path, capsys):
    data = json.loads((resources.files("objslam") / "scenarios" / "growing.json").read_text())
    data["scene"]["trajectory"]["frames"] = 30
    data["timing_repeats"] = 1
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps(data))
    code, out = run_cli(capsys, "bench", "--config", cfg, "--out", tmp_path / "b")
    assert code == 0 and set(out["stages"]) == {"mlv", "jda"} and set(out["stages"]["jda"]) == {"10"}
    code, out = run_cli(capsys, "run", "--config", "noiseless", "--seed", 0, "--out", tmp_path / "r")
    assert code == 0 and out["summary"]["mlv"]["median_f"] == 1.0


def test_presets_override_the_scenario():
    sc = load_scenario("loop", preset="objs2-gap500")
    assert sc.engine.th_objs == 2 and sc.engine.th_ids == 500 and sc.reference.min_id_gap == 500
    assert load_scenario("loop", preset="objs3-gap1000").engine.th_objs == 3
