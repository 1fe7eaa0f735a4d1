import hashlib
import json
from pathlib import Path

import pytest

from venteval.cli import main
from venteval.ope import ClinicalMetrics

BIN_TABLE = (
    "bin,vt_set,peep,fio2\n"
    '1,"[0, 3.9)","[0, 7)","[0, 0.36)"\n'
    '2,"[3.9, 5.37)","[7, 11)","[0.36, 0.45)"\n'
    '3,"[5.37, 6.55)","[11, 16)","[0.45, 0.55)"\n'
    '4,"[6.55, 7.74)","[16, inf)","[0.55, 0.65)"\n'
    '5,"[7.74, 9.12)",,"[0.65, 0.76)"\n'
    '6,"[9.12, 11.11)",,"[0.76, 0.89)"\n'
    '7,"[11.11, inf)",,"[0.89, 1]"\n'
)
BW = "3.036,2.8,1.532,2.532,1.5,2.0"


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_ok(*argv):
    assert main([str(a) for a in argv]) == 0, argv


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipe")
    run_ok("synth", "generate", "--n", 60, "--seed", 7, "--prefix", "tr", "--out", d / "gen_train")
    run_ok("synth", "generate", "--n", 20, "--seed", 8, "--prefix", "ev", "--out", d / "gen_eval")
    run_ok("preprocess", "--data", d / "gen_train", "--test-data", d / "gen_eval", "--out", d / "pre")
    run_ok("fit-propensity", "--data", d / "pre/train", "--l2", 1e-3, "--out", d / "prop")
    prop = d / "prop/propensity.json"
    run_ok("fit-transition", "--data", d / "pre/train", "--propensity", prop, "--bandwidths", BW, "--out", d / "nwe")
    run_ok("train", "--algo", "cqi", "--data", d / "pre/train", "--propensity", prop, "--seed", 0,
           "--alpha", 0.375, "--beta", 0.75, "--passes", 5, "--out", d / "cqi")
    run_ok("train", "--algo", "bc", "--data", d / "pre/train", "--propensity", prop, "--seed", 0, "--n-trees", 10,
           "--out", d / "bc")
    run_ok("evaluate", "--method", "matching", "--policy", d / "cqi/policy.json", "--model", d / "nwe/transition.json",
           "--data", d / "pre/test", "--propensity", prop, "--seed", 1, "--B", 200, "--out", d / "match")
    return d


def test_bins_prints_table(capsys):
    assert main(["bins"]) == 0
    assert capsys.readouterr().out == BIN_TABLE


def test_synth_generate_byte_identical(tmp_path):
    for k in (1, 2):
        run_ok("synth", "generate", "--n", 10, "--seed", 7, "--out", tmp_path / f"g{k}")
    for f in ("steps.csv", "static.csv", "env.cfg"):
        assert (tmp_path / "g1" / f).read_bytes() == (tmp_path / "g2" / f).read_bytes()
    m1 = json.loads((tmp_path / "g1/manifest.json").read_text())
    m2 = json.loads((tmp_path / "g2/manifest.json").read_text())
    assert m1["outputs"] == m2["outputs"] and m1["config_hash"] == m2["config_hash"]
    run_ok("synth", "generate", "--n", 10, "--seed", 8, "--out", tmp_path / "g3")
    assert (tmp_path / "g1/steps.csv").read_bytes() != (tmp_path / "g3/steps.csv").read_bytes()


def test_end_to_end_report(pipeline):
    out = pipeline / "match"
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == set(ClinicalMetrics.__dataclass_fields__)
    est = json.loads((out / "estimate.json").read_text())
    assert est["method"] == "matching" and est["ci_low"] <= est["value"] <= est["ci_high"]
    for f in ("estimates.csv", "estimates.png", "action_distribution.csv", "action_distribution.png",
              "trajectories.csv"):
        assert (out / f).stat().st_size > 0
    assert (out / "estimates.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (pipeline / "cqi/tree.txt").read_text().startswith("node 0")


def test_manifest_contents(pipeline):
    m = json.loads((pipeline / "match/manifest.json").read_text())
    assert m["seed"] == 1 and m["config"]["B"] == 200
    assert {"numpy", "scipy", "pandas", "scikit-learn", "python", "venteval"} <= set(m["versions"])
    assert any(k.endswith("policy.json") for k in m["inputs"])
    for name, h in m["outputs"].items():
        assert digest(pipeline / "match" / name) == h
    assert "time" not in json.dumps(m).lower()


@pytest.mark.parametrize("stage", ["pre", "prop", "nwe", "cqi", "bc", "match"])
def test_rerun_byte_identical(pipeline, stage, tmp_path, capsys):
    assert main(["rerun", "--manifest", str(pipeline / stage / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    assert "identical" in capsys.readouterr().out


def test_other_commands(pipeline, tmp_path):
    d, prop = pipeline, pipeline / "prop/propensity.json"
    run_ok("evaluate", "--method", "wis", "--policy", d / "cqi/policy.json", "--behavior", d / "bc/policy.json",
           "--data", d / "pre/train", "--propensity", prop, "--seed", 1, "--B", 200, "--out", tmp_path / "wis")
    run_ok("evaluate", "--method", "fqe", "--policy", d / "bc/policy.json", "--data", d / "pre/train",
           "--propensity", prop, "--seed", 1, "--B", 200, "--out", tmp_path / "fqe")
    run_ok("simulate", "--policy", d / "cqi/policy.json", "--model", d / "nwe/transition.json", "--data", d / "pre/test",
           "--propensity", prop, "--seed", 1, "--out", tmp_path / "sim")
    run_ok("metrics", "--trajectories", tmp_path / "sim/trajectories.csv", "--out", tmp_path / "met")
    # same policy, model and seed: simulate and matching agree on the clinical metrics
    a = json.loads((tmp_path / "met/metrics.json").read_text())
    b = json.loads((d / "match/metrics.json").read_text())
    assert {k: a[k] for k in b} == b
    run_ok("export-tree", "--policy", d / "cqi/policy.json", "--format", "graph", "--out", tmp_path / "tree")
    assert (tmp_path / "tree/tree.dot").read_text().startswith("digraph")
    run_ok("synth", "oracle", "--policy", d / "cqi/policy.json", "--propensity", prop, "--n-rollouts", 200,
           "--seed", 3, "--out", tmp_path / "oracle")
    o = json.loads((tmp_path / "oracle/oracle.json").read_text())
    assert o["n_rollouts"] == 200 and o["se"] > 0
    for name in ("wis", "fqe"):
        e = json.loads((tmp_path / name / "estimate.json").read_text())
        assert e["value"] == e["value"]  # not NaN


def test_threads_do_not_change_outputs(pipeline, tmp_path, monkeypatch):
    args = ["evaluate", "--method", "matching", "--policy", pipeline / "cqi/policy.json", "--model",
            pipeline / "nwe/transition.json", "--data", pipeline / "pre/test", "--propensity",
            pipeline / "prop/propensity.json", "--seed", 1, "--B", 200, "--noise"]
    monkeypatch.setenv("VENTEVAL_THREADS", "1")
    run_ok(*args, "--out", tmp_path / "serial")
    monkeypatch.setenv("VENTEVAL_THREADS", "4")
    run_ok(*args, "--out", tmp_path / "parallel")
    for f in ("estimate.json", "metrics.json", "trajectories.csv", "estimates.png"):
        assert digest(tmp_path / "serial" / f) == digest(tmp_path / "parallel" / f)


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# settings\nseed = 5\nB = 150\nlevel = 0.9\n")
    base = ["evaluate", "--method", "matching", "--policy", pipeline / "cqi/policy.json", "--model",
            pipeline / "nwe/transition.json", "--data", pipeline / "pre/test", "--propensity",
            pipeline / "prop/propensity.json", "--config", cfg]
    run_ok(*base, "--out", tmp_path / "a")
    run_ok(*base, "--level", 0.8, "--out", tmp_path / "b")
    ma = json.loads((tmp_path / "a/manifest.json").read_text())
    mb = json.loads((tmp_path / "b/manifest.json").read_text())
    assert (ma["seed"], ma["config"]["B"], ma["config"]["level"]) == (5, 150, 0.9)
    assert mb["config"]["level"] == 0.8 and ma["config_hash"] != mb["config_hash"]
    assert str(cfg) in ma["inputs"]


def test_inputs_not_mutated(pipeline, tmp_path):
    before = {p: digest(p) for p in (pipeline / "pre").rglob("*.csv")}
    run_ok("train", "--algo", "cq", "--data", pipeline / "pre/train", "--propensity", pipeline / "prop/propensity.json",
           "--seed", 0, "--epochs", 2, "--out", tmp_path / "cq")
    assert before == {p: digest(p) for p in (pipeline / "pre").rglob("*.csv")}
    assert json.loads((tmp_path / "cq/policy.json").read_text())["kind"] == "cq"


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("venteval: error: command=")
    return err[0]


def test_missing_seed_is_validation_error(tmp_path, capsys):
    assert main(["synth", "generate", "--n", "5", "--out", str(tmp_path / "x")]) == 1
    assert "seed" in _error_line(capsys)


def test_missing_input_is_validation_error(tmp_path, capsys):
    assert main(["fit-propensity", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "x")]) == 1
    assert "type=CliError" in _error_line(capsys)


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sead = 1\n")
    assert main(["synth", "generate", "--n", "5", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
    assert "sead" in _error_line(capsys)


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["bins", "--frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_rerun_detects_changed_input(tmp_path, capsys):
    run_ok("synth", "generate", "--n", 5, "--seed", 1, "--out", tmp_path / "g")
    run_ok("preprocess", "--data", tmp_path / "g", "--out", tmp_path / "p")
    steps = tmp_path / "g/steps.csv"
    steps.write_text(steps.read_text().replace("syn-00000", "syn-00009", 1))
    assert main(["rerun", "--manifest", str(tmp_path / "p/manifest.json"), "--out", str(tmp_path / "r")]) == 1
    assert "input changed" in _error_line(capsys)
