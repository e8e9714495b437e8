import csv
import json

import pytest

from ptr_reweight.cli import main
from ptr_reweight.config import ConfigError, RunConfig, build, load_config, with_param

TINY_RUN = {
    "seeds": [0, 1],
    "world": {"n_traj": 24},
    "train": {"steps": 12, "batch": 16, "nce_warmup": 4, "log_interval": 4, "lr_warmup": 2},
    "eval": {"n_episodes": 20},
    "verify": {"n_pairs": 10, "score_draws": 5000, "trend_seeds": 2, "mixture_samples": 100000,
               "n_kl_batches": 100},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_defaults_and_rejections(tmp_path):
    assert load_config(None) == RunConfig()
    cfg = build(RunConfig, {"train": {"weight": {"alpha": 0.5}}, "corruption": {"mode": "TT"}})
    assert cfg.train.weight.alpha == 0.5 and cfg.corruption.mode == "TT" and cfg.train.steps == 5000
    for bad in ({"trian": {}}, {"train": {"weight": {"alfa": 1}}}, {"train": {"steps": "many"}},
                {"corruption": {"mode": "blur"}}, {"train": {"sigma_beta": [1.0]}}):
        with pytest.raises(ConfigError):
            build(RunConfig, bad)
    assert with_param(RunConfig(), "tau0", 0.2).train.scorer.tau_score == 0.2
    with pytest.raises(ConfigError):
        with_param(RunConfig(), "lr", 1.0)


def test_usage_errors_exit_2(tmp_path, tiny_config):
    assert main([]) == 2
    assert main(["verify", "--config", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown": 1}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["sweep", "--config", str(tiny_config), "--param", "lr", "--values", "1",
                 "--out", str(tmp_path / "s")]) == 2
    assert main(["report", "--out", str(tmp_path / "nothing")]) == 2
    (tmp_path / "empty").mkdir()
    assert main(["report", "--out", str(tmp_path / "empty")]) == 2


def test_verify_pass_and_tightened_failure(tmp_path, tiny_config):
    assert main(["verify", "--config", str(tiny_config), "--out", str(tmp_path / "v")]) == 0
    rep = json.loads((tmp_path / "v" / "verify.json").read_text())
    assert rep["pass"] and len(rep["checks"]) == 4
    tight = tmp_path / "tight.json"
    tight.write_text(json.dumps({**TINY_RUN, "verify": {**TINY_RUN["verify"], "tolerance_scale": 0.01}}))
    assert main(["verify", "--config", str(tight), "--out", str(tmp_path / "t")]) == 1


def test_train_echo_resume_and_determinism(tmp_path, tiny_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    for name in ("config.json", "metrics.csv", "summary.json", "weights.csv", "checkpoint/meta.json"):
        assert (out / name).exists()
    # the echoed configuration reproduces the run byte for byte
    again = tmp_path / "again"
    assert main(["train", "--config", str(out / "config.json"), "--out", str(again)]) == 0
    assert (out / "metrics.csv").read_text() == (again / "metrics.csv").read_text()
    assert (out / "summary.json").read_text() == (again / "summary.json").read_text()
    # resuming a finished run is a no-op; a changed config is refused
    assert main(["train", "--config", str(tiny_config), "--out", str(out), "--resume"]) == 0
    assert (out / "metrics.csv").read_text() == (again / "metrics.csv").read_text()
    changed = tmp_path / "changed.json"
    changed.write_text(json.dumps({**TINY_RUN, "train": {**TINY_RUN["train"], "lr": 0.01}}))
    assert main(["train", "--config", str(changed), "--out", str(out), "--resume"]) == 2


def test_alpha_zero_train_matches_uniform_arm(tmp_path):
    for name, train in (("a0", {"weight": {"alpha": 0.0}}), ("sft", {"reweight": False})):
        path = tmp_path / f"{name}.json"
        path.write_text(json.dumps({**TINY_RUN, "train": {**TINY_RUN["train"], **train}}))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / name)]) == 0
    a = json.loads((tmp_path / "a0" / "summary.json").read_text())
    b = json.loads((tmp_path / "sft" / "summary.json").read_text())
    assert a["success_rate"] == b["success_rate"] and a["mean_final_distance"] == b["mean_final_distance"]


def test_sweep_rows(tmp_path, tiny_config):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tiny_config), "--param", "tau0", "--values", "0.06,0.12",
                 "--out", str(out)]) == 0
    rows = _rows(out / "sweep.csv")
    assert len(rows) == 2 * 2
    assert {(r["value"], r["seed"]) for r in rows} == {("0.06", "0"), ("0.06", "1"), ("0.12", "0"), ("0.12", "1")}
    assert (out / "tau0=0.06" / "seed1" / "summary.json").exists()


def test_compare_and_report(tmp_path, tiny_config):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(tiny_config), "--modes", "Combined", "--out", str(out)]) == 0
    deltas = _rows(out / "deltas.csv")
    assert [(d["mode"], d["seed"]) for d in deltas] == [("Combined", "0"), ("Combined", "1")]
    hist = _rows(out / "weight_histogram.csv")
    assert len(hist) == 2 * 40
    assert float(hist[0]["bin_lo"]) == 0.0 and float(hist[39]["bin_hi"]) == pytest.approx(4.0)
    first = {p: (out / p).read_text() for p in ("runs.csv", "deltas.csv", "weight_histogram.csv", "report.json")}
    assert main(["report", "--out", str(out)]) == 0
    assert first == {p: (out / p).read_text() for p in first}


def test_default_output_root(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("PTR_OUT_ROOT", str(tmp_path / "root"))
    assert main(["verify", "--config", str(tiny_config)]) == 0
    assert (tmp_path / "root" / "verify.json").exists()
