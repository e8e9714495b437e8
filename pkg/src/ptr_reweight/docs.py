"""Generates docs/quickstart.md from live runs so every number in it is computed."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .bench.train import TrainConfig, Trainer
from .bench.world import CorruptionSpec, WorldConfig, apply_corruption, generate_world
from .numerics import make_rng
from .reweighting import WeightConfig, kl_bound, weight
from .verify import VerifyConfig, run_verification

DOC_PATH = Path("docs") / "quickstart.md"
TRACE_FIELDS = ("step", "total", "act", "id", "rank", "acc", "mean_T", "tau", "beta", "hard_ratio", "w_q05", "w_q95")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "pass" if x else "FAIL"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
    return out


def _small_world(n_traj: int = 96) -> WorldConfig:
    return WorldConfig(n_traj=n_traj)


def alpha_zero_matches_uniform(steps: int = 60, seed: int = 0) -> bool:
    """PTR with alpha = 0 must leave every parameter bit-identical to uniform training."""
    _, ds = generate_world(dataclasses.replace(_small_world(), seed=seed))
    ds = apply_corruption(ds, CorruptionSpec("Combined"), make_rng(seed, 99))
    base = TrainConfig(steps=steps, nce_warmup=10, lr_warmup=5, seed=seed)
    a = Trainer(ds, dataclasses.replace(base, weight=WeightConfig(alpha=0.0)))
    b = Trainer(ds, dataclasses.replace(base, reweight=False))
    a.run()
    b.run()
    return all(np.array_equal(x, y) for x, y in zip(a.model.params(), b.model.params()))


def training_trace(steps: int = 200, seed: int = 0) -> tuple[list[dict], int]:
    _, ds = generate_world(dataclasses.replace(_small_world(), seed=seed))
    ds = apply_corruption(ds, CorruptionSpec("Combined"), make_rng(seed, 99))
    tr = Trainer(ds, TrainConfig(steps=steps, nce_warmup=50, lr_warmup=10, log_interval=25, seed=seed))
    tr.run()
    return tr.history, tr.cfg.nce_warmup


def _defaults_rows() -> list[tuple]:
    def show(v):
        return str(v).lower() if isinstance(v, bool) else v

    rows = []
    for name, val in dataclasses.asdict(TrainConfig()).items():
        if isinstance(val, dict):
            rows += [(f"train.{name}.{k}", show(v)) for k, v in val.items()]
        else:
            rows.append((f"train.{name}", show(val)))
    return rows


def render_quickstart() -> str:
    lines = ["# Quickstart", "",
             "Generated by `ptr docs`; do not edit by hand. `ptr docs --check` fails when this file",
             "no longer matches what the code produces.", "",
             "## Install", "", "```", "pip install -e '.[test]' --no-build-isolation", "```", "",
             "## Verification suite", "", "`ptr verify` runs the finite-support checks below and exits 0 only if all pass.", ""]
    report = run_verification(VerifyConfig())
    checks = {c["name"]: c for c in report["checks"]}
    lines += _table(("check", "result"), [(c["name"], c["pass"]) for c in report["checks"]])
    kc = checks["kl_convergence"]
    lines += ["", "Expected identification score against its closed-form KL limit:", ""]
    lines += _table(("K", "mean abs error over seeds"), list(zip(kc["trend_K"], kc["trend_abs_error"])))
    lines += ["", f"At K = 4096: estimate {_fmt(kc['estimate'])}, KL {_fmt(kc['oracle'])}, "
                  f"largest per-draw score {_fmt(kc['max_abs_score'])} under the bound {_fmt(kc['score_bound'])}.", ""]
    st = checks["source_tilt"]
    lines += [f"Two-source tilt: closed form {[round(v, 4) for v in st['closed_form']]}, "
              f"Monte Carlo {[round(v, 4) for v in st['monte_carlo']]}.", ""]
    lines += ["## Weight map", ""]
    lines += _table(("quantity", "value"), [
        ("KL bound at defaults", kl_bound(WeightConfig())),
        ("KL bound at alpha = 0.5", kl_bound(WeightConfig(alpha=0.5))),
        ("weight at T = 0", weight(0.0, WeightConfig()).mixed),
        ("weight at T = ln 8", weight(float(np.log(8.0)), WeightConfig()).mixed),
        ("alpha = 0 run equals uniform run (60 steps)", alpha_zero_matches_uniform()),
    ])
    history, warm = training_trace()
    lines += ["", "## Training trace", "",
              "200 steps on a 96-trajectory world with Combined corruption. Up to step "
              f"{warm} the scorer trains but every weight is 1, so the weight quantiles sit at 1; "
              "after that, samples are reweighted by their identification score and the controller "
              "moves tau, beta and the hard-negative ratio every logged step.", ""]
    lines += _table(TRACE_FIELDS, [tuple(r[k] for k in TRACE_FIELDS) for r in history])
    lines += ["", "## Defaults", ""]
    lines += _table(("key", "value"), _defaults_rows())
    lines += ["", "## Command line", "", "```",
              "ptr verify [--config cfg.json] [--out DIR]",
              "ptr train --config cfg.json [--seed N] [--out DIR] [--resume]",
              "ptr sweep --config cfg.json --param tau0 --values 0.06,0.12,0.20",
              "ptr compare --config cfg.json --modes none,Combined",
              "ptr report --out DIR",
              "ptr docs [--check]", "```", ""]
    return "\n".join(lines)


def run_quickstart(path: str | Path = DOC_PATH, check: bool = False) -> bool:
    """Write the quickstart, or with ``check`` compare it to a fresh render; returns True if in sync."""
    text = render_quickstart()
    path = Path(path)
    if check:
        return path.exists() and path.read_text() == text
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return True
