"""Paired PTR-versus-uniform comparisons across seeds and corruption modes."""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from ..numerics import make_rng
from .evaluate import evaluate_policy
from .train import TrainConfig, Trainer, write_metrics_csv
from .world import CorruptionSpec, WorldConfig, apply_corruption, generate_world

CORRUPTION_STREAM = 99
REPORT_VERSION = 1


def paired_run(world_cfg: WorldConfig, corruption: CorruptionSpec, train_cfg: TrainConfig, seed: int,
               n_eval: int = 400, out_dir: str | Path | None = None) -> dict:
    """Train PTR and a uniform-weight twin on identical data and batches, then evaluate both."""
    start = time.perf_counter()
    world, ds = generate_world(dataclasses.replace(world_cfg, seed=seed))
    ds = apply_corruption(ds, corruption, make_rng(seed, CORRUPTION_STREAM))
    row = {"seed": seed, "mode": corruption.mode}
    histories = {}
    for arm, reweight in (("ptr", True), ("sft", False)):
        tr = Trainer(ds, dataclasses.replace(train_cfg, seed=seed, reweight=reweight))
        tr.run()
        ev = evaluate_policy(tr.model, world, n_eval, seed)
        row[f"{arm}_success"] = ev.success_rate
        row[f"{arm}_final_distance"] = ev.mean_final_distance
        histories[arm] = tr.history
        if out_dir is not None:
            write_metrics_csv(tr.history, Path(out_dir) / f"{corruption.mode}_seed{seed}_{arm}.csv")
        if reweight:
            fw = tr.final_weights()
            mixed, corrupted = fw["mixed"], ds.corrupted
            row["median_w_clean"] = float(np.median(mixed[~corrupted])) if (~corrupted).any() else float("nan")
            row["median_w_corrupted"] = float(np.median(mixed[corrupted])) if corrupted.any() else float("nan")
            row["final_mean_T"] = float(np.mean(fw["T"][fw["valid"]]))
            row["weight_std"] = float(np.std(mixed))
    row["delta"] = row["ptr_success"] - row["sft_success"]
    row["loss_reduction"] = loss_reduction(histories["sft"], histories["ptr"])
    row["seconds"] = time.perf_counter() - start
    return row


def loss_reduction(sft_history: list[dict], ptr_history: list[dict], key: str = "act_unweighted") -> list[dict]:
    """(l_sft - l_ptr) / l_sft at every logged step, on the unweighted action loss."""
    out = []
    for a, b in zip(sft_history, ptr_history):
        if a["step"] != b["step"]:
            raise ValueError("histories are not aligned")
        out.append({"step": a["step"], "value": (a[key] - b[key]) / a[key]})
    return out


def summarize(rows: list[dict]) -> dict:
    deltas = np.array([r["delta"] for r in rows])
    summary = {"n_seeds": len(rows), "mean_delta": float(deltas.mean()),
               "n_ptr_not_worse": int(np.sum(deltas >= 0))}
    if "median_w_corrupted" in rows[0] and not np.isnan(rows[0]["median_w_corrupted"]):
        summary["n_corrupted_median_below"] = int(sum(r["median_w_corrupted"] < r["median_w_clean"] for r in rows))
    return summary


def compare_runs(world_cfg: WorldConfig, train_cfg: TrainConfig, seeds, modes=("none", "Combined"),
                 n_eval: int = 400, out_dir: str | Path | None = None, corruption_kw: dict | None = None) -> dict:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    report = {"version": REPORT_VERSION, "seeds": seeds, "modes": {}}
    for mode in modes:
        spec = CorruptionSpec(mode, **(corruption_kw or {}))
        rows = [paired_run(world_cfg, spec, train_cfg, s, n_eval, out_dir) for s in seeds]
        report["modes"][mode] = {"runs": rows, "summary": summarize(rows)}
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "comparison.json").write_text(json.dumps(report, indent=2))
    return report
