"""Command-line entry point: ``ptr verify | train | sweep | compare | report | docs``.

Exit codes: 0 success, 1 a check or run failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bench.evaluate import evaluate_policy
from .bench.train import Trainer, TrainingDiverged, write_metrics_csv
from .bench.world import CorruptionSpec, apply_corruption, generate_world
from .config import SWEEP_PARAMS, ConfigError, RunConfig, build, load_config, with_param
from .numerics import make_rng
from .verify import run_verification

OUT_ENV = "PTR_OUT_ROOT"
CORRUPTION_STREAM = 99
CHECKPOINT_EVERY = 1000
HIST_BINS = 40

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


def run_job(cfg: RunConfig, out: Path, resume: bool = False) -> dict:
    """One training run at ``cfg.seed``: artifacts go to ``out``; returns the summary."""
    seed = cfg.seed
    world, ds = generate_world(dataclasses.replace(cfg.world, seed=seed))
    ds = apply_corruption(ds, cfg.corruption, make_rng(seed, CORRUPTION_STREAM))
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    tr = Trainer(ds, train_cfg)
    ckpt = out / "checkpoint"
    if resume and (ckpt / "meta.json").exists():
        try:
            tr.load_checkpoint(ckpt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    _write_json(out / "config.json", cfg.to_dict())
    while tr.step_idx < train_cfg.steps:
        tr.run(CHECKPOINT_EVERY)
        tr.save_checkpoint(ckpt)
    write_metrics_csv(tr.history, out / "metrics.csv")

    ev = evaluate_policy(tr.model, world, cfg.eval.n_episodes, seed)
    fw = tr.final_weights()
    mixed, corrupted, valid = fw["mixed"], ds.corrupted, fw["valid"]
    std = float(np.std(mixed))
    summary = {
        "arm": "ptr" if train_cfg.reweight else "sft",
        "mode": cfg.corruption.mode,
        "seed": seed,
        "steps": tr.step_idx,
        "config_hash": train_cfg.digest(),
        **ev.as_dict(),
        "final_mean_T": float(np.mean(fw["T"][valid])) if valid.any() else float("nan"),
        "median_w_clean": float(np.median(mixed[~corrupted])) if (~corrupted).any() else None,
        "median_w_corrupted": float(np.median(mixed[corrupted])) if corrupted.any() else None,
        "weight_std": std,
        "weight_stability": 1.0 / std if std > 0 else None,
        "w_upper": cfg.train.weight.effective_bounds[1],
        "final_controller": tr.ctrl.as_dict(),
    }
    _write_csv(out / "weights.csv",
               [{"weight": float(w), "corrupted": int(c), "valid": int(v)} for w, c, v in zip(mixed, corrupted, valid)],
               ("weight", "corrupted", "valid"))
    _write_json(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, verify=dataclasses.replace(cfg.verify, seed=args.seed))
    report = run_verification(cfg.verify)
    out = Path(args.out) if args.out else default_out()
    _write_json(out / "verify.json", report)
    for c in report["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {c['name']}  ({c['seconds']:.2f} s)")
    print(f"verify: {'pass' if report['pass'] else 'fail'}; report at {out / 'verify.json'}")
    return EXIT_OK if report["pass"] else EXIT_FAIL


def _resolved(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, seeds=[args.seed])
    return cfg


def cmd_train(args) -> int:
    cfg = _resolved(args)
    out = Path(args.out) if args.out else default_out() / "train"
    s = run_job(cfg, out, resume=args.resume)
    print(json.dumps({k: s[k] for k in ("arm", "mode", "seed", "success_rate", "final_mean_T")}))
    return EXIT_OK


def _parse_values(text: str | None) -> list[float]:
    if not text:
        raise ConfigError("--values is required")
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc


SWEEP_FIELDS = ("param", "value", "seed", "success_rate", "final_mean_T", "weight_stability")


def cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep parameter {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    values = _parse_values(args.values)
    cfg = _resolved(args)
    out = Path(args.out) if args.out else default_out() / f"sweep_{args.param}"
    rows = []
    for value in values:
        vcfg = with_param(cfg, args.param, value)
        for seed in vcfg.seeds:
            s = run_job(dataclasses.replace(vcfg, seed=seed), out / f"{args.param}={value:g}" / f"seed{seed}")
            rows.append({"param": args.param, "value": value, "seed": seed, "success_rate": s["success_rate"],
                         "final_mean_T": s["final_mean_T"], "weight_stability": s["weight_stability"]})
    _write_csv(out / "sweep.csv", rows, SWEEP_FIELDS)
    print(f"{len(rows)} runs; table at {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolved(args)
    out = Path(args.out) if args.out else default_out() / "compare"
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        spec = build(CorruptionSpec, {**dataclasses.asdict(cfg.corruption), "mode": mode}, "corruption")
        for seed in cfg.seeds:
            for arm, reweight in (("ptr", True), ("sft", False)):
                run_cfg = dataclasses.replace(cfg, seed=seed, corruption=spec,
                                              train=dataclasses.replace(cfg.train, reweight=reweight))
                run_job(run_cfg, out / mode / f"seed{seed}" / arm)
    return report(out)


# ---------------------------------------------------------------------------
RUN_FIELDS = ("run", "arm", "mode", "seed", "success_rate", "mean_final_distance", "final_mean_T",
              "median_w_clean", "median_w_corrupted", "weight_std")
DELTA_FIELDS = ("mode", "seed", "ptr_success", "sft_success", "delta")
HIST_FIELDS = ("run", "bin_lo", "bin_hi", "clean", "corrupted")


def _read_weights(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with path.open() as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["weight"]) for r in rows]), np.array([r["corrupted"] == "1" for r in rows], dtype=bool))


def report(run_dir: Path) -> int:
    summaries = sorted(run_dir.rglob("summary.json"))
    if not summaries:
        print(f"no metrics found under {run_dir}", file=sys.stderr)
        return EXIT_USAGE
    runs, arms, hist = [], {}, []
    for path in summaries:
        s = json.loads(path.read_text())
        rel = path.parent.relative_to(run_dir).as_posix() or "."
        runs.append({"run": rel, **{k: s.get(k) for k in RUN_FIELDS if k != "run"}})
        arms.setdefault((s["mode"], s["seed"]), {})[s["arm"]] = s["success_rate"]
        wpath = path.parent / "weights.csv"
        if s["arm"] == "ptr" and wpath.exists():
            w, c = _read_weights(wpath)
            edges = np.linspace(0.0, s["w_upper"], HIST_BINS + 1)
            hc = np.histogram(np.clip(w[~c], 0, s["w_upper"]), edges)[0]
            hk = np.histogram(np.clip(w[c], 0, s["w_upper"]), edges)[0]
            hist += [{"run": rel, "bin_lo": float(edges[i]), "bin_hi": float(edges[i + 1]),
                      "clean": int(hc[i]), "corrupted": int(hk[i])} for i in range(HIST_BINS)]
    deltas = [{"mode": m, "seed": sd, "ptr_success": a["ptr"], "sft_success": a["sft"], "delta": a["ptr"] - a["sft"]}
              for (m, sd), a in sorted(arms.items()) if "ptr" in a and "sft" in a]
    _write_csv(run_dir / "runs.csv", runs, RUN_FIELDS)
    _write_csv(run_dir / "deltas.csv", deltas, DELTA_FIELDS)
    _write_csv(run_dir / "weight_histogram.csv", hist, HIST_FIELDS)
    by_mode = {}
    for d in deltas:
        by_mode.setdefault(d["mode"], []).append(d["delta"])
    _write_json(run_dir / "report.json", {
        "n_runs": len(runs),
        "modes": {m: {"n_pairs": len(v), "mean_delta": float(np.mean(v)), "n_ptr_not_worse": int(np.sum(np.array(v) >= 0))}
                  for m, v in by_mode.items()},
    })
    for d in deltas:
        print(f"{d['mode']:>9} seed {d['seed']}: ptr {d['ptr_success']:.3f}  sft {d['sft_success']:.3f}  delta {d['delta']:+.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.out) if args.out else default_out()
    if not run_dir.is_dir():
        print(f"run directory not found: {run_dir}", file=sys.stderr)
        return EXIT_USAGE
    return report(run_dir)


# ---------------------------------------------------------------------------
def cmd_docs(args) -> int:
    from .docs import DOC_PATH, run_quickstart

    path = Path(args.out) if args.out else DOC_PATH
    ok = run_quickstart(path, check=args.check)
    if args.check:
        print(f"{path}: {'in sync' if ok else 'out of date; rerun ptr docs'}")
        return EXIT_OK if ok else EXIT_FAIL
    print(f"wrote {path}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptr", description="Posterior-transition reweighting toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration (every key optional)")
            sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", help=f"output directory (default from ${OUT_ENV} or ./runs)")

    sp = sub.add_parser("verify", help="run the Monte Carlo and closed-form checks")
    common(sp)
    sp.set_defaults(fn=cmd_verify)
    sp = sub.add_parser("train", help="run one training job")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    sp.set_defaults(fn=cmd_train)
    sp = sub.add_parser("sweep", help="one run per value of a hyperparameter, for every seed")
    common(sp)
    sp.add_argument("--param", required=True, help=", ".join(SWEEP_PARAMS))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(fn=cmd_sweep)
    sp = sub.add_parser("compare", help="paired reweighted and uniform runs, then a report")
    common(sp)
    sp.add_argument("--modes", default="none,Combined", help="comma-separated corruption modes")
    sp.set_defaults(fn=cmd_compare)
    sp = sub.add_parser("report", help="aggregate the runs found under --out")
    common(sp, config=False)
    sp.set_defaults(fn=cmd_report)
    sp = sub.add_parser("docs", help="regenerate docs/quickstart.md from live runs")
    common(sp, config=False)
    sp.add_argument("--check", action="store_true", help="fail if the file differs from a fresh render")
    sp.set_defaults(fn=cmd_docs)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
