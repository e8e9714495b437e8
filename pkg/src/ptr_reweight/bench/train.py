"""Training loop: one PTR (or uniform SFT) optimization step per batch of segments."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..controller import ControllerState, RefinerConfig, adapt, update_stats
from ..numerics import AdamW, cosine_lr, load_snapshot, make_rng, save_snapshot
from ..pool import FifoQueue, PoolConfig, TargetBatch, build_pool, encode_targets
from ..reweighting import WeightConfig, offset_multiplier, weights
from ..scorer import ScorerConfig, derangement_shift
from .policy import ModelConfig, StepBatch, ToyPolicy, forward_backward
from .world import Dataset

log = logging.getLogger(__name__)

# rng stream ids (second SeedSequence word)
S_INIT, S_BATCH, S_POOL, S_FLOW, S_RANK, S_SCORE = range(10, 16)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 64
    segment_len: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    lr_warmup: int = 167
    nce_warmup: int = 500
    lambda_id: float = 0.05
    lambda_rank: float = 0.25
    sigma_beta: tuple[float, float] = (1.5, 1.0)
    ema_mu: float = 0.999
    log_interval: int = 50
    reweight: bool = True
    use_controller: bool = True
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    weight: WeightConfig = field(default_factory=WeightConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    refiner: RefinerConfig = field(default_factory=RefinerConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=list).encode()).hexdigest()[:16]


METRIC_FIELDS = ("step", "lr", "total", "act", "act_unweighted", "id", "rank", "tok", "acc", "margin",
                 "mean_T", "valid_ratio", "tau", "beta", "hard_ratio", "ema_acc", "ema_margin",
                 "w_q05", "w_q25", "w_q50", "w_q75", "w_q95", "w_std")


def sample_segments(ds: Dataset, trajs: list[np.ndarray], n_segments: int, seg_len: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick contiguous chunk windows; returns (rows, segment id, position in segment)."""
    pick = rng.choice(len(trajs), size=min(n_segments, len(trajs)), replace=False)
    rows, seg, pos = [], [], []
    for s, t in enumerate(pick):
        r = trajs[t]
        start = int(rng.integers(0, max(len(r) - seg_len, 0) + 1))
        w = r[start:start + seg_len]
        rows.append(w)
        seg.append(np.full(len(w), s))
        pos.append(np.arange(len(w)))
    return np.concatenate(rows), np.concatenate(seg), np.concatenate(pos)


def belief_recursion(model: ToyPolicy, ds: Dataset, rows, seg, pos) -> tuple[np.ndarray, np.ndarray]:
    """Belief tokens entering each row (no gradient) and the first-chunk mask."""
    cfg = model.cfg
    N = len(rows)
    z_in = np.zeros((N, cfg.n_tokens, cfg.d))
    first = pos == 0
    z_in[first] = model.tokenizer.z_init
    if not cfg.use_belief:
        return z_in, first
    for t in range(int(pos.max()) + 1):
        cur = np.flatnonzero(pos == t)
        nxt = np.flatnonzero(pos == t + 1)
        if len(nxt) == 0:
            break
        r = rows[cur]
        h, _ = model.trunk_forward(ds.obs[r], ds.instruction[r], z_in[cur])
        z_next = model.next_tokens(h, ds.chunk[r], ds.state[r])
        seg_to_cur = {int(s): i for i, s in enumerate(seg[cur])}
        for j in nxt:
            z_in[j] = z_next[seg_to_cur[int(seg[j])]]
    return z_in, first


class Trainer:
    """Holds model, optimizer, queue, controller and rng streams for one run."""

    def __init__(self, ds: Dataset, cfg: TrainConfig):
        self.ds = ds
        self.cfg = cfg
        self.model = ToyPolicy(cfg.model, make_rng(cfg.seed, S_INIT))
        self.model.set_action_stats(ds.chunk)
        self.opt = AdamW(self.model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.queue = FifoQueue(cfg.pool.queue_capacity, cfg.model.target_dim, cfg.model.state_dim)
        self.ctrl = ControllerState(tau=cfg.scorer.tau_score, beta=cfg.weight.beta,
                                    hard_ratio=cfg.pool.hard_neg_ratio)
        self.rngs = {k: make_rng(cfg.seed, k) for k in (S_BATCH, S_POOL, S_FLOW, S_RANK)}
        self.trajs = ds.trajectories()
        self.step_idx = 0
        self.history: list[dict] = []
        self.max_delta = max(ds.max_delta, 1)

    # -----------------------------------------------------------------------
    def build_batch(self, rows, seg, pos, rng_pool, rng_flow, rng_rank, hard_ratio: float) -> StepBatch:
        ds, m = self.ds, self.model
        z_in, first = belief_recursion(m, ds, rows, seg, pos)
        y, valid = encode_targets(ds.future_obs[rows], m.teacher, ds.has_future[rows])
        tb = TargetBatch(y, ds.source[rows], ds.instruction[rows], ds.uid[rows], ds.state[rows])
        pcfg = replace(self.cfg.pool, hard_neg_ratio=hard_ratio)
        pool = build_pool(tb, valid, self.queue, pcfg, rng_pool)
        N = len(rows)
        F = self.cfg.model.flat_action
        eps = rng_flow.normal(size=(N, F))
        sigma = rng_flow.beta(*self.cfg.sigma_beta, size=N)
        perm = derangement_shift(N, rng_rank)
        id_scale = offset_multiplier(ds.delta[rows] / self.max_delta, self.cfg.weight)
        b = StepBatch(ds.obs[rows], ds.state[rows], ds.instruction[rows], ds.chunk[rows], z_in, first, y, valid,
                      pool, eps, sigma, perm, id_scale)
        b.extra["target_batch"] = tb
        b.extra["delta_norm"] = ds.delta[rows] / self.max_delta
        return b

    def weight_fn(self, active: bool, delta_norm: np.ndarray):
        wcfg = self.cfg.weight
        beta = self.ctrl.beta

        def fn(scores):
            if not active:
                return np.ones(len(scores.valid))
            mixed = weights(scores.T, scores.valid, wcfg, beta=beta)[2]
            if wcfg.discount_weights:
                mixed = 1.0 + offset_multiplier(delta_norm, wcfg) * (mixed - 1.0)
            return mixed
        return fn

    def step(self) -> dict:
        cfg = self.cfg
        rows, seg, pos = sample_segments(self.ds, self.trajs, max(cfg.batch // cfg.segment_len, 1),
                                         cfg.segment_len, self.rngs[S_BATCH])
        b = self.build_batch(rows, seg, pos, self.rngs[S_POOL], self.rngs[S_FLOW], self.rngs[S_RANK],
                             self.ctrl.hard_ratio)
        active = cfg.reweight and self.step_idx >= cfg.nce_warmup
        self.model.zero_grad()
        res = forward_backward(self.model, b, self.weight_fn(active, b.extra["delta_norm"]), cfg.scorer,
                               self.ctrl.tau, cfg.lambda_id, cfg.lambda_rank)
        if not math.isfinite(res.total):
            raise TrainingDiverged(f"non-finite loss at step {self.step_idx}: act={res.act} id={res.idl} "
                                   f"rank={res.rank} tok={res.tok}")
        lr = cosine_lr(self.step_idx, cfg.lr, cfg.steps, cfg.lr_warmup)
        self.opt.step(self.model.grads(), lr=lr)
        self.model.update_teacher(cfg.ema_mu)
        tb = b.extra["target_batch"]
        self.queue.push(tb.take(np.flatnonzero(b.valid)))

        s = res.scores
        nv = int(s.valid.sum())
        stats = ((float(s.top1[s.valid].mean()), float(s.margin[s.valid].mean()), float(s.T[s.valid].mean()),
                  nv / len(s.valid)) if nv else (0.0, 0.0, 0.0, 0.0))
        if cfg.use_controller:
            self.ctrl = update_stats(self.ctrl, stats, cfg.refiner)
        self.step_idx += 1
        row = None
        if cfg.use_controller and self.step_idx % cfg.log_interval == 0:
            self.ctrl = adapt(self.ctrl, cfg.refiner)
        if self.step_idx % cfg.log_interval == 0 or self.step_idx == cfg.steps:
            w = res.norm_weights * len(res.norm_weights)
            q = np.quantile(w, [0.05, 0.25, 0.5, 0.75, 0.95])
            row = {"step": self.step_idx, "lr": lr, "total": res.total, "act": res.act,
                   "act_unweighted": res.act_unweighted, "id": res.idl, "rank": res.rank, "tok": res.tok,
                   "acc": stats[0], "margin": stats[1], "mean_T": stats[2], "valid_ratio": stats[3],
                   "tau": self.ctrl.tau, "beta": self.ctrl.beta, "hard_ratio": self.ctrl.hard_ratio,
                   "ema_acc": self.ctrl.ema_acc, "ema_margin": self.ctrl.ema_margin,
                   "w_q05": q[0], "w_q25": q[1], "w_q50": q[2], "w_q75": q[3], "w_q95": q[4],
                   "w_std": float(np.std(w))}
            self.history.append(row)
        return {"result": res, "batch": b, "row": row}

    def run(self, n_steps: int | None = None) -> list[dict]:
        end = self.cfg.steps if n_steps is None else min(self.step_idx + n_steps, self.cfg.steps)
        while self.step_idx < end:
            self.step()
        return self.history

    # -----------------------------------------------------------------------
    def final_weights(self, seed_stream: int = S_SCORE) -> dict[str, np.ndarray]:
        """Score every record once with the final model; weights use the final controller state."""
        rng = make_rng(self.cfg.seed, seed_stream)
        ds = self.ds
        n_seg = max(self.cfg.batch // self.cfg.segment_len, 1)
        order = rng.permutation(len(self.trajs))
        T = np.zeros(len(ds))
        valid = np.zeros(len(ds), dtype=bool)
        for start in range(0, len(order), n_seg):
            group = [self.trajs[i] for i in order[start:start + n_seg]]
            rows = np.concatenate(group)
            seg = np.concatenate([np.full(len(g), k) for k, g in enumerate(group)])
            pos = np.concatenate([np.arange(len(g)) for g in group])
            b = self.build_batch(rows, seg, pos, rng, rng, rng, self.ctrl.hard_ratio)
            res = forward_backward(self.model, b, lambda s: np.ones(len(s.valid)), self.cfg.scorer,
                                   self.ctrl.tau, backward=False)
            T[rows] = res.scores.T
            valid[rows] = res.scores.valid
        mixed = weights(T, valid, self.cfg.weight, beta=self.ctrl.beta)[2]
        return {"T": T, "valid": valid, "mixed": mixed}

    # -----------------------------------------------------------------------
    def save_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        named = {f"param.{k}": v for k, v in self.model.snapshot().items()}
        for i, (m, v) in enumerate(zip(self.opt.m, self.opt.v)):
            named[f"adam_m.{i}"] = m
            named[f"adam_v.{i}"] = v
        st = self.queue.store
        named.update({"queue.vecs": st.vecs, "queue.source": st.source_ids.astype(float),
                      "queue.task": st.task_ids.astype(float), "queue.uid": st.uids.astype(float),
                      "queue.state": st.states})
        save_snapshot(path / "state", named)
        meta = {"config_hash": self.cfg.digest(), "step": self.step_idx, "adam_t": self.opt.t,
                "controller": self.ctrl.as_dict(), "history": self.history,
                "rng": {str(k): r.bit_generator.state for k, r in self.rngs.items()}}
        (path / "meta.json").write_text(json.dumps(meta, default=_jsonable))

    def load_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text())
        if meta["config_hash"] != self.cfg.digest():
            raise ValueError("checkpoint was written under a different configuration")
        named = load_snapshot(path / "state")
        self.model.load({k[len("param."):]: v for k, v in named.items() if k.startswith("param.")})
        for i in range(len(self.opt.m)):
            self.opt.m[i][...] = named[f"adam_m.{i}"]
            self.opt.v[i][...] = named[f"adam_v.{i}"]
        self.opt.t = meta["adam_t"]
        self.queue.store = TargetBatch(named["queue.vecs"], named["queue.source"], named["queue.task"],
                                       named["queue.uid"], named["queue.state"])
        self.ctrl = ControllerState(**meta["controller"])
        self.history = meta["history"]
        self.step_idx = meta["step"]
        for k, state in meta["rng"].items():
            self.rngs[int(k)].bit_generator.state = state


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_metrics_csv(history: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in METRIC_FIELDS})


def train_segment(ds: Dataset, cfg: TrainConfig, out_dir: str | Path | None = None) -> Trainer:
    """Run a full training job; optionally write metrics.csv and a checkpoint."""
    tr = Trainer(ds, cfg)
    tr.run()
    if out_dir is not None:
        out = Path(out_dir)
        write_metrics_csv(tr.history, out / "metrics.csv")
        tr.save_checkpoint(out / "checkpoint")
    return tr
