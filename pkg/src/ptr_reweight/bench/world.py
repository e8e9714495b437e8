"""Synthetic multi-embodiment reaching world.

A 2-D point mass must arrive at one of several goals when the horizon
ends. Each source (embodiment) adds a constant offset to its raw actions
and its dynamics subtract it again, so different sources need different
action chunks for the same progress. Observations are random Fourier
features of position and of the mean velocity over the last chunk
(motion blur), a progress clock and a
source one-hot; the proprioceptive state is position and last normalized
velocity.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import make_rng

CLEAN, CORRUPTED = "clean", "corrupted"


@dataclass
class WorldConfig:
    n_sources: int = 3
    n_tasks: int = 4
    n_traj: int = 480
    chunks_per_traj: int = 8
    chunk_len: int = 16
    action_dim: int = 2
    obs_dim: int = 16
    n_vel_features: int = 8
    feature_scale: float = 2.0
    vel_feature_scale: float = 40.0
    step_scale: float = 0.25
    goal_radius: float = 0.8
    start_radius: float = 0.05
    offset_scale: float = 0.05
    expert_noise: float = 0.01
    speed_jitter: float = 0.8  # per-chunk speed multiplier drawn from 1 +- speed_jitter
    heading_jitter: float = 1.0  # per-chunk heading rotation (radians), uniform +-
    future_noise: float = 0.01
    missing_future_frac: float = 0.05
    seed: int = 0

    @property
    def state_dim(self) -> int:
        return 4

    @property
    def horizon(self) -> int:
        return self.chunks_per_traj * self.chunk_len

    @property
    def n_pos_features(self) -> int:
        return self.obs_dim - self.n_vel_features - 1 - self.n_sources


@dataclass
class World:
    """Fixed geometry shared by data generation and evaluation."""

    cfg: WorldConfig
    goals: np.ndarray  # (n_tasks, 2)
    offsets: np.ndarray  # (n_sources, 2)
    freqs: np.ndarray  # (n_pos_features, 2)
    phases: np.ndarray
    vel_freqs: np.ndarray  # (n_vel_features, 2)
    vel_phases: np.ndarray

    @classmethod
    def build(cls, cfg: WorldConfig) -> "World":
        if cfg.n_pos_features < 1:
            raise ValueError("obs_dim too small for the requested feature layout")
        rng = make_rng(cfg.seed, 0)
        ang = 2 * np.pi * (np.arange(cfg.n_tasks) + 0.5) / cfg.n_tasks
        goals = cfg.goal_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        offsets = rng.uniform(-cfg.offset_scale, cfg.offset_scale, size=(cfg.n_sources, 2))
        freqs = rng.normal(0.0, cfg.feature_scale, size=(cfg.n_pos_features, 2))
        phases = rng.uniform(0, 2 * np.pi, size=cfg.n_pos_features)
        vel_freqs = rng.normal(0.0, cfg.vel_feature_scale, size=(cfg.n_vel_features, 2))
        vel_phases = rng.uniform(0, 2 * np.pi, size=cfg.n_vel_features)
        return cls(cfg, goals, offsets, freqs, phases, vel_freqs, vel_phases)

    def observe(self, pos: np.ndarray, vel: np.ndarray, progress, source: np.ndarray) -> np.ndarray:
        pos, vel = np.atleast_2d(pos), np.atleast_2d(vel)
        n = pos.shape[0]
        clock = np.broadcast_to(np.asarray(progress, dtype=np.float64), (n,))[:, None]
        onehot = np.eye(self.cfg.n_sources)[np.asarray(source).reshape(-1)]
        return np.concatenate([np.cos(pos @ self.freqs.T + self.phases),
                               np.cos(vel @ self.vel_freqs.T + self.vel_phases), clock, onehot], axis=1)

    def execute(self, pos: np.ndarray, chunk: np.ndarray, source: np.ndarray):
        """Run an action chunk (N, L, 2).

        Returns (final pos, final normalized velocity, chunk-mean normalized
        velocity); the last one drives the motion features of the next
        observation.
        """
        vel = chunk - self.offsets[source][:, None, :]
        return pos + self.cfg.step_scale * vel.sum(axis=1), vel[:, -1, :], vel.mean(axis=1)

    def expert_chunk(self, pos: np.ndarray, goal: np.ndarray, source: np.ndarray, chunk_index,
                     rng: np.random.Generator | None, noise: float, jitter: bool = False) -> np.ndarray:
        """Arrive-on-time expert: each step covers the remaining gap over the remaining steps.

        With ``jitter`` every chunk but the last draws its own speed and
        heading (demonstrator style); the last chunk lands on the goal.
        """
        cfg = self.cfg
        N = pos.shape[0]
        c = np.broadcast_to(np.asarray(chunk_index), (N,))
        out = np.zeros((N, cfg.chunk_len, cfg.action_dim))
        p = pos.copy()
        k = np.ones(N)
        rot = np.tile(np.eye(2), (N, 1, 1))
        if jitter and rng is not None:
            last = c >= cfg.chunks_per_traj - 1
            k = np.where(last, 1.0, 1.0 + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter, size=N))
            th = np.where(last, 0.0, rng.uniform(-cfg.heading_jitter, cfg.heading_jitter, size=N))
            cs, sn = np.cos(th), np.sin(th)
            rot = np.stack([np.stack([cs, -sn], -1), np.stack([sn, cs], -1)], axis=1)
        remaining = np.maximum((cfg.chunks_per_traj - c) * cfg.chunk_len, 1)
        for i in range(cfg.chunk_len):
            r = np.maximum(remaining - i, 1)[:, None]
            d = k[:, None] * np.einsum("nij,nj->ni", rot, goal - p) / r
            a = self.offsets[source] + d / cfg.step_scale
            if rng is not None and noise > 0:
                a = a + noise * rng.normal(size=a.shape)
            out[:, i] = a
            p = p + cfg.step_scale * (a - self.offsets[source])
        return out

    def sample_starts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        r = self.cfg.start_radius * np.sqrt(rng.uniform(size=n))
        th = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([r * np.cos(th), r * np.sin(th)], axis=1)


@dataclass
class Dataset:
    """Column store of SampleRecords (one row per chunk)."""

    obs: np.ndarray
    state: np.ndarray
    instruction: np.ndarray
    chunk: np.ndarray
    future_obs: np.ndarray
    has_future: np.ndarray
    delta: np.ndarray
    source: np.ndarray
    task: np.ndarray
    traj: np.ndarray
    chunk_index: np.ndarray
    uid: np.ndarray
    corrupted: np.ndarray
    meta: dict = field(default_factory=dict)

    FIELDS = ("obs", "state", "instruction", "chunk", "future_obs", "has_future", "delta", "source",
              "task", "traj", "chunk_index", "uid", "corrupted")

    def __len__(self) -> int:
        return len(self.uid)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(**{k: getattr(self, k)[idx] for k in self.FIELDS}, meta=dict(self.meta))

    def copy(self) -> "Dataset":
        return Dataset(**{k: getattr(self, k).copy() for k in self.FIELDS}, meta=dict(self.meta))

    def quality_label(self, i: int) -> str:
        return CORRUPTED if self.corrupted[i] else CLEAN

    def record(self, i: int) -> dict:
        rec = {k: getattr(self, k)[i] for k in self.FIELDS}
        rec["future_obs"] = rec["future_obs"] if rec["has_future"] else None
        rec["quality_label"] = self.quality_label(i)
        return rec

    def trajectories(self) -> list[np.ndarray]:
        """Row indices per trajectory, ordered by chunk index."""
        order = np.lexsort((self.chunk_index, self.traj))
        t = self.traj[order]
        cuts = np.flatnonzero(np.diff(t)) + 1
        return np.split(order, cuts)

    @property
    def max_delta(self) -> int:
        return int(self.delta.max()) if len(self) else 1

    def save(self, path: str | Path) -> None:
        """Binary arrays (``.npz``) plus a JSON manifest of shapes and dtypes."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        arrays = {k: getattr(self, k) for k in self.FIELDS}
        np.savez(path / "dataset.npz", **arrays)
        manifest = {"records": len(self), "meta": self.meta,
                    "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()}}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        data = np.load(path / "dataset.npz")
        meta = json.loads((path / "manifest.json").read_text())["meta"]
        return cls(**{k: data[k] for k in cls.FIELDS}, meta=meta)


def generate_world(cfg: WorldConfig) -> tuple[World, Dataset]:
    world = World.build(cfg)
    rng = make_rng(cfg.seed, 1)
    n, C = cfg.n_traj, cfg.chunks_per_traj
    task = rng.integers(0, cfg.n_tasks, size=n)
    source = rng.integers(0, cfg.n_sources, size=n)
    pos = world.sample_starts(n, rng)
    vel = np.zeros((n, 2))
    blur = np.zeros((n, 2))
    rows = {k: [] for k in ("obs", "state", "chunk", "future_obs", "has_future")}
    for c in range(C):
        obs = world.observe(pos, blur, c / C, source)
        chunk = world.expert_chunk(pos, world.goals[task], source, c, rng, cfg.expert_noise, jitter=True)
        new_pos, new_vel, new_blur = world.execute(pos, chunk, source)
        fut = world.observe(new_pos, new_blur, (c + 1) / C, source) + cfg.future_noise * rng.normal(size=(n, cfg.obs_dim))
        rows["obs"].append(obs)
        rows["state"].append(np.concatenate([pos, vel], axis=1))
        rows["chunk"].append(chunk)
        rows["future_obs"].append(fut)
        rows["has_future"].append(rng.uniform(size=n) >= cfg.missing_future_frac)
        pos, vel, blur = new_pos, new_vel, new_blur
    # row order: trajectory-major
    stack = {k: np.stack(v, axis=1).reshape((n * C,) + np.shape(v[0])[1:]) for k, v in rows.items()}
    traj = np.repeat(np.arange(n), C)
    ds = Dataset(
        obs=stack["obs"], state=stack["state"], instruction=np.repeat(task, C), chunk=stack["chunk"],
        future_obs=stack["future_obs"], has_future=stack["has_future"].astype(bool),
        delta=np.full(n * C, cfg.chunk_len), source=np.repeat(source, C), task=np.repeat(task, C),
        traj=traj, chunk_index=np.tile(np.arange(C), n), uid=np.arange(n * C),
        corrupted=np.zeros(n * C, dtype=bool),
        meta={"world": asdict(cfg), "corruption": {"mode": "none"}},
    )
    return world, ds


@dataclass
class CorruptionSpec:
    mode: str = "none"  # none | ANI | TT | LN | Combined
    ani_sigma: float = 0.1
    ani_frac: float = 0.30
    tt_frac: float = 0.25
    tt_keep: tuple[float, float] = (0.40, 0.70)
    ln_frac: float = 0.20

    MODES = ("none", "ANI", "TT", "LN", "Combined")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        for f in (self.ani_frac, self.tt_frac, self.ln_frac):
            if not 0.0 <= f <= 1.0:
                raise ValueError("corruption fractions must lie in [0, 1]")


def _pick(n: int, frac: float, rng: np.random.Generator) -> np.ndarray:
    k = int(np.floor(frac * n + 0.5))
    return np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def apply_corruption(ds: Dataset, spec: CorruptionSpec, rng: np.random.Generator) -> Dataset:
    """Return a corrupted copy; the input dataset is never modified.

    Protocols act on whole trajectories:

    * ANI adds N(0, sigma^2) to every action of the chosen trajectories'
      chunks (observations are left as recorded).
    * TT keeps a uniform fraction of the trajectory's steps; chunks past the
      cut are dropped and the actions after the cut inside the straddling
      chunk become zeros, whose future observation is then missing.
    * LN reassigns the instruction uniformly among the other tasks.

    ``Combined`` applies all three with independent trajectory draws. A
    record is marked corrupted when any protocol changed its content; the
    per-trajectory sets are kept in ``meta['corruption']``.
    """
    out = ds.copy()
    if spec.mode == "none":
        return out
    trajs = np.unique(out.traj)
    n = len(trajs)
    n_tasks = int(out.meta.get("world", {}).get("n_tasks", int(out.task.max()) + 1))
    info = {"mode": spec.mode, "n_trajectories": n}
    keep = np.ones(len(out), dtype=bool)
    touched = set()
    if spec.mode in ("ANI", "Combined"):
        sel = trajs[_pick(n, spec.ani_frac, rng)]
        rows = np.isin(out.traj, sel)
        out.chunk[rows] += spec.ani_sigma * rng.normal(size=out.chunk[rows].shape)
        out.corrupted[rows] = True
        info["ANI"] = sel.tolist()
        touched.update(sel.tolist())
    if spec.mode in ("TT", "Combined"):
        sel = trajs[_pick(n, spec.tt_frac, rng)]
        L = out.chunk.shape[1]
        for t in sel:
            rows = np.flatnonzero(out.traj == t)
            rows = rows[np.argsort(out.chunk_index[rows])]
            total = len(rows) * L
            kept_steps = int(np.ceil(rng.uniform(*spec.tt_keep) * total))
            full, part = divmod(kept_steps, L)
            keep[rows[full + (1 if part else 0):]] = False
            if part:
                r = rows[full]
                out.chunk[r, part:] = 0.0
                out.has_future[r] = False
                out.corrupted[r] = True
        info["TT"] = sel.tolist()
        touched.update(sel.tolist())
    if spec.mode in ("LN", "Combined"):
        sel = trajs[_pick(n, spec.ln_frac, rng)]
        for t in sel:
            rows = out.traj == t
            true = int(out.task[rows][0])
            others = [k for k in range(n_tasks) if k != true]
            out.instruction[rows] = others[int(rng.integers(len(others)))]
            out.corrupted[rows] = True
        info["LN"] = sel.tolist()
        touched.update(sel.tolist())
    info["corrupted_trajectories"] = sorted(touched)
    out = out.take(np.flatnonzero(keep))
    out.meta["corruption"] = info
    return out
