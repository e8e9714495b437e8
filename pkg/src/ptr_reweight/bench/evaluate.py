"""Closed-loop evaluation on the clean world."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import make_rng
from .policy import ToyPolicy
from .world import World

SUCCESS_RADIUS = 0.1


@dataclass
class EvalResult:
    success_rate: float
    mean_final_distance: float
    chunk_mse: float
    n_episodes: int

    def as_dict(self) -> dict:
        return {"success_rate": self.success_rate, "mean_final_distance": self.mean_final_distance,
                "chunk_mse": self.chunk_mse, "n_episodes": self.n_episodes}


def _episodes(world: World, n: int, rng: np.random.Generator):
    cfg = world.cfg
    task = rng.integers(0, cfg.n_tasks, size=n)
    source = rng.integers(0, cfg.n_sources, size=n)
    return world.sample_starts(n, rng), task, source


def evaluate_policy(policy: ToyPolicy, world: World, n_episodes: int = 200, seed: int = 0,
                    n_denoise: int = 4) -> EvalResult:
    """Roll out ``policy`` for the full horizon; success means ending within 0.1 of the goal.

    ``chunk_mse`` compares each sampled chunk with the expert chunk at the
    same visited state.
    """
    rng = make_rng(seed, 7001)
    pos, task, source = _episodes(world, n_episodes, rng)
    goal = world.goals[task]
    vel = np.zeros_like(pos)
    blur = np.zeros_like(pos)
    z = np.broadcast_to(policy.tokenizer.z_init, (n_episodes,) + policy.tokenizer.z_init.shape).copy()
    sq = []
    C = world.cfg.chunks_per_traj
    for c in range(C):
        obs = world.observe(pos, blur, c / C, source)
        state = np.concatenate([pos, vel], axis=1)
        chunk, h = policy.sample_chunk(obs, task, z, state, rng, n_denoise)
        expert = world.expert_chunk(pos, goal, source, c, None, 0.0)
        sq.append(np.mean((chunk - expert) ** 2))
        if policy.cfg.use_belief:
            z = policy.next_tokens(h, chunk, state)
        pos, vel, blur = world.execute(pos, chunk, source)
    dist = np.linalg.norm(pos - goal, axis=1)
    return EvalResult(float(np.mean(dist < SUCCESS_RADIUS)), float(dist.mean()), float(np.mean(sq)), n_episodes)


def evaluate_expert(world: World, n_episodes: int = 200, seed: int = 0, noise: float = 0.0) -> EvalResult:
    """The generating controller, run through the same harness."""
    rng = make_rng(seed, 7001)
    pos, task, source = _episodes(world, n_episodes, rng)
    goal = world.goals[task]
    for c in range(world.cfg.chunks_per_traj):
        chunk = world.expert_chunk(pos, goal, source, c, rng, noise, jitter=True)
        pos, _, _ = world.execute(pos, chunk, source)
    dist = np.linalg.norm(pos - goal, axis=1)
    return EvalResult(float(np.mean(dist < SUCCESS_RADIUS)), float(dist.mean()), 0.0, n_episodes)
