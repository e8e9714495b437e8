import numpy as np
import pytest

from ptr_reweight.bench.evaluate import evaluate_expert
from ptr_reweight.bench.world import CorruptionSpec, Dataset, WorldConfig, apply_corruption, generate_world
from ptr_reweight.numerics import make_rng

SMALL = WorldConfig(n_traj=60)


@pytest.fixture(scope="module")
def small_world():
    return generate_world(SMALL)


def test_shapes_and_record_fields(small_world):
    _, ds = small_world
    n = SMALL.n_traj * SMALL.chunks_per_traj
    assert len(ds) == n
    assert ds.obs.shape == (n, 16) and ds.state.shape == (n, 4) and ds.chunk.shape == (n, 16, 2)
    rec = ds.record(0)
    assert rec["quality_label"] == "clean" and set(rec) >= {"obs", "state", "instruction", "chunk", "delta"}
    missing = int(np.flatnonzero(~ds.has_future)[0])
    assert ds.record(missing)["future_obs"] is None


def test_zero_noise_zero_offset_sources_agree():
    cfg = WorldConfig(n_traj=200, offset_scale=0.0, expert_noise=0.0, speed_jitter=0.0, heading_jitter=0.0,
                      start_radius=0.0, future_noise=0.0)
    _, ds = generate_world(cfg)
    for task in range(cfg.n_tasks):
        rows = [ds.chunk[idx] for idx in ds.trajectories() if ds.task[idx[0]] == task]
        srcs = {int(ds.source[idx[0]]) for idx in ds.trajectories() if ds.task[idx[0]] == task}
        assert len(srcs) > 1
        assert all(np.array_equal(r, rows[0]) for r in rows)


def test_sources_need_different_actions():
    w, _ = generate_world(SMALL)
    pos = np.zeros((3, 2))
    goal = np.tile(w.goals[0], (3, 1))
    chunks = w.expert_chunk(pos, goal, np.arange(3), 0, None, 0.0)
    assert not np.allclose(chunks[0], chunks[1])
    ends = [w.execute(pos[i:i + 1], chunks[i:i + 1], np.array([i]))[0] for i in range(3)]
    assert np.allclose(ends[0], ends[1]) and np.allclose(ends[1], ends[2])


def test_generation_is_deterministic(tmp_path):
    _, a = generate_world(SMALL)
    _, b = generate_world(SMALL)
    for k in Dataset.FIELDS:
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()
    a.save(tmp_path / "ds")
    c = Dataset.load(tmp_path / "ds")
    assert all(np.array_equal(getattr(a, k), getattr(c, k)) for k in Dataset.FIELDS)
    assert c.meta["world"]["n_traj"] == 60


def test_expert_reaches_goal():
    w, _ = generate_world(WorldConfig())
    res = evaluate_expert(w, 400, seed=3, noise=WorldConfig().expert_noise)
    assert res.success_rate >= 0.99
    clean = evaluate_expert(w, 400, seed=3)
    assert clean.mean_final_distance < 0.05 and clean.success_rate == 1.0


def test_corruption_none_is_identity(small_world):
    _, ds = small_world
    out = apply_corruption(ds, CorruptionSpec("none"), make_rng(0))
    assert all(np.array_equal(getattr(ds, k), getattr(out, k)) for k in Dataset.FIELDS)


def test_ani_count_and_content(small_world):
    _, ds = small_world
    out = apply_corruption(ds, CorruptionSpec("ANI"), make_rng(1))
    sel = out.meta["corruption"]["ANI"]
    assert len(sel) == round(0.30 * SMALL.n_traj)
    rows = np.isin(ds.traj, sel)
    assert np.array_equal(out.corrupted, rows)
    assert np.array_equal(out.obs, ds.obs) and np.array_equal(out.chunk[~rows], ds.chunk[~rows])
    noise = (out.chunk[rows] - ds.chunk[rows]).ravel()
    assert abs(noise.std() - 0.1) < 0.01


def test_truncation_keeps_prefix(small_world):
    _, ds = small_world
    out = apply_corruption(ds, CorruptionSpec("TT"), make_rng(2))
    sel = out.meta["corruption"]["TT"]
    assert len(sel) == round(0.25 * SMALL.n_traj)
    total = SMALL.chunks_per_traj * SMALL.chunk_len
    for t in sel:
        kept = np.flatnonzero(out.traj == t)
        steps = np.count_nonzero(np.any(out.chunk[kept] != 0, axis=2))
        assert 0.40 * total - 1 <= steps <= 0.70 * total + 1
        assert list(out.chunk_index[kept]) == list(range(len(kept)))
    untouched = ~np.isin(ds.traj, sel)
    assert np.count_nonzero(np.isin(out.traj, np.unique(ds.traj[untouched]))) == np.count_nonzero(untouched)


def test_label_noise_changes_instruction_only(small_world):
    _, ds = small_world
    out = apply_corruption(ds, CorruptionSpec("LN"), make_rng(3))
    sel = out.meta["corruption"]["LN"]
    assert len(sel) == round(0.20 * SMALL.n_traj)
    rows = np.isin(ds.traj, sel)
    assert np.all(out.instruction[rows] != ds.task[rows])
    assert np.array_equal(out.instruction[~rows], ds.instruction[~rows])
    assert np.array_equal(out.task, ds.task) and np.array_equal(out.chunk, ds.chunk)


def test_combined_marks_union(small_world):
    _, ds = small_world
    before = ds.chunk.copy()
    out = apply_corruption(ds, CorruptionSpec("Combined"), make_rng(4))
    info = out.meta["corruption"]
    union = set(info["ANI"]) | set(info["TT"]) | set(info["LN"])
    assert set(info["corrupted_trajectories"]) == union
    assert set(np.unique(out.traj[out.corrupted])) <= union
    assert set(info["ANI"]) | set(info["LN"]) <= set(np.unique(out.traj[out.corrupted]))
    assert np.array_equal(ds.chunk, before) and not ds.corrupted.any()


def test_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("blur")
    with pytest.raises(ValueError):
        CorruptionSpec("ANI", ani_frac=1.5)
