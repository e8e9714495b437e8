from dataclasses import replace

import numpy as np
import pytest

from ptr_reweight.bench.evaluate import evaluate_policy
from ptr_reweight.bench.policy import ModelConfig, ToyPolicy, forward_backward
from ptr_reweight.bench.train import Trainer, TrainConfig, TrainingDiverged, train_segment, write_metrics_csv
from ptr_reweight.bench.world import CorruptionSpec, WorldConfig, apply_corruption, generate_world
from ptr_reweight.numerics import assign_flat, finite_diff_grad, flatten, make_rng
from ptr_reweight.reweighting import WeightConfig
from ptr_reweight.scorer import ScorerConfig

from conftest import TINY, tiny_setup

SC = ScorerConfig()


@pytest.fixture(scope="module")
def small_data():
    world, ds = generate_world(WorldConfig(n_traj=48, seed=5))
    return world, apply_corruption(ds, CorruptionSpec("Combined"), make_rng(5, 99))


def _quick(**kw):
    base = dict(steps=40, batch=16, nce_warmup=10, log_interval=10, lr_warmup=5)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("seed", range(20))
def test_composite_loss_gradient(seed):
    model, b, w = tiny_setup(seed)

    def total(vec):
        assign_flat(model.params(), vec)
        return forward_backward(model, b, lambda s: w, SC, 0.5, 0.3, 0.7, backward=False).total

    x0 = flatten(model.params())
    model.zero_grad()
    forward_backward(model, b, lambda s: w, SC, 0.5, 0.3, 0.7)
    g = flatten(model.grads()).copy()
    fd = finite_diff_grad(total, x0.copy(), 1e-6)
    assign_flat(model.params(), x0)
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.abs(fd).max()


@pytest.mark.parametrize("seed", range(20))
def test_flow_head_gradient(seed):
    """Action loss alone (scorer and tokenizer terms switched off)."""
    cfg = replace(TINY, lambda_ent=0.0, lambda_div=0.0)
    model, b, w = tiny_setup(seed, cfg)
    names = [n for n, _, _ in model.named_params() if n.startswith("head.")]
    params = [p for n, p, _ in model.named_params() if n in names]

    def act(vec):
        assign_flat(params, vec)
        return forward_backward(model, b, lambda s: w, SC, 0.5, 0.0, 0.0, backward=False).total

    x0 = flatten(params)
    model.zero_grad()
    forward_backward(model, b, lambda s: w, SC, 0.5, 0.0, 0.0)
    g = flatten([gr for n, _, gr in model.named_params() if n in names]).copy()
    fd = finite_diff_grad(act, x0.copy(), 1e-6)
    assign_flat(params, x0)
    assert np.max(np.abs(g - fd)) <= 1e-4 * np.abs(fd).max()


def test_flow_loss_examples():
    model, b, w = tiny_setup(0, replace(TINY, lambda_ent=0.0, lambda_div=0.0))
    for p in model.head.params():
        p[...] = 0.0
    res = forward_backward(model, b, lambda s: np.ones(len(w)), SC, 0.5, 0.0, 0.0, backward=False)
    a = model.normalize(b.chunk).reshape(len(w), -1)
    assert np.allclose(res.per_sample_act, np.sum((a - b.eps) ** 2, axis=1), rtol=0, atol=1e-12)
    # a head that outputs the target velocity exactly has zero loss
    target = a - b.eps
    last = model.head.params()[-1]
    model.head.params()[-2][...] = 0.0
    for i in range(len(w)):
        last[...] = target[i]
        assert forward_backward(model, b, lambda s: np.ones(len(w)), SC, 0.5, 0.0, 0.0,
                                backward=False).per_sample_act[i] == pytest.approx(0.0, abs=1e-24)


def test_action_loss_leaves_scorer_untouched():
    model, b, w = tiny_setup(3, replace(TINY, lambda_ent=0.0, lambda_div=0.0))
    model.zero_grad()
    forward_backward(model, b, lambda s: w, SC, 0.5, 0.0, 0.0)
    scorer = set(model.scorer_param_names())
    assert scorer and all(not np.any(g) for n, _, g in model.named_params() if n in scorer)
    assert any(np.any(g) for n, _, g in model.named_params() if n.startswith("head."))


def test_weights_only_rescale_per_sample_gradients():
    model, b, _ = tiny_setup(4, replace(TINY, lambda_ent=0.0, lambda_div=0.0))
    rng = make_rng(1)
    w1, w2 = rng.uniform(0.25, 4, 6), rng.uniform(0.25, 4, 6)

    def grad(w):
        model.zero_grad()
        forward_backward(model, b, lambda s: w, SC, 0.5, 0.0, 0.0)
        return flatten(model.grads()) * np.sum(w)

    lhs = grad(w1 + w2)
    rhs = grad(w1) + grad(w2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(np.abs(lhs).max(), 1.0)


def test_total_loss_is_sum_of_components():
    model, b, w = tiny_setup(5)
    res = forward_backward(model, b, lambda s: w, SC, 0.5, 0.05, 0.25, backward=False)
    assert abs(res.total - (res.act + 0.05 * res.idl + 0.25 * res.rank + res.tok)) <= 1e-12


def test_warmup_forces_uniform_weights(small_data):
    _, ds = small_data
    tr = Trainer(ds, _quick(nce_warmup=1000))
    for _ in range(5):
        res = tr.step()["result"]
        assert np.all(res.norm_weights == 1.0 / len(res.norm_weights))


def test_post_warmup_weights_move(small_data):
    _, ds = small_data
    tr = Trainer(ds, _quick(steps=30, nce_warmup=5))
    tr.run()
    fw = tr.final_weights()
    assert np.unique(np.round(fw["mixed"][fw["valid"]], 9)).size > 1
    assert np.all(fw["mixed"][~fw["valid"]] == 1.0)


def test_alpha_zero_matches_uniform_training(small_data):
    _, ds = small_data
    a = Trainer(ds, _quick(weight=WeightConfig(alpha=0.0)))
    b = Trainer(ds, _quick(reweight=False))
    a.run()
    b.run()
    assert all(np.array_equal(p, q) for p, q in zip(a.model.params(), b.model.params()))


def test_teacher_follows_online_encoder(small_data):
    _, ds = small_data
    tr = Trainer(ds, _quick())
    assert all(np.array_equal(t, o) for t, o in zip(tr.model.teacher.params(), tr.model.obs_enc.params()))
    tr.step()
    assert not all(np.array_equal(t, o) for t, o in zip(tr.model.teacher.params(), tr.model.obs_enc.params()))
    gap0 = max(np.abs(t - o).max() for t, o in zip(tr.model.teacher.params(), tr.model.obs_enc.params()))
    for _ in range(5000):
        tr.model.update_teacher(0.999)
    gap = max(np.abs(t - o).max() for t, o in zip(tr.model.teacher.params(), tr.model.obs_enc.params()))
    assert gap <= gap0 * 0.999 ** 5000 * (1 + 1e-6)


def test_non_finite_loss_aborts(small_data):
    _, ds = small_data
    tr = Trainer(ds, _quick())
    tr.model.head.params()[0][0, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        tr.step()


def test_checkpoint_resume_is_exact(tmp_path, small_data):
    _, ds = small_data
    full = Trainer(ds, _quick())
    full.run()
    part = Trainer(ds, _quick())
    part.run(17)
    part.save_checkpoint(tmp_path / "ck")
    resumed = Trainer(ds, _quick())
    resumed.load_checkpoint(tmp_path / "ck")
    assert resumed.step_idx == 17
    resumed.run()
    assert all(np.array_equal(p, q) for p, q in zip(full.model.params(), resumed.model.params()))
    assert full.history == resumed.history
    with pytest.raises(ValueError):
        Trainer(ds, _quick(lr=5e-4)).load_checkpoint(tmp_path / "ck")


def test_training_is_deterministic_and_writes_metrics(tmp_path, small_data):
    _, ds = small_data
    a = train_segment(ds, _quick(steps=20), tmp_path / "run")
    b = Trainer(ds, _quick(steps=20))
    b.run()
    assert a.history == b.history
    text = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert text[0].startswith("step,lr,total") and len(text) == 1 + len(a.history)
    write_metrics_csv(a.history, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_text() == (tmp_path / "run" / "metrics.csv").read_text()


def test_evaluation_is_deterministic_and_ignores_corruption():
    world, ds = generate_world(WorldConfig(n_traj=48, seed=2))
    policy = ToyPolicy(ModelConfig(), make_rng(0))
    policy.set_action_stats(ds.chunk)
    r1 = evaluate_policy(policy, world, 50, seed=1)
    apply_corruption(ds, CorruptionSpec("Combined"), make_rng(3))
    r2 = evaluate_policy(policy, world, 50, seed=1)
    assert r1 == r2
    assert r1.success_rate <= 0.1  # untrained policy is near chance
