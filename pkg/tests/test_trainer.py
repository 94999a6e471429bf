import numpy as np
import pytest

from metamorph import tensor as T
from metamorph.errors import ContractError, TrainingError
from metamorph.morphnet import ConfigurationPool, instantiate_config
from metamorph.rng import RngStream
from metamorph.tensor import Tensor
from metamorph.trainer import (Ablation, LossWeights, StagePlan, Trainer, baseline_plan, compute_loss, lr_schedule,
                               plan_from_dict, plan_to_dict, sample_config)

from conftest import TINY_INR


def _plan(**kw):
    base = dict(blocks=(0, 1, 3), epochs=1, acc_steps=3, warmup_epochs=0.5, batch_size=16)
    base.update(kw)
    return StagePlan(**base)


def test_lr_schedule_values():
    assert lr_schedule(0) == 0.0
    assert lr_schedule(10) == pytest.approx(4e-4)
    assert lr_schedule(20) == pytest.approx(8e-4)
    assert lr_schedule(35) == pytest.approx(8e-4)
    assert lr_schedule(3, warmup_epochs=0) == 8e-4
    with pytest.raises(ContractError):
        lr_schedule(-1)


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.task, w.recon, w.reg) == (100.0, 1.0, 1e-3)
    with pytest.raises(ContractError):
        LossWeights(task=-1)


def test_loss_perfect_prediction_and_prior_match():
    theta = [np.array([3.0, -4.0])]
    logits = Tensor(np.array([[60.0, -60.0]]))
    cfg = instantiate_config({0: 4}, 0.0)
    loss, terms = compute_loss(logits, [0], [Tensor(theta[0])], theta, cfg)
    assert terms["recon"] == 0.0
    assert loss.item() == pytest.approx(1e-3 * 5.0, rel=1e-5)


def test_loss_reconstruction_gated_by_config():
    theta = Tensor(np.array([1.0, 1.0]))
    prior = [np.zeros(2)]
    logits = Tensor(np.zeros((1, 2)))
    full, t_full = compute_loss(logits, [0], [theta], prior, instantiate_config({0: 4}, 0.0))
    half, t_half = compute_loss(logits, [0], [theta], prior, instantiate_config({0: 4}, 0.5))
    assert t_full["recon"] == pytest.approx(2.0) and t_half["recon"] == 0.0
    assert full.item() - half.item() == pytest.approx(2.0, rel=1e-5)


def test_loss_two_class_task_term():
    _, terms = compute_loss(Tensor(np.zeros((1, 2))), [0], [], None, instantiate_config({0: 4}, 0.5))
    assert terms["task"] == pytest.approx(0.6931, abs=1e-4)
    assert 100 * terms["task"] == pytest.approx(69.31, abs=1e-2)


def test_loss_shape_mismatch():
    with pytest.raises(ContractError):
        compute_loss(Tensor(np.zeros((1, 2))), [0], [Tensor(np.zeros(3))], [np.zeros(2)],
                     instantiate_config({0: 4}, 0.0))


def test_sample_config_coverage():
    pool = ConfigurationPool.for_blocks({0: 8, 3: 16})
    rng = RngStream(0)
    seen = {sample_config(pool, rng.split(i), shared_gamma=False).width(3) for i in range(10_000)}
    assert seen == set(range(8, 17))
    small = ConfigurationPool.for_blocks({0: 2})
    assert {sample_config(small, rng.split(i)).width(0) for i in range(100)} == {1, 2}


def test_sample_config_shared_gamma():
    pool = ConfigurationPool.for_blocks({0: 8, 1: 8, 3: 16})
    for i in range(200):
        cfg = sample_config(pool, RngStream(i))
        assert pool.contains(cfg)
        g = cfg.gammas()
        assert g[0] == g[1]
        assert abs(g[0] - g[3]) <= 1 / 16 + 1e-12


def test_plan_contracts():
    with pytest.raises(ContractError):
        StagePlan(blocks=(3, 0))
    with pytest.raises(ContractError):
        StagePlan(blocks=(0,), acc_steps=0)
    plan = _plan()
    assert plan_from_dict(plan_to_dict(plan)) == plan
    assert plan.stages() == [(0,), (1,), (3,)]
    flat = _plan(ablation=Ablation(incremental=False))
    assert flat.stages() == [(0, 1, 3)] and flat.stage_epochs() == 3
    assert baseline_plan(plan).effective_acc == 1


def test_trainer_rejects_bad_blocks(smoothed_prior):
    with pytest.raises(ContractError):
        Trainer(smoothed_prior, _plan(blocks=(2,)), TINY_INR)


def _trainer(prior, **kw):
    t = Trainer(prior, _plan(**kw), TINY_INR, seed=3)
    for b in t.plan.blocks:
        t.add_block(b, None)
    return t


def _window(tiny_data, n):
    return [(tiny_data.images[i * 8:(i + 1) * 8], tiny_data.labels[i * 8:(i + 1) * 8]) for i in range(n)]


def test_accumulated_gradient_equals_mean_loss_gradient(smoothed_prior, tiny_data):
    t = _trainer(smoothed_prior)
    for a in t.shared.alphas.values():
        a.data[:] = 0.4
    pool = ConfigurationPool.for_blocks({0: 8, 1: 8, 3: 16})
    configs = [pool.uncompressed(), instantiate_config(dict(pool.reference), 0.25),
               instantiate_config(dict(pool.reference), 0.5)]
    batches = _window(tiny_data, 3)
    rng = RngStream(9)
    acc, _ = t.accumulate_gradients(configs, batches, rng, shared_lr=None)
    params = t.inr_parameters()
    for p in params:
        p.grad = None
    total = None
    for k, (cfg, (x, y)) in enumerate(zip(configs, batches)):
        loss, _, _ = t.config_loss(cfg, x, y, rng.split(k))
        total = loss if total is None else T.add(total, loss)
    T.scale(total, 1 / 3).backward()
    for a, p in zip(acc, params):
        ref = p.grad if p.grad is not None else np.zeros_like(a)
        np.testing.assert_allclose(a, ref, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(ref).max()))


def test_single_config_window_is_plain_step(smoothed_prior, tiny_data):
    a, b = _trainer(smoothed_prior), _trainer(smoothed_prior)
    cfg = [instantiate_config({0: 8, 1: 8, 3: 16}, 0.25)]
    batch = _window(tiny_data, 1)
    a.accumulate_step(cfg, batch, RngStream(1), lr=1e-3, shared_lr=1e-3)
    loss, _, _ = b.config_loss(cfg[0], *batch[0], RngStream(1).split(0))
    loss.backward()
    for opt in b.shared_opts.values():
        opt.step(lr=1e-3)
    for opt in b.inr_opts.values():
        opt.step(lr=1e-3)
    for x, y in zip(a.inr_parameters() + a.shared_parameters(), b.inr_parameters() + b.shared_parameters()):
        np.testing.assert_array_equal(x.data, y.data)


def test_empty_window_rejected(smoothed_prior):
    with pytest.raises(ContractError):
        _trainer(smoothed_prior).accumulate_step([], [], RngStream(0))


def test_window_always_contains_uncompressed(smoothed_prior):
    t = _trainer(smoothed_prior)
    for i in range(20):
        configs = t.window_configs(4, RngStream(i))
        assert configs[0].uncompressed
    t_plain = _trainer(smoothed_prior, ablation=Ablation(grad_accum=False))
    assert t_plain.plan.effective_acc == 1


def _run(prior, data, **kw):
    t = Trainer(prior, _plan(**kw), TINY_INR, seed=5)
    t.train(data)
    return t


def test_fixed_seed_reproduces_training(smoothed_prior, tiny_data):
    a, b = _run(smoothed_prior, tiny_data), _run(smoothed_prior, tiny_data)
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    sa, sb = a.state_arrays(), b.state_arrays()
    assert sa.keys() == sb.keys()
    for k in sa:
        np.testing.assert_array_equal(sa[k], sb[k])


def test_stage_scope_grows_block_by_block(smoothed_prior, tiny_data):
    t = Trainer(smoothed_prior, _plan(), TINY_INR, seed=1)
    prior_block3 = smoothed_prior.params["blocks.3.conv1.w"].copy()
    t.train_stage((0,), tiny_data)
    assert set(t.bundle.entries) == {"blocks.0.conv1", "blocks.0.conv2"}
    assert set(t.shared.alphas) == {0}
    np.testing.assert_array_equal(smoothed_prior.params["blocks.3.conv1.w"], prior_block3)
    t.train_stage((1,), tiny_data)
    assert set(t.bundle.entries) == {"blocks.0.conv1", "blocks.0.conv2", "blocks.1.conv1", "blocks.1.conv2"}
    assert not any(n.startswith(("blocks.0.", "blocks.1.")) for n in t.shared.tensors)


def test_pre_init_copies_predecessor(smoothed_prior, tiny_data):
    t = Trainer(smoothed_prior, _plan(), TINY_INR, seed=1)
    t.train_stage((0,), tiny_data, epochs=1)
    t.add_block(1, predecessor=0)
    for name in ("conv1", "conv2"):
        old = t.bundle.entries[f"blocks.0.{name}"].parameters()
        new = t.bundle.entries[f"blocks.1.{name}"].parameters()
        for p, q in zip(old, new):
            np.testing.assert_array_equal(p.data, q.data)
            assert p is not q
    cold = Trainer(smoothed_prior, _plan(ablation=Ablation(pre_init=False)), TINY_INR, seed=1)
    cold.train_stage((0,), tiny_data, epochs=1)
    cold.train_stage((1,), tiny_data, epochs=0)
    a = cold.bundle.entries["blocks.0.conv1"].kernel.weights[0].data
    b = cold.bundle.entries["blocks.1.conv1"].kernel.weights[0].data
    assert not np.array_equal(a, b)


def test_stage_start_matches_bypassed_network(smoothed_prior, tiny_data):
    from metamorph import resnet
    t = Trainer(smoothed_prior, _plan(), TINY_INR, seed=1)
    t.add_block(0, None)
    cfg = instantiate_config({0: 8}, 0.0)
    net = t.assemble(cfg, t.generate(cfg, RngStream(0)))
    x = tiny_data.images[:16]
    np.testing.assert_array_equal(net.logits(x), resnet.predict(t.spec, smoothed_prior.params, x, bypass=(0,)))


def test_non_incremental_budget_parity(smoothed_prior, tiny_data):
    inc = _run(smoothed_prior, tiny_data)
    flat = _run(smoothed_prior, tiny_data, ablation=Ablation(incremental=False))
    assert inc.iterations == flat.iterations
    assert inc.inr_updates == flat.inr_updates
    assert len(flat.history) == 3 and {r.stage for r in flat.history} == {0}


def test_all_ablations_give_baseline_recipe(smoothed_prior, tiny_data):
    t = _run(smoothed_prior, tiny_data, ablation=Ablation(False, False, False, False, False))
    assert all(pair.legacy for pair in t.bundle.entries.values())
    assert t.shared.alphas == {}
    assert t.plan.effective_acc == 1
    assert t.inr_updates == t.iterations
    assert t.stage_index == 0


def test_ablation_flags_change_only_their_mechanism():
    full = plan_to_dict(_plan())
    for field in ("incremental", "alpha_scaling", "grad_accum", "pre_init", "disentangle"):
        variant = plan_to_dict(_plan(ablation=Ablation(**{field: False})))
        diff = {k for k in full if full[k] != variant[k]}
        assert diff == {"ablation"}
        assert {k for k in full["ablation"] if full["ablation"][k] != variant["ablation"][k]} == {field}


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises_with_checkpoint(smoothed_prior, tiny_data):
    t = Trainer(smoothed_prior, _plan(), TINY_INR, seed=1)
    t.train_stage((0,), tiny_data, epochs=1)
    healthy = t.state_arrays()
    t.inr_opts["blocks.0.conv1"].params[0].data[:] = 1e30
    with pytest.raises(TrainingError) as info:
        t.train_stage((1,), tiny_data, epochs=1)
    assert info.value.checkpoint is not None
    assert set(healthy) <= set(info.value.checkpoint)


def test_metrics_records(smoothed_prior, tiny_data):
    seen = []
    t = Trainer(smoothed_prior, _plan(), TINY_INR, seed=1, on_epoch=seen.append)
    t.train(tiny_data)
    assert len(seen) == 3 and [r.stage for r in seen] == [0, 1, 2]
    for r in seen:
        assert 0 <= r.accuracy <= 1 and 0 <= r.gamma <= 0.5 and np.isfinite(r.loss)
