import numpy as np
import pytest

from metamorph.coords import PerturbationSpec
from metamorph.errors import ContractError, FormatError
from metamorph.morphnet import ConfigurationPool, instantiate_config
from metamorph.persist import save
from metamorph.sampler import SamplerSpec, build_network, export_model, load_model, sample_weights
from metamorph.trainer import StagePlan, Trainer

from conftest import TINY_INR

REF = {0: 8, 1: 8, 3: 16}


@pytest.fixture(scope="module")
def trainer(smoothed_prior):
    t = Trainer(smoothed_prior, StagePlan(blocks=(0, 1, 3)), TINY_INR, seed=2)
    for b in (0, 1, 3):
        t.add_block(b, None)
        t.shared.alphas[b].data[:] = 0.5
    return t


def test_spec_validation():
    with pytest.raises(ContractError):
        SamplerSpec(K=0)


def test_no_perturbation_matches_single_pass(trainer):
    cfg = instantiate_config(REF, 0.25)
    off = PerturbationSpec(enabled=False)
    one = sample_weights(trainer.bundle, cfg, SamplerSpec(K=1, perturbation=off))
    many = sample_weights(trainer.bundle, cfg, SamplerSpec(K=7, perturbation=off))
    direct = trainer.generate(cfg, None, perturb=False)
    for name in one:
        np.testing.assert_array_equal(one[name][0], direct[name][0].data)
        np.testing.assert_array_equal(one[name][1], direct[name][1].data)
        np.testing.assert_allclose(many[name][0], one[name][0], rtol=1e-6, atol=1e-7)


def test_seeded_sampling_is_deterministic(trainer):
    cfg = instantiate_config(REF, 0.5)
    a = sample_weights(trainer.bundle, cfg, SamplerSpec(K=4, seed=3))
    b = sample_weights(trainer.bundle, cfg, SamplerSpec(K=4, seed=3))
    c = sample_weights(trainer.bundle, cfg, SamplerSpec(K=4, seed=4))
    for name in a:
        np.testing.assert_array_equal(a[name][0], b[name][0])
    assert any(not np.array_equal(a[n][0], c[n][0]) for n in a)


def spread_ratio(bundle, repeats=200):
    cfg = instantiate_config({0: 8}, 0.0)
    values = {1: [], 16: []}
    for K in values:
        for r in range(repeats):
            w = sample_weights(bundle, cfg, SamplerSpec(K=K, seed=10_000 * K + r))
            values[K].append(w["blocks.0.conv1"][0][1, 2, 1, 1])
    return np.std(values[1]) / np.std(values[16])


def test_variance_scaling(trainer):
    assert abs(spread_ratio(trainer.bundle) - 4.0) <= 0.3 * 4.0


def test_averaging_commutes_with_assembly(trainer, smoothed_prior):
    cfg = instantiate_config(REF, 0.25)
    draws = [sample_weights(trainer.bundle, cfg, SamplerSpec(K=1, seed=s)) for s in range(4)]
    mean = {n: (np.mean([d[n][0] for d in draws], axis=0), np.mean([d[n][1] for d in draws], axis=0))
            for n in draws[0]}
    assembled = [build_network(smoothed_prior.params, trainer.spec, cfg, d, trainer.shared).arrays() for d in draws]
    from_mean = build_network(smoothed_prior.params, trainer.spec, cfg, mean, trainer.shared).arrays()
    for k in from_mean:
        np.testing.assert_allclose(from_mean[k], np.mean([a[k] for a in assembled], axis=0), rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("gamma", [0.0, 0.75])
def test_export_round_trip_bit_exact(trainer, smoothed_prior, tmp_path, gamma):
    cfg = instantiate_config(REF, gamma)
    weights = sample_weights(trainer.bundle, cfg, SamplerSpec(K=2))
    path = tmp_path / "m.nmck"
    net = export_model(weights, trainer.shared, cfg, path, smoothed_prior.params, trainer.spec)
    loaded, meta = load_model(path)
    x = np.random.default_rng(0).uniform(size=(64, 1, 16, 16)).astype(np.float32)
    assert loaded.logits(x).tobytes() == net.logits(x).tobytes()
    assert meta["config"] == cfg.to_dict()
    export_model(weights, trainer.shared, cfg, tmp_path / "again.nmck", smoothed_prior.params, trainer.spec)
    assert path.read_bytes() == (tmp_path / "again.nmck").read_bytes()


def test_out_of_pool_warns(trainer):
    with pytest.warns(UserWarning):
        sample_weights(trainer.bundle, instantiate_config(REF, 0.75), SamplerSpec(K=1),
                       pool=ConfigurationPool.for_blocks(REF))


def test_export_errors(trainer, smoothed_prior, tmp_path):
    cfg = instantiate_config(REF, 0.0)
    weights = sample_weights(trainer.bundle, cfg, SamplerSpec(K=1))
    with pytest.raises(OSError):
        export_model(weights, trainer.shared, cfg, tmp_path / "no" / "x.nmck", smoothed_prior.params, trainer.spec)
    save(tmp_path / "other.nmck", {"a": np.zeros(1)}, {"kind": "something-else"})
    with pytest.raises(FormatError):
        load_model(tmp_path / "other.nmck")


def test_missing_inr_rejected(smoothed_prior):
    t = Trainer(smoothed_prior, StagePlan(blocks=(0, 1)), TINY_INR)
    t.add_block(0, None)
    with pytest.raises(ContractError):
        sample_weights(t.bundle, instantiate_config({0: 8, 1: 8}, 0.0), SamplerSpec(K=1))
