import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metamorph import resnet
from metamorph import tensor as T
from metamorph.errors import AssemblyError, ContractError, DimensionError
from metamorph.functional import dirac_kernel
from metamorph.morphnet import (ConfigurationPool, MetamorphicBlockParams, NetworkConfig, SharedParams,
                                assemble_network, compression_ratio, generated_parameter_count, generated_shapes,
                                instantiate_config, metamorphic_block_forward, round_half_away)
from metamorph.prior import fold_network
from metamorph.resnet import ResNetSpec
from metamorph.tensor import Tensor

from test_prior import random_bn_network

SPEC = ResNetSpec()
REF = {0: 8, 1: 8, 3: 16}


def _folded():
    return fold_network(random_bn_network(11)).params


def _block_params(c_in, c, seed=0, alpha=0.0):
    g = np.random.default_rng(seed)
    return MetamorphicBlockParams(Tensor(g.normal(size=(c, c_in, 3, 3))), Tensor(g.normal(size=c)),
                                  Tensor(g.normal(size=(c_in, c, 3, 3))), Tensor(g.normal(size=c_in)),
                                  Tensor([alpha]))


def test_instantiate_examples():
    assert instantiate_config({0: 8}, 0.25).width(0) == 6
    cfg = instantiate_config({0: 8, 3: 16}, 0.0)
    assert cfg.uncompressed and cfg.width(3) == 16
    assert compression_ratio(8, 16) == 0.5


def test_instantiate_rounding_and_clamp():
    assert round_half_away(2.5) == 3 and round_half_away(-2.5) == -3
    assert instantiate_config({0: 10}, 0.7).width(0) == 3
    assert instantiate_config({0: 2}, 0.75).width(0) == 1  # 0.5 rounds up
    assert instantiate_config({0: 8}, 0.95).width(0) == 1  # 0.4 clamps to 1
    for g in (-0.1, 1.0):
        with pytest.raises(ContractError):
            instantiate_config({0: 8}, g)


def test_config_invariants():
    with pytest.raises(ContractError):
        NetworkConfig.from_dict({"blocks": [[0, 9, 8]]})
    cfg = instantiate_config(REF, {0: 0.0, 1: 0.5, 3: 0.25})
    assert not cfg.uncompressed
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


def test_pool():
    pool = ConfigurationPool.for_blocks({0: 64, 1: 2, 2: 7})
    assert pool.widths(0) == list(range(32, 65)) and len(pool.widths(0)) == 33
    assert pool.widths(1) == [1, 2]
    assert pool.widths(2) == [4, 5, 6, 7]
    assert pool.contains(pool.uncompressed())
    with pytest.raises(ContractError):
        ConfigurationPool.for_blocks({})


def test_block_alpha_zero_is_identity():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 5, 5)))
    y = metamorphic_block_forward(x, _block_params(4, 2))
    np.testing.assert_array_equal(y.data, x.data)


def test_block_zero_kernels():
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 5, 5)))
    p = MetamorphicBlockParams(Tensor(np.zeros((3, 4, 3, 3))), Tensor(np.zeros(3)), Tensor(np.zeros((4, 3, 3, 3))),
                               Tensor(np.zeros(4)), Tensor([1.0]))
    np.testing.assert_array_equal(metamorphic_block_forward(x, p).data, x.data)


def test_block_hand_example():
    p = MetamorphicBlockParams(Tensor(dirac_kernel(1)), Tensor([0.0]), Tensor(dirac_kernel(1)), Tensor([0.0]),
                               Tensor([0.5]))
    assert metamorphic_block_forward(Tensor(np.full((1, 1, 1, 1), 2.0)), p).data.item() == 3.0


def test_block_width_mismatch():
    with pytest.raises(DimensionError):
        metamorphic_block_forward(Tensor(np.zeros((1, 3, 4, 4))), _block_params(4, 2))


def test_parameter_count_scales_with_width():
    full = instantiate_config({3: 16}, 0.0)
    half = instantiate_config({3: 16}, 0.5)
    k_full = generated_parameter_count(SPEC, full, kernels_only=True)
    k_half = generated_parameter_count(SPEC, half, kernels_only=True)
    assert k_full == 16 * 16 * 9 * 2
    assert k_half == k_full * 0.5


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.95), st.floats(0, 0.95))
def test_parameter_count_monotone(g1, g2):
    lo, hi = sorted((g1, g2))
    assert generated_parameter_count(SPEC, instantiate_config(REF, hi)) <= \
        generated_parameter_count(SPEC, instantiate_config(REF, lo))


def _generated(cfg, seed=0):
    g = np.random.default_rng(seed)
    return {n: (Tensor(g.normal(size=(co, ci, 3, 3)) * 0.1), Tensor(g.normal(size=co) * 0.1))
            for n, (co, ci) in generated_shapes(SPEC, cfg).items()}


@pytest.mark.parametrize("gamma", [0.0, 0.25, 0.5, 0.75])
def test_interface_shapes_stable(gamma):
    prior = _folded()
    cfg = instantiate_config(REF, gamma)
    shared = SharedParams.from_prior(prior, SPEC, cfg.block_indices)
    for b in cfg.block_indices:
        shared.alphas[b].data[:] = 0.3
    net = assemble_network(prior, SPEC, cfg, _generated(cfg), shared)
    out = net(np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32))
    assert out.shape == (3, 4) and np.isfinite(out.data).all()


def test_empty_config_is_prior():
    prior = _folded()
    x = np.random.default_rng(0).uniform(size=(8, 1, 16, 16)).astype(np.float32)
    net = assemble_network(prior, SPEC, None, {})
    np.testing.assert_array_equal(net.logits(x), resnet.predict(SPEC, prior, x))


def test_fresh_alpha_equals_bypassed_network():
    prior = _folded()
    cfg = instantiate_config(REF, 0.0)
    shared = SharedParams.from_prior(prior, SPEC, cfg.block_indices)
    net = assemble_network(prior, SPEC, cfg, _generated(cfg), shared)
    x = np.random.default_rng(0).uniform(size=(8, 1, 16, 16)).astype(np.float32)
    bypassed = resnet.predict(SPEC, prior, x, bypass=cfg.block_indices)
    np.testing.assert_array_equal(net.logits(x), bypassed)


def test_gradient_reaches_generated_and_shared():
    prior = _folded()
    cfg = instantiate_config({0: 8}, 0.5)
    shared = SharedParams.from_prior(prior, SPEC, (0,))
    shared.alphas[0].data[:] = 0.5
    gen = {n: (Tensor(k.data, requires_grad=True), Tensor(b.data, requires_grad=True))
           for n, (k, b) in _generated(cfg).items()}
    net = assemble_network(prior, SPEC, cfg, gen, shared)
    T.tsum(net(np.ones((2, 1, 16, 16), np.float32))).backward()
    assert all(k.grad is not None and b.grad is not None for k, b in gen.values())
    assert shared.alphas[0].grad is not None and shared.tensors["fc.w"].grad is not None


def test_shared_includes_last_block_by_default():
    prior = _folded()
    with_last = SharedParams.from_prior(prior, SPEC, ())
    without = SharedParams.from_prior(prior, SPEC, (), include_last_block=False)
    assert any(n.startswith("blocks.5.") for n in with_last.tensors)
    assert set(without.tensors) == {"fc.w", "fc.b"}


def test_assembly_errors_and_warning():
    prior = _folded()
    cfg = instantiate_config(REF, 0.5)
    gen = _generated(cfg)
    shared = SharedParams.from_prior(prior, SPEC, cfg.block_indices)
    with pytest.raises(AssemblyError):
        assemble_network(prior, SPEC, cfg, {k: v for k, v in gen.items() if "conv2" not in k}, shared)
    with pytest.raises(AssemblyError):
        assemble_network(prior, SPEC, instantiate_config(REF, 0.25), gen, shared)
    with pytest.raises(AssemblyError):
        assemble_network(random_bn_network(0).params, SPEC, cfg, gen, shared)
    with pytest.raises(AssemblyError):
        assemble_network(prior, SPEC, cfg, gen, SharedParams.from_prior(prior, SPEC, ()))
    far = instantiate_config(REF, 0.75)
    with pytest.warns(UserWarning):
        assemble_network(prior, SPEC, far, _generated(far), shared, check_pool=ConfigurationPool.for_blocks(REF))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assemble_network(prior, SPEC, cfg, gen, shared, check_pool=ConfigurationPool.for_blocks(REF))


def test_candidates_skip_projection_and_last_block():
    assert SPEC.metamorphic_candidates == (0, 1, 3)
