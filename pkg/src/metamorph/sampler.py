"""Weight sampling by averaging perturbed INR generations, and standalone export."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import persist
from . import tensor as T
from .coords import PerturbationSpec
from .errors import ContractError, FormatError
from .morphnet import (AssembledNetwork, ConfigurationPool, NetworkConfig, SharedParams, assemble_network,
                       generated_shapes)
from .resnet import ResNetSpec
from .rng import RngStream

FORMAT_KIND = "metamorph.model"


@dataclass(frozen=True)
class SamplerSpec:
    K: int = 16
    perturbation: PerturbationSpec = PerturbationSpec()
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ContractError("K must be >= 1")


def sample_weights(bundle, config: NetworkConfig, spec: SamplerSpec = SamplerSpec(),
                   pool: ConfigurationPool | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Mean of ``K`` perturbed generations of every layer in ``config``.

    Returns ``{layer: (kernel, bias)}`` as float32 arrays. Pass ``i`` draws its
    perturbations from ``RngStream(seed).split(i)``, so results are fixed by
    the seed; the mean is accumulated in pass order.
    """
    if pool is not None and not pool.contains(config):
        warnings.warn(f"sampling {config.gammas()} outside the training pool", stacklevel=2)
    spec_layers = {name: shape for name, shape in _shapes(bundle, config).items()}
    perturbation = spec.perturbation if spec.perturbation.enabled else None
    base = RngStream(spec.seed)
    sums: dict[str, list[np.ndarray]] = {}
    with T.no_grad():
        for i in range(spec.K):
            rng = base.split(i) if perturbation is not None else None
            for name, shape in spec_layers.items():
                kernel, bias = bundle.generate(name, shape, perturbation, rng)
                if name not in sums:
                    sums[name] = [kernel.data.astype(np.float64), bias.data.astype(np.float64)]
                else:
                    sums[name][0] += kernel.data
                    sums[name][1] += bias.data
    return {name: ((k / spec.K).astype(np.float32), (b / spec.K).astype(np.float32)) for name, (k, b) in sums.items()}


def _shapes(bundle, config: NetworkConfig) -> dict[str, tuple[int, int]]:
    out = {}
    for bw in config.blocks:
        for j, name in enumerate((f"blocks.{bw.block}.conv1", f"blocks.{bw.block}.conv2")):
            if name not in bundle.slots:
                raise ContractError(f"no INR trained for {name}")
            slot = bundle.slots[name]
            out[name] = (bw.c, slot.C_in) if j == 0 else (slot.C_out, bw.c)
    return out


def build_network(prior_params: Mapping[str, np.ndarray], spec: ResNetSpec, config: NetworkConfig,
                  weights: Mapping[str, tuple], shared: SharedParams | None, use_alpha: bool = True
                  ) -> AssembledNetwork:
    """Assemble a plain-array network from sampled weights and shared weights."""
    net = assemble_network(prior_params, spec, config, weights, shared, use_alpha)
    return AssembledNetwork(spec, net.arrays(), net.metamorphic, use_alpha)


def export_model(weights: Mapping[str, tuple], shared: SharedParams | None, config: NetworkConfig, path,
                 prior_params: Mapping[str, np.ndarray], spec: ResNetSpec, use_alpha: bool = True,
                 meta: Mapping | None = None) -> AssembledNetwork:
    """Write a self-contained network; returns the in-memory network it encodes."""
    net = build_network(prior_params, spec, config, weights, shared, use_alpha)
    if generated_shapes(spec, config).keys() - weights.keys():
        raise ContractError("weights missing for some configured layers")
    info = dict(meta or {})
    info.update(kind=FORMAT_KIND, spec=spec.to_dict(), config=config.to_dict(), use_alpha=use_alpha,
                gammas={str(b): g for b, g in config.gammas().items()})
    persist.save(path, {k: net.params[k] for k in sorted(net.params)}, info)
    return net


def load_model(path) -> tuple[AssembledNetwork, dict]:
    tensors, meta = persist.load(path)
    if meta.get("kind") != FORMAT_KIND:
        raise FormatError(f"{path} is not an exported model")
    spec = ResNetSpec.from_dict(meta["spec"])
    config = NetworkConfig.from_dict(meta["config"])
    return AssembledNetwork(spec, tensors, config.block_indices, bool(meta["use_alpha"])), meta
