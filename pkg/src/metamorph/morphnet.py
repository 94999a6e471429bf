"""Metamorphic blocks and assembly of generated + shared weights into a runnable network.

A metamorphic block keeps the reference block's input and output width but
narrows its intermediate width to ``c = round((1 - gamma) * C)``; the residual
branch is scaled by a learnable ``alpha`` (initialised to zero) before it is
added to the identity shortcut.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import functional as F
from . import resnet
from . import tensor as T
from .errors import AssemblyError, ContractError, DimensionError
from .resnet import ResNetSpec
from .tensor import Tensor


def round_half_away(x: float) -> int:
    # the epsilon absorbs representation error such as (1 - 0.7) * 10 = 3.0000000000000004
    return int(math.copysign(math.floor(abs(x) + 0.5 + 1e-9), x))


def compression_ratio(c: int, C: int) -> float:
    return 1.0 - c / C


@dataclass(frozen=True)
class BlockWidth:
    block: int
    c: int
    C: int

    @property
    def gamma(self) -> float:
        return compression_ratio(self.c, self.C)


@dataclass(frozen=True)
class NetworkConfig:
    blocks: tuple[BlockWidth, ...]

    def __post_init__(self):
        for bw in self.blocks:
            if not 1 <= bw.c <= bw.C:
                raise ContractError(f"block {bw.block}: width {bw.c} outside [1, {bw.C}]")

    @property
    def uncompressed(self) -> bool:
        return all(bw.c == bw.C for bw in self.blocks)

    def width(self, block: int) -> int:
        for bw in self.blocks:
            if bw.block == block:
                return bw.c
        raise KeyError(block)

    def gammas(self) -> dict[int, float]:
        return {bw.block: bw.gamma for bw in self.blocks}

    @property
    def block_indices(self) -> tuple[int, ...]:
        return tuple(bw.block for bw in self.blocks)

    def to_dict(self) -> dict:
        return {"blocks": [[bw.block, bw.c, bw.C] for bw in self.blocks]}

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        return cls(tuple(BlockWidth(int(b), int(c), int(C)) for b, c, C in d["blocks"]))


def instantiate_config(reference: Mapping[int, int], gamma) -> NetworkConfig:
    """Widths for ``gamma`` (a float for every block, or a per-block mapping)."""
    out = []
    for block, C in reference.items():
        g = gamma[block] if isinstance(gamma, Mapping) else gamma
        if not 0.0 <= g < 1.0:
            raise ContractError(f"compression ratio must lie in [0, 1), got {g}")
        out.append(BlockWidth(block, max(1, round_half_away((1.0 - g) * C)), C))
    return NetworkConfig(tuple(out))


@dataclass(frozen=True)
class ConfigurationPool:
    """Admissible intermediate widths ``{ceil(C/2), ..., C}`` per block."""

    reference: tuple[tuple[int, int], ...]  # (block, C)

    @classmethod
    def for_blocks(cls, reference: Mapping[int, int]) -> "ConfigurationPool":
        if not reference:
            raise ContractError("configuration pool needs at least one block")
        return cls(tuple(sorted(reference.items())))

    def widths(self, block: int) -> list[int]:
        C = dict(self.reference)[block]
        return list(range(math.ceil(C / 2), C + 1))

    def contains(self, config: NetworkConfig) -> bool:
        return all(bw.c in self.widths(bw.block) for bw in config.blocks)

    def uncompressed(self) -> NetworkConfig:
        return NetworkConfig(tuple(BlockWidth(b, C, C) for b, C in self.reference))


@dataclass
class MetamorphicBlockParams:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    alpha: Tensor | None


def metamorphic_block_forward(x: Tensor, p: MetamorphicBlockParams) -> Tensor:
    """``x + alpha * conv2(relu(conv1(x)))``; ``alpha=None`` means an unscaled branch."""
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x))
    if x.shape[1] != p.conv1_w.shape[1]:
        raise DimensionError(f"block expects {p.conv1_w.shape[1]} input channels, got {x.shape[1]}")
    if p.conv2_w.shape[0] != x.shape[1]:
        raise DimensionError("metamorphic blocks must preserve width")
    k = p.conv1_w.shape[-1]
    z = T.relu(F.conv2d(x, p.conv1_w, p.conv1_b, 1, k // 2))
    z = F.conv2d(z, p.conv2_w, p.conv2_b, 1, k // 2)
    if p.alpha is not None:
        z = T.mul(p.alpha, z)
    return T.add(x, z)


def block_layer_names(block: int) -> tuple[str, str]:
    return f"blocks.{block}.conv1", f"blocks.{block}.conv2"


def generated_shapes(spec: ResNetSpec, config: NetworkConfig) -> dict[str, tuple[int, int]]:
    """``(c_out, c_in)`` of each generated layer under ``config``."""
    out = {}
    for bw in config.blocks:
        blk = spec.blocks[bw.block]
        n1, n2 = block_layer_names(bw.block)
        out[n1] = (bw.c, blk.c_in)
        out[n2] = (blk.c_out, bw.c)
    return out


def generated_parameter_count(spec: ResNetSpec, config: NetworkConfig, kernels_only: bool = False) -> int:
    k2 = spec.k * spec.k
    total = 0
    for c_out, c_in in generated_shapes(spec, config).values():
        total += c_out * c_in * k2 + (0 if kernels_only else c_out)
    return total


@dataclass
class SharedParams:
    """Weights used unchanged by every configuration: alphas, last block, classifier."""

    alphas: dict[int, Tensor] = field(default_factory=dict)
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def from_prior(cls, prior_params: Mapping[str, np.ndarray], spec: ResNetSpec, metamorphic_blocks,
                   use_alpha: bool = True, include_last_block: bool = True) -> "SharedParams":
        names = ["fc.w", "fc.b"]
        if include_last_block:
            last = spec.blocks[-1]
            names = [n for n in prior_params if n.startswith(f"blocks.{last.index}.")] + names
        tensors = {n: Tensor(prior_params[n], requires_grad=True) for n in names}
        alphas = {b: Tensor(np.zeros(1), requires_grad=True) for b in metamorphic_blocks} if use_alpha else {}
        return cls(alphas, tensors)

    def add_block(self, block: int) -> None:
        """Register the alpha of a newly metamorphosed block (initial value 0)."""
        if block not in self.alphas:
            self.alphas[block] = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values()) + [self.alphas[b] for b in sorted(self.alphas)]

    def named(self) -> dict[str, Tensor]:
        out = dict(self.tensors)
        out.update({f"blocks.{b}.alpha": a for b, a in self.alphas.items()})
        return out


@dataclass
class AssembledNetwork:
    spec: ResNetSpec
    params: dict[str, Tensor | np.ndarray]
    metamorphic: tuple[int, ...]
    use_alpha: bool = True

    def forward(self, x, training: bool = False) -> Tensor:
        return resnet.forward(self.spec, self.params, x, training=training, metamorphic=self.metamorphic,
                              use_alpha=self.use_alpha)

    __call__ = forward

    def logits(self, images, batch_size: int = 512) -> np.ndarray:
        return resnet.predict(self.spec, self.params, images, batch_size, metamorphic=self.metamorphic,
                              use_alpha=self.use_alpha)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return resnet.count_parameters(self.spec, self.params)


def assemble_network(prior_params: Mapping[str, np.ndarray], spec: ResNetSpec, config: NetworkConfig | None,
                     generated: Mapping[str, tuple], shared: SharedParams | None = None,
                     use_alpha: bool = True, check_pool: ConfigurationPool | None = None) -> AssembledNetwork:
    """Overlay generated block weights and shared weights on a folded prior.

    Layers not generated and not shared keep their prior values. With an
    empty configuration the result is the prior network itself.
    """
    if resnet.has_batchnorm(prior_params):
        raise AssemblyError("assembly needs a BN-folded prior")
    config = config or NetworkConfig(())
    if check_pool is not None and not check_pool.contains(config):
        warnings.warn(f"configuration {config.gammas()} lies outside the training pool", stacklevel=2)
    params: dict = dict(prior_params)
    for name, (c_out, c_in) in generated_shapes(spec, config).items():
        if name not in generated:
            raise AssemblyError(f"missing generated weights for {name}")
        kernel, bias = generated[name]
        if tuple(kernel.shape) != (c_out, c_in, spec.k, spec.k) or tuple(bias.shape) != (c_out,):
            raise AssemblyError(f"{name}: generated shapes {kernel.shape}/{bias.shape} do not match config "
                                f"({c_out}, {c_in})")
        params[f"{name}.w"] = kernel
        params[f"{name}.b"] = bias
    if shared is not None:
        params.update(shared.tensors)
        if use_alpha:
            for b in config.block_indices:
                if b not in shared.alphas:
                    raise AssemblyError(f"no alpha for metamorphic block {b}")
                params[f"blocks.{b}.alpha"] = shared.alphas[b]
    elif use_alpha and config.blocks:
        missing = [b for b in config.block_indices if f"blocks.{b}.alpha" not in params]
        if missing:
            raise AssemblyError(f"no alpha for metamorphic blocks {missing}")
    return AssembledNetwork(spec, params, config.block_indices, use_alpha)
