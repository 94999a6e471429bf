"""Small CIFAR-style residual network used as the prior and as the assembly skeleton.

Parameters live in a flat ``{name: array}`` mapping. Names::

    stem.w, stem.b, stem.bn.{scale,shift,mean,var}
    blocks.<i>.conv1.{w,b}, blocks.<i>.bn1.*, blocks.<i>.conv2.{w,b}, blocks.<i>.bn2.*
    blocks.<i>.proj.{w,b}, blocks.<i>.bnp.*        (projection-shortcut blocks only)
    blocks.<i>.alpha                               (metamorphic blocks only)
    fc.w [classes, C], fc.b

A standard block computes ``shortcut(x) + bn2(conv2(relu(bn1(conv1(x)))))``;
after folding the BN terms disappear. The head is relu -> global average
pool -> linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Mapping

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import AssemblyError, ContractError
from .tensor import Tensor

BN_FIELDS = ("scale", "shift", "mean", "var")


@dataclass(frozen=True)
class BlockSpec:
    index: int
    stage: int
    c_in: int
    c_mid: int
    c_out: int
    stride: int

    @property
    def projection(self) -> bool:
        return self.stride != 1 or self.c_in != self.c_out


@dataclass(frozen=True)
class BaseLayer:
    name: str
    c_in: int
    c_out: int
    k: int


@dataclass(frozen=True)
class ResNetSpec:
    widths: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 2
    in_channels: int = 1
    num_classes: int = 4
    k: int = 3

    def __post_init__(self):
        if not self.widths or min(self.widths) < 1 or self.blocks_per_stage < 1:
            raise ContractError("widths and blocks_per_stage must be positive")

    @cached_property
    def blocks(self) -> tuple[BlockSpec, ...]:
        out = []
        c_prev = self.widths[0]
        for s, w in enumerate(self.widths):
            for j in range(self.blocks_per_stage):
                stride = 2 if (s > 0 and j == 0) else 1
                out.append(BlockSpec(len(out), s, c_prev, w, w, stride))
                c_prev = w
        return tuple(out)

    @cached_property
    def base_layers(self) -> tuple[BaseLayer, ...]:
        """Parametric layers in forward order; their 1-based position is ``l``."""
        layers = [BaseLayer("stem", self.in_channels, self.widths[0], self.k)]
        for b in self.blocks:
            layers.append(BaseLayer(f"blocks.{b.index}.conv1", b.c_in, b.c_mid, self.k))
            layers.append(BaseLayer(f"blocks.{b.index}.conv2", b.c_mid, b.c_out, self.k))
            if b.projection:
                layers.append(BaseLayer(f"blocks.{b.index}.proj", b.c_in, b.c_out, 1))
        layers.append(BaseLayer("fc", self.widths[-1], self.num_classes, 1))
        return tuple(layers)

    def layer_index(self, name: str) -> int:
        for i, layer in enumerate(self.base_layers, start=1):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def channel_normalizer(self) -> int:
        return max(max(layer.c_in, layer.c_out) for layer in self.base_layers)

    @property
    def metamorphic_candidates(self) -> tuple[int, ...]:
        """Identity-shortcut blocks except the last one, in network order."""
        last = self.blocks[-1].index
        return tuple(b.index for b in self.blocks if not b.projection and b.index != last)

    def to_dict(self) -> dict:
        return dict(widths=list(self.widths), blocks_per_stage=self.blocks_per_stage,
                    in_channels=self.in_channels, num_classes=self.num_classes, k=self.k)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ResNetSpec":
        return cls(tuple(d["widths"]), d["blocks_per_stage"], d["in_channels"], d["num_classes"], d.get("k", 3))


def _conv_init(rng, c_out, c_in, k):
    fan_in = c_in * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))


def _bn_init(params, prefix, c):
    params[f"{prefix}.scale"] = np.ones(c)
    params[f"{prefix}.shift"] = np.zeros(c)
    params[f"{prefix}.mean"] = np.zeros(c)
    params[f"{prefix}.var"] = np.ones(c)


def init_params(spec: ResNetSpec, rng) -> dict[str, np.ndarray]:
    """He-normal convolutions, unit BN, small uniform classifier; all float32."""
    g = rng.generator()
    p: dict[str, np.ndarray] = {}
    p["stem.w"] = _conv_init(g, spec.widths[0], spec.in_channels, spec.k)
    p["stem.b"] = np.zeros(spec.widths[0])
    _bn_init(p, "stem.bn", spec.widths[0])
    for b in spec.blocks:
        pre = f"blocks.{b.index}"
        p[f"{pre}.conv1.w"] = _conv_init(g, b.c_mid, b.c_in, spec.k)
        p[f"{pre}.conv1.b"] = np.zeros(b.c_mid)
        _bn_init(p, f"{pre}.bn1", b.c_mid)
        p[f"{pre}.conv2.w"] = _conv_init(g, b.c_out, b.c_mid, spec.k)
        p[f"{pre}.conv2.b"] = np.zeros(b.c_out)
        _bn_init(p, f"{pre}.bn2", b.c_out)
        if b.projection:
            p[f"{pre}.proj.w"] = _conv_init(g, b.c_out, b.c_in, 1)
            p[f"{pre}.proj.b"] = np.zeros(b.c_out)
            _bn_init(p, f"{pre}.bnp", b.c_out)
    bound = 1.0 / np.sqrt(spec.widths[-1])
    p["fc.w"] = g.uniform(-bound, bound, size=(spec.num_classes, spec.widths[-1]))
    p["fc.b"] = np.zeros(spec.num_classes)
    return {k: v.astype(np.float32) for k, v in p.items()}


def has_batchnorm(params: Mapping) -> bool:
    return "stem.bn.scale" in params


def _t(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor._wrap(np.asarray(value))


def forward(spec: ResNetSpec, params: Mapping, x, *, training: bool = False, metamorphic=(),
            bypass=(), use_alpha: bool = True) -> Tensor:
    """Logits for input ``x[B, C, H, W]``.

    ``metamorphic`` lists block indices evaluated as ``x + alpha * conv2(relu(conv1(x)))``
    (``alpha`` omitted when ``use_alpha`` is false). ``bypass`` lists identity-shortcut
    blocks whose residual branch is dropped entirely.
    """
    bn = has_batchnorm(params)

    def get(name):
        try:
            return _t(params[name])
        except KeyError:
            raise AssemblyError(f"missing weights for {name}") from None

    def norm(h, prefix):
        if not bn or f"{prefix}.scale" not in params:
            return h
        return F.batch_norm(h, get(f"{prefix}.scale"), get(f"{prefix}.shift"), _buffer(params[f"{prefix}.mean"]),
                            _buffer(params[f"{prefix}.var"]), training=training)

    x = _t(x)
    h = T.relu(norm(F.conv2d(x, get("stem.w"), get("stem.b"), 1, spec.k // 2), "stem.bn"))
    metamorphic = set(metamorphic)
    for b in spec.blocks:
        pre = f"blocks.{b.index}"
        if b.index in bypass:
            if b.projection:
                raise ContractError(f"block {b.index} has a projection shortcut and cannot be bypassed")
            continue
        if b.index in metamorphic:
            if b.projection:
                raise ContractError(f"block {b.index} has a projection shortcut and cannot be metamorphic")
            z = T.relu(F.conv2d(h, get(f"{pre}.conv1.w"), get(f"{pre}.conv1.b"), 1, spec.k // 2))
            z = F.conv2d(z, get(f"{pre}.conv2.w"), get(f"{pre}.conv2.b"), 1, spec.k // 2)
            if z.shape != h.shape:
                raise AssemblyError(f"block {b.index} output {z.shape} does not match input {h.shape}")
            if use_alpha:
                z = T.mul(get(f"{pre}.alpha"), z)
            h = T.add(h, z)
            continue
        z = T.relu(norm(F.conv2d(h, get(f"{pre}.conv1.w"), get(f"{pre}.conv1.b"), b.stride, spec.k // 2), f"{pre}.bn1"))
        z = norm(F.conv2d(z, get(f"{pre}.conv2.w"), get(f"{pre}.conv2.b"), 1, spec.k // 2), f"{pre}.bn2")
        if b.projection:
            shortcut = norm(F.conv2d(h, get(f"{pre}.proj.w"), get(f"{pre}.proj.b"), b.stride, 0), f"{pre}.bnp")
        else:
            shortcut = h
        h = T.add(shortcut, z)
    h = F.global_avg_pool(T.relu(h))
    return T.add(T.matmul(h, T.transpose(get("fc.w"))), get("fc.b"))


def _buffer(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else value


def predict(spec: ResNetSpec, params: Mapping, images: np.ndarray, batch_size: int = 512, **kw) -> np.ndarray:
    """Inference-mode logits for a whole array, evaluated in fixed-size batches."""
    outs = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(forward(spec, params, images[i:i + batch_size], training=False, **kw).data)
    if not outs:
        return np.zeros((0, spec.num_classes), dtype=np.float32)
    return np.concatenate(outs)


def count_parameters(spec: ResNetSpec, params: Mapping) -> int:
    return int(sum(np.asarray(_buffer(v)).size for k, v in params.items()
                   if not k.endswith((".mean", ".var"))))
