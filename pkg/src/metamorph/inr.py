"""Weight-generating implicit neural representations.

Each metamorphosed base layer owns an :class:`INRPair`: a kernel INR that maps
one (output channel, input channel) coordinate to a full ``k x k`` kernel
slice, and a bias INR mapping an output-channel coordinate to a scalar. In
legacy mode a single INR with output width ``D`` serves both roles: kernels
come from the central ``k x k`` window of its output and biases from the
first output value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .coords import FourierSpec, PerturbationSpec, coordinates, fourier_embed
from .errors import ContractError, DimensionError
from .rng import RngStream
from .tensor import Tensor


@dataclass(frozen=True)
class KernelSpec:
    k: int = 3

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ContractError(f"kernel size must be odd, got {self.k}")


@dataclass(frozen=True)
class INRConfig:
    depth: int = 8
    width: int = 512
    num_frequencies: int = 32
    legacy_output_dim: int = 9
    residual: bool = True


class INRModel:
    """Residual ELU MLP: ``depth`` linear layers, skip connections on the hidden ones."""

    def __init__(self, in_dim: int, out_dim: int, depth: int = 8, width: int = 512, residual: bool = True,
                 rng: RngStream | None = None, final_scale: float = 0.1):
        if depth < 2:
            raise ContractError("an INR needs at least an input and an output layer")
        if out_dim < 1:
            raise ContractError("output dimension must be >= 1")
        self.in_dim, self.out_dim, self.depth, self.width = in_dim, out_dim, depth, width
        self.residual = residual
        self.evaluations = 0
        rng = rng or RngStream(0)
        dims = [in_dim] + [width] * (depth - 1) + [out_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            # kaiming-uniform (a=sqrt(5)) bound, shrunk on the output layer
            bound = 1.0 / math.sqrt(fan_in)
            if i == depth - 1:
                bound *= final_scale
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def architecture(self) -> tuple:
        return (self.in_dim, self.out_dim, self.depth, self.width, self.residual)

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, embedding) -> Tensor:
        h = embedding if isinstance(embedding, Tensor) else Tensor._wrap(np.asarray(embedding, dtype=self.dtype))
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise DimensionError(f"INR expects [n, {self.in_dim}] embeddings, got {h.shape}")
        self.evaluations += h.shape[0]
        h = T.elu(T.linear(h, self.weights[0], self.biases[0]))
        for w, b in zip(self.weights[1:-1], self.biases[1:-1]):
            z = T.elu(T.linear(h, w, b))
            h = T.add(h, z) if self.residual else z
        out = T.linear(h, self.weights[-1], self.biases[-1])
        T.check_finite(out.data, "INR forward")
        return out

    __call__ = forward

    @property
    def dtype(self):
        return self.weights[0].dtype

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()]

    def load_arrays(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ContractError("parameter count mismatch")
        for p, a in zip(params, arrays):
            if p.shape != tuple(a.shape):
                raise ContractError(f"parameter shape mismatch {p.shape} vs {a.shape}")
            p.data = np.array(a, dtype=p.dtype)


def init_from_predecessor(new: INRModel, old: INRModel) -> INRModel:
    """Copy every parameter value of ``old`` into ``new`` (no sharing afterwards)."""
    if new.architecture != old.architecture:
        raise ContractError(f"architecture mismatch: {new.architecture} vs {old.architecture}")
    new.load_arrays([a.copy() for a in old.state_arrays()])
    return new


def extract_kernel(output, spec: KernelSpec = KernelSpec()):
    """Central ``k x k`` window of a length-``D`` output reshaped to ``d x d``.

    ``output`` may be a single vector or a batch ``[n, D]`` (array or Tensor).
    """
    D = output.shape[-1]
    d = math.isqrt(D)
    k = spec.k
    if d * d != D or d % 2 == 0 or d < k:
        raise ContractError(f"output length {D} is not an odd square >= {k * k}")
    lo = (d - k) // 2
    batch = output.shape[:-1]
    if isinstance(output, Tensor):
        grid = output.reshape(batch + (d, d))
        if d == k:
            return grid
        return grid[(Ellipsis, slice(lo, lo + k), slice(lo, lo + k))]
    grid = np.asarray(output).reshape(batch + (d, d))
    return grid[..., lo:lo + k, lo:lo + k]


def legacy_scalar(output):
    """Single-head value for a scalar weight (e.g. a linear layer entry): the mean of all ``D`` outputs."""
    if isinstance(output, Tensor):
        return T.mean(output, axis=-1)
    return np.asarray(output).mean(axis=-1)


@dataclass(frozen=True)
class LayerSlot:
    """Reference geometry of one metamorphosed base layer."""

    name: str
    l: int
    L: int
    C_in: int
    C_out: int
    N: int
    k: int = 3


@dataclass
class INRPair:
    kernel: INRModel
    bias: INRModel | None = None  # None: legacy single-head

    @property
    def legacy(self) -> bool:
        return self.bias is None

    def models(self) -> list[INRModel]:
        return [self.kernel] if self.bias is None else [self.kernel, self.bias]

    def parameters(self) -> list[Tensor]:
        return [p for m in self.models() for p in m.parameters()]


def make_pair(config: INRConfig, disentangle: bool, k: int, rng: RngStream) -> INRPair:
    in_dim = FourierSpec(config.num_frequencies).embedding_length()
    kw = dict(depth=config.depth, width=config.width, residual=config.residual)
    if disentangle:
        return INRPair(INRModel(in_dim, k * k, rng=rng.split(0), **kw), INRModel(in_dim, 1, rng=rng.split(1), **kw))
    if config.legacy_output_dim < k * k:
        raise ContractError("legacy output dimension must be >= k*k")
    extract_kernel(np.zeros(config.legacy_output_dim), KernelSpec(k))  # validates D
    return INRPair(INRModel(in_dim, config.legacy_output_dim, rng=rng.split(0), **kw))


def kernel_coordinates(slot: LayerSlot, c_out: int, c_in: int, perturbation: PerturbationSpec | None,
                       rng: RngStream | None) -> np.ndarray:
    o, i = np.meshgrid(np.arange(1, c_out + 1), np.arange(1, c_in + 1), indexing="ij")
    return coordinates(slot.l, slot.L, i.ravel(), slot.C_in, o.ravel(), slot.C_out, slot.N, perturbation, rng)


def bias_coordinates(slot: LayerSlot, c_out: int, perturbation: PerturbationSpec | None,
                     rng: RngStream | None) -> np.ndarray:
    # a bias has no input channel; it sits at the reference input width
    o = np.arange(1, c_out + 1)
    return coordinates(slot.l, slot.L, slot.C_in, slot.C_in, o, slot.C_out, slot.N, perturbation, rng)


def generate_layer_weights(entry: INRPair, slot: LayerSlot, shape: tuple[int, int],
                           perturbation: PerturbationSpec | None = None, rng: RngStream | None = None,
                           fourier: FourierSpec | None = None) -> tuple[Tensor, Tensor]:
    """Kernel ``[c_out, c_in, k, k]`` and bias ``[c_out]`` for a sampled layer width.

    All coordinates of the layer are embedded and evaluated as one batch per
    INR; gradients flow back into the INR parameters.
    """
    c_out, c_in = (int(s) for s in shape)
    if c_out < 1 or c_in < 1:
        raise ContractError("sampled channel counts must be >= 1")
    if c_out > slot.C_out or c_in > slot.C_in:
        raise ContractError(f"{slot.name}: sampled shape {shape} exceeds reference ({slot.C_out}, {slot.C_in})")
    fourier = fourier or FourierSpec(_frequencies_of(entry.kernel))
    k = slot.k
    kcoords = kernel_coordinates(slot, c_out, c_in, perturbation, rng)
    bcoords = bias_coordinates(slot, c_out, perturbation, rng)
    kout = entry.kernel(fourier_embed(kcoords, fourier))
    if entry.legacy:
        kernel = extract_kernel(kout, KernelSpec(k)).reshape(c_out, c_in, k, k)
        bias = entry.kernel(fourier_embed(bcoords, fourier))[:, 0]
    else:
        if kout.shape[1] != k * k:
            raise DimensionError(f"kernel INR outputs {kout.shape[1]} values, layer needs {k * k}")
        kernel = kout.reshape(c_out, c_in, k, k)
        bias = entry.bias(fourier_embed(bcoords, fourier)).reshape(c_out)
    return kernel, bias


def _frequencies_of(model: INRModel) -> int:
    return model.in_dim // 12


@dataclass
class INRBundle:
    """Ordered INR pairs, one per metamorphosed base layer."""

    config: INRConfig
    disentangle: bool = True
    entries: dict[str, INRPair] = field(default_factory=dict)
    slots: dict[str, LayerSlot] = field(default_factory=dict)

    def add(self, slot: LayerSlot, pair: INRPair) -> None:
        if slot.name in self.entries:
            raise ContractError(f"layer {slot.name} already has an INR")
        self.entries[slot.name] = pair
        self.slots[slot.name] = slot

    def parameters(self) -> list[Tensor]:
        return [p for pair in self.entries.values() for p in pair.parameters()]

    @property
    def fourier(self) -> FourierSpec:
        return FourierSpec(self.config.num_frequencies)

    def generate(self, name: str, shape, perturbation=None, rng=None):
        return generate_layer_weights(self.entries[name], self.slots[name], shape, perturbation, rng, self.fourier)
