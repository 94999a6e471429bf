"""Coordinates fed to the weight-generating INRs.

A weight location is identified by its base-layer index ``l`` and its output
and input channel indices inside a (possibly narrower) sampled layer. The
reference architecture supplies the normalisers. All indices are 1-based, so
unperturbed coordinates lie in (0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import RngStream


@dataclass(frozen=True)
class LayerIndexRef:
    l: int
    L: int
    C_in: int
    C_out: int
    c_in: int
    c_out: int
    N: int

    def validate(self) -> None:
        if min(self.L, self.C_in, self.C_out, self.N) <= 0:
            raise ContractError("coordinate normalisers must be positive")
        if not (1 <= self.l <= self.L and 1 <= self.c_in <= self.C_in and 1 <= self.c_out <= self.C_out):
            raise ContractError(f"index out of range in {self}")
        if self.N < max(self.C_in, self.C_out):
            raise ContractError("N must be at least max(C_in, C_out)")


@dataclass(frozen=True)
class CoordinateVector:
    v: np.ndarray
    perturbed: bool = False


@dataclass(frozen=True)
class PerturbationSpec:
    enabled: bool = True
    low: float = -0.5
    high: float = 0.5
    # "index": noise on the integer indices before normalising; "normalized": noise on the final vector.
    mode: str = "index"


@dataclass(frozen=True)
class FourierSpec:
    num_frequencies: int = 32

    def embedding_length(self, dims: int = 6) -> int:
        return dims * 2 * self.num_frequencies


def channel_normalizer(layer_channels) -> int:
    """``N``: the largest input or output width over all base layers."""
    return max(max(int(ci), int(co)) for ci, co in layer_channels)


def normalize(l, L, c_in, C_in, c_out, C_out, N) -> np.ndarray:
    """Vectorised coordinate formula; index arguments may be arrays of equal length."""
    if min(L, C_in, C_out, N) <= 0:
        raise ContractError("coordinate normalisers must be positive")
    l, c_in, c_out = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (l, c_in, c_out)))
    const = np.broadcast_to(np.array([L / N, C_in / N, C_out / N]), l.shape + (3,))
    return np.concatenate([np.stack([l / L, c_in / C_in, c_out / C_out], axis=-1), const], axis=-1)


def build_coordinate(ref: LayerIndexRef) -> CoordinateVector:
    ref.validate()
    v = normalize(ref.l, ref.L, ref.c_in, ref.C_in, ref.c_out, ref.C_out, ref.N)
    return CoordinateVector(v)


def draw_epsilon(spec: PerturbationSpec, rng: RngStream, shape) -> np.ndarray:
    return rng.uniform(spec.low, spec.high, size=shape)


def perturb_indices(l, c_in, c_out, spec: PerturbationSpec, rng: RngStream):
    """Add independent U(low, high) noise to each integer index; returns float arrays."""
    idx = np.stack(np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (l, c_in, c_out))), axis=-1)
    if spec.enabled:
        idx = idx + draw_epsilon(spec, rng, idx.shape)
    return idx[..., 0], idx[..., 1], idx[..., 2]


def coordinates(l, L, c_in, C_in, c_out, C_out, N, spec: PerturbationSpec | None = None,
                rng: RngStream | None = None) -> np.ndarray:
    """Batch of (optionally perturbed) coordinate vectors, shape ``[n, 6]``."""
    if spec is None or not spec.enabled:
        return normalize(l, L, c_in, C_in, c_out, C_out, N)
    if rng is None:
        raise ContractError("perturbation requires an RngStream")
    if spec.mode == "index":
        l, c_in, c_out = perturb_indices(l, c_in, c_out, spec, rng)
        return normalize(l, L, c_in, C_in, c_out, C_out, N)
    if spec.mode == "normalized":
        v = normalize(l, L, c_in, C_in, c_out, C_out, N)
        v[..., :3] += draw_epsilon(spec, rng, v[..., :3].shape)
        return v
    raise ContractError(f"unknown perturbation mode {spec.mode!r}")


def perturb(ref: LayerIndexRef, spec: PerturbationSpec, rng: RngStream) -> CoordinateVector:
    ref.validate()
    v = coordinates(ref.l, ref.L, ref.c_in, ref.C_in, ref.c_out, ref.C_out, ref.N, spec, rng)
    return CoordinateVector(v, perturbed=spec.enabled)


def fourier_embed(v, spec: FourierSpec = FourierSpec()) -> np.ndarray:
    """``[sin(2^f pi v_i), cos(2^f pi v_i)]`` for every entry and frequency.

    Layout per entry: F sines then F cosines, entries concatenated in order.
    Accepts a single vector (length 6) or a batch ``[n, 6]``; computed in float64.
    """
    v = v.v if isinstance(v, CoordinateVector) else np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 6:
        raise ContractError(f"coordinate vectors have 6 entries, got {v.shape[-1]}")
    freqs = np.pi * 2.0 ** np.arange(spec.num_frequencies)
    angles = v[..., :, None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return emb.reshape(v.shape[:-1] + (spec.embedding_length(),))
