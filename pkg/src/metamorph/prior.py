"""Prior network: conventional training, BN folding and TV-minimising channel permutation."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from . import resnet
from .errors import ContractError, NumericError, StructuralError, TrainingError
from .optim import AdamW
from .resnet import BN_FIELDS, ResNetSpec
from .rng import RngStream
from .tensor import Tensor

log = logging.getLogger(__name__)

EXACT_SEARCH_LIMIT = 8


@dataclass
class PriorNetwork:
    spec: ResNetSpec
    params: dict[str, np.ndarray]
    # applied permutations, {space: order}, kept for audit
    permutations: dict[str, list[int]] = field(default_factory=dict)

    @property
    def folded(self) -> bool:
        return not resnet.has_batchnorm(self.params)

    def copy(self) -> "PriorNetwork":
        return PriorNetwork(self.spec, {k: v.copy() for k, v in self.params.items()}, dict(self.permutations))

    def logits(self, images, batch_size: int = 512) -> np.ndarray:
        return resnet.predict(self.spec, self.params, images, batch_size)

    def accuracy(self, dataset) -> float:
        return F.accuracy(self.logits(dataset.images), dataset.labels)


@dataclass(frozen=True)
class PriorRecipe:
    epochs: int = 8
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 5e-4
    augment: bool = True


def train_prior(spec: ResNetSpec, dataset, recipe: PriorRecipe, rng: RngStream, on_epoch=None) -> PriorNetwork:
    """Cross-entropy training with AdamW and batch-statistics BN; returns an inference-mode network."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    params = resnet.init_params(spec, rng.split(0))
    trainable = {k: Tensor(v, requires_grad=True) for k, v in params.items() if not k.endswith((".mean", ".var"))}
    buffers = {k: v for k, v in params.items() if k.endswith((".mean", ".var"))}
    opt = AdamW(list(trainable.values()), lr=recipe.lr, weight_decay=recipe.weight_decay)
    data_rng = rng.split(1)
    live = {**trainable, **buffers}
    for epoch in range(recipe.epochs):
        # cosine decay from the peak rate
        lr = 0.5 * recipe.lr * (1 + np.cos(np.pi * epoch / recipe.epochs))
        total, correct, seen = 0.0, 0, 0
        for x, y in dataset.batches(recipe.batch_size, data_rng, augment=recipe.augment):
            try:
                logits = resnet.forward(spec, live, x, training=True)
                loss = F.cross_entropy(logits, y)
            except NumericError as exc:
                raise TrainingError(f"prior training diverged in epoch {epoch}: {exc}") from exc
            opt.zero_grad()
            loss.backward()
            opt.step(lr=lr)
            total += loss.item() * len(y)
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(y)
        if not np.isfinite(total):
            raise TrainingError(f"prior loss is not finite in epoch {epoch}")
        log.info("prior epoch %d loss %.4f acc %.4f", epoch, total / seen, correct / seen)
        if on_epoch is not None:
            on_epoch(epoch, total / seen, correct / seen)
    out = {k: t.data.copy() for k, t in trainable.items()}
    out.update({k: v.copy() for k, v in buffers.items()})
    return PriorNetwork(spec, {k: out[k] for k in params})


# -- BN folding ----------------------------------------------------------------

def fold_batchnorm(w, b, scale, shift, mean, var, eps: float = 1e-5):
    """Absorb inference-mode BN into the preceding convolution; returns ``(w', b')``."""
    w = np.asarray(w)
    denom = np.asarray(var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise ContractError("BN variance + eps must be positive")
    factor = np.asarray(scale, dtype=np.float64) / np.sqrt(denom)
    w_new = w.astype(np.float64) * factor.reshape((-1,) + (1,) * (w.ndim - 1))
    b_new = np.asarray(shift, dtype=np.float64) + (np.asarray(b, dtype=np.float64) - mean) * factor
    return w_new.astype(w.dtype), b_new.astype(w.dtype)


def fold_network(net: PriorNetwork, eps: float = 1e-5) -> PriorNetwork:
    """Copy of ``net`` with every BN absorbed into its convolution."""
    if net.folded:
        return net.copy()
    p = net.params
    pairs = [("stem", "stem.bn")]
    for blk in net.spec.blocks:
        pre = f"blocks.{blk.index}"
        pairs += [(f"{pre}.conv1", f"{pre}.bn1"), (f"{pre}.conv2", f"{pre}.bn2")]
        if blk.projection:
            pairs.append((f"{pre}.proj", f"{pre}.bnp"))
    out = {k: v.copy() for k, v in p.items() if not any(k.startswith(bn + ".") for _, bn in pairs)}
    for conv, bn in pairs:
        out[f"{conv}.w"], out[f"{conv}.b"] = fold_batchnorm(
            p[f"{conv}.w"], p[f"{conv}.b"], *(p[f"{bn}.{f}"] for f in BN_FIELDS), eps=eps)
    return PriorNetwork(net.spec, out, dict(net.permutations))


# -- total variation -----------------------------------------------------------

def total_variation(w) -> float:
    """Sum of absolute differences between adjacent output slices plus adjacent input slices.

    ``w`` is ``[C_out, C_in, ...]`` (trailing axes form each channel-pair slice)
    or a 1-D vector, which only has the output direction.
    """
    w = np.asarray(w, dtype=np.float64)
    tv = np.abs(np.diff(w, axis=0)).sum() if w.shape[0] > 1 else 0.0
    if w.ndim > 1 and w.shape[1] > 1:
        tv += np.abs(np.diff(w, axis=1)).sum()
    return float(tv)


def path_cost(distances: np.ndarray, order) -> float:
    order = np.asarray(order)
    return float(distances[order[:-1], order[1:]].sum())


def l1_distances(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    return np.abs(f[:, None, :] - f[None, :, :]).sum(axis=2)


@dataclass(frozen=True)
class PermutationMap:
    """``order[j]`` is the old channel placed at new position ``j``."""

    order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ContractError(f"{self.order} is not a permutation")

    @property
    def inverse(self) -> "PermutationMap":
        return PermutationMap(tuple(int(i) for i in np.argsort(self.order)))

    def compose(self, other: "PermutationMap") -> "PermutationMap":
        """Apply ``self`` first, then ``other``."""
        return PermutationMap(tuple(self.order[i] for i in other.order))

    @classmethod
    def identity(cls, n: int) -> "PermutationMap":
        return cls(tuple(range(n)))


def _exhaustive(d: np.ndarray) -> tuple[int, ...]:
    n = len(d)
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    costs = d[perms[:, :-1], perms[:, 1:]].sum(axis=1)
    # lexicographically first among (numerically) tied optima
    best = np.flatnonzero(costs <= costs.min() + 1e-9 * max(1.0, abs(costs.min())))[0]
    return tuple(int(i) for i in perms[best])


def _two_opt(d: np.ndarray, order: list[int]) -> list[int]:
    n = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                a, b = order[i], order[j]
                before = (d[order[i - 1], a] if i > 0 else 0.0) + (d[b, order[j + 1]] if j < n - 1 else 0.0)
                after = (d[order[i - 1], b] if i > 0 else 0.0) + (d[a, order[j + 1]] if j < n - 1 else 0.0)
                if after < before - 1e-12:
                    order[i:j + 1] = order[i:j + 1][::-1]
                    improved = True
    return order


def _nearest_neighbour(d: np.ndarray, start: int) -> list[int]:
    n = len(d)
    order = [start]
    left = set(range(n)) - {start}
    while left:
        last = order[-1]
        nxt = min(left, key=lambda j: (d[last, j], j))
        order.append(nxt)
        left.remove(nxt)
    return order


def find_permutation(features, exact_limit: int = EXACT_SEARCH_LIMIT) -> PermutationMap:
    """Channel order minimising the summed L1 distance between adjacent channel slices.

    ``features`` holds one row per channel (all weights that move with it).
    Up to ``exact_limit`` channels the optimum is found by enumeration;
    beyond that, nearest-neighbour chains from every start are refined by
    2-opt, and the result is never worse than the identity order.
    """
    d = l1_distances(features)
    n = len(d)
    if n < 1:
        raise ContractError("need at least one channel")
    if n <= 2:
        return PermutationMap.identity(n)
    if n <= exact_limit:
        return PermutationMap(_exhaustive(d))
    candidates = [_two_opt(d, list(range(n)))]
    candidates += [_two_opt(d, _nearest_neighbour(d, s)) for s in range(n)]
    best = min(candidates, key=lambda o: path_cost(d, o))
    if path_cost(d, best) > path_cost(d, range(n)):
        best = list(range(n))
    return PermutationMap(tuple(int(i) for i in best))


# -- channel spaces --------------------------------------------------------------

def channel_space(spec: ResNetSpec, space: str, params) -> tuple[list[tuple[str, int]], list[tuple[str, int]]]:
    """``(producers, consumers)`` as ``(param name, axis)`` lists for a channel space.

    Spaces: ``blocks.<i>.mid`` (between conv1 and conv2 of block ``i``) and
    ``stages.<s>`` (the residual stream of stage ``s``, shared by every block
    in it). Block output channels on their own are junction channels and are
    rejected.
    """
    parts = space.split(".")
    bn = resnet.has_batchnorm(params)

    def conv_rows(conv, norm):
        out = [(f"{conv}.w", 0), (f"{conv}.b", 0)]
        if bn:
            out += [(f"{norm}.{f}", 0) for f in BN_FIELDS]
        return out

    if len(parts) == 3 and parts[0] == "blocks" and parts[2] == "mid":
        i = int(parts[1])
        pre = f"blocks.{i}"
        return conv_rows(f"{pre}.conv1", f"{pre}.bn1"), [(f"{pre}.conv2.w", 1)]
    if len(parts) == 3 and parts[0] == "blocks" and parts[2] in ("out", "conv2"):
        raise StructuralError(f"{space}: block outputs meet a shortcut; permute the whole stage instead")
    if len(parts) == 2 and parts[0] == "stages":
        s = int(parts[1])
        if not 0 <= s < len(spec.widths):
            raise ContractError(f"no stage {s}")
        producers, consumers = [], []
        blocks = [b for b in spec.blocks if b.stage == s]
        if s == 0:
            producers += conv_rows("stem", "stem.bn")
        for b in blocks:
            pre = f"blocks.{b.index}"
            producers += conv_rows(f"{pre}.conv2", f"{pre}.bn2")
            if b.projection:
                producers += conv_rows(f"{pre}.proj", f"{pre}.bnp")
                continue
            consumers.append((f"{pre}.conv1.w", 1))
        nxt = [b for b in spec.blocks if b.stage == s + 1]
        if nxt:
            first = nxt[0]
            consumers.append((f"blocks.{first.index}.conv1.w", 1))
            if first.projection:
                consumers.append((f"blocks.{first.index}.proj.w", 1))
        else:
            consumers.append(("fc.w", 1))
        if s == 0 and blocks and blocks[0].projection:
            raise StructuralError("stage 0 starts with a projection block; stream is not shared with the stem")
        return producers, consumers
    raise ContractError(f"unknown channel space {space!r}")


def space_features(spec: ResNetSpec, params, space: str) -> np.ndarray:
    """One row per channel: every weight that moves with that channel, flattened."""
    producers, consumers = channel_space(spec, space, params)
    cols = []
    for name, axis in producers + consumers:
        if name.endswith((".mean", ".var", ".scale", ".shift")):
            continue
        arr = np.moveaxis(np.asarray(params[name], dtype=np.float64), axis, 0)
        cols.append(arr.reshape(arr.shape[0], -1))
    return np.concatenate(cols, axis=1)


def space_tv(spec: ResNetSpec, params, space: str) -> float:
    """Total variation of every weight tensor touched by ``space``."""
    producers, consumers = channel_space(spec, space, params)
    names = {n for n, _ in producers + consumers if not n.endswith((".mean", ".var", ".scale", ".shift"))}
    return sum(total_variation(params[n]) for n in sorted(names))


def apply_permutation(net: PriorNetwork, space: str, perm: PermutationMap) -> PriorNetwork:
    """Reorder the channels of ``space``; producers and consumers move together so
    the network function is unchanged."""
    producers, consumers = channel_space(net.spec, space, net.params)
    order = np.asarray(perm.order)
    out = net.copy()
    for name, axis in producers + consumers:
        arr = out.params[name]
        if arr.shape[axis] != len(order):
            raise ContractError(f"permutation of length {len(order)} does not fit {name} axis {axis}")
        out.params[name] = np.ascontiguousarray(np.take(arr, order, axis=axis))
    previous = out.permutations.get(space)
    combined = perm if previous is None else PermutationMap(tuple(previous)).compose(perm)
    out.permutations[space] = list(combined.order)
    return out


@dataclass
class SmoothingRecord:
    space: str
    tv_before: float
    tv_after: float
    order: tuple[int, ...]


def smoothing_spaces(spec: ResNetSpec, scope: str) -> list[str]:
    if scope == "intra-block":
        return [f"blocks.{b.index}.mid" for b in spec.blocks]
    if scope == "stage-wide":
        return [f"blocks.{b.index}.mid" for b in spec.blocks] + [f"stages.{s}" for s in range(len(spec.widths))]
    raise ContractError(f"unknown smoothing scope {scope!r}")


def smooth(net: PriorNetwork, scope: str = "intra-block",
           exact_limit: int = EXACT_SEARCH_LIMIT) -> tuple[PriorNetwork, list[SmoothingRecord]]:
    """Fold BN, then permute each channel space to minimise total variation."""
    out = fold_network(net)
    records = []
    for space in smoothing_spaces(out.spec, scope):
        before = space_tv(out.spec, out.params, space)
        perm = find_permutation(space_features(out.spec, out.params, space), exact_limit)
        candidate = apply_permutation(out, space, perm)
        after = space_tv(candidate.spec, candidate.params, space)
        if after <= before:
            out = candidate
        else:
            after = before
            perm = PermutationMap.identity(len(perm.order))
        records.append(SmoothingRecord(space, before, after, perm.order))
        log.info("smooth %s: TV %.4f -> %.4f", space, before, after)
    return out, records
