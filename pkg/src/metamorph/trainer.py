"""Block-wise incremental INR training with gradient accumulation over configurations."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import functional as F
from . import tensor as T
from .coords import PerturbationSpec
from .errors import ContractError, NumericError, TrainingError
from .inr import INRBundle, INRConfig, LayerSlot, init_from_predecessor, make_pair
from .morphnet import (BlockWidth, ConfigurationPool, NetworkConfig, SharedParams, assemble_network,
                       block_layer_names, generated_shapes, instantiate_config)
from .optim import AdamW
from .prior import PriorNetwork
from .rng import RngStream
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    task: float = 1e2
    recon: float = 1.0
    reg: float = 1e-3

    def __post_init__(self):
        if min(self.task, self.recon, self.reg) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass(frozen=True)
class Ablation:
    """Each flag switches one recipe component; all False is the single-stage baseline."""

    incremental: bool = True
    alpha_scaling: bool = True
    grad_accum: bool = True
    pre_init: bool = True
    disentangle: bool = True


@dataclass(frozen=True)
class StagePlan:
    blocks: tuple[int, ...]
    epochs: int = 50
    acc_steps: int = 4
    warmup_epochs: float = 20.0
    peak_lr: float = 8e-4
    shared_lr: float = 8e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    shared_gamma: bool = True
    include_last_block: bool = True
    augment: bool = True
    perturbation: PerturbationSpec = PerturbationSpec()
    ablation: Ablation = Ablation()

    def __post_init__(self):
        if self.acc_steps < 1:
            raise ContractError("acc_steps must be >= 1")
        if list(self.blocks) != sorted(self.blocks):
            raise ContractError("stage blocks must follow network order")

    @property
    def effective_acc(self) -> int:
        return self.acc_steps if self.ablation.grad_accum else 1

    def stages(self) -> list[tuple[int, ...]]:
        """Blocks introduced at each stage."""
        if self.ablation.incremental:
            return [(b,) for b in self.blocks]
        return [tuple(self.blocks)]

    def stage_epochs(self) -> int:
        return self.epochs if self.ablation.incremental else self.epochs * len(self.blocks)


def lr_schedule(epoch: float, warmup_epochs: float = 20.0, peak: float = 8e-4) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup_epochs``, constant afterwards."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    if warmup_epochs <= 0:
        return peak
    return peak * min(1.0, epoch / warmup_epochs)


def compute_loss(logits: Tensor, labels, generated: Sequence[Tensor], prior: Sequence[np.ndarray] | None,
                 config: NetworkConfig, weights: LossWeights = LossWeights()) -> tuple[Tensor, dict]:
    """Weighted cross-entropy + reconstruction (uncompressed config only) + L2-norm penalty."""
    task = F.cross_entropy(logits, labels)
    total = T.scale(task, weights.task)
    terms = {"task": task.item(), "recon": 0.0, "reg": 0.0}
    if generated:
        flat = T.concat([g.reshape(-1) for g in generated])
        if config.uncompressed and prior is not None:
            target = np.concatenate([np.asarray(p, dtype=flat.dtype).reshape(-1) for p in prior])
            if target.shape != flat.shape:
                raise ContractError(f"prior has {target.size} weights, generated has {flat.size}")
            recon = T.sum_of_squares(T.add(flat, Tensor._wrap(-target)))
            total = T.add(total, T.scale(recon, weights.recon))
            terms["recon"] = recon.item()
        reg = T.l2_norm(flat)
        total = T.add(total, T.scale(reg, weights.reg))
        terms["reg"] = reg.item()
    terms["total"] = total.item()
    return total, terms


def sample_config(pool: ConfigurationPool, rng: RngStream, blocks: Sequence[int] | None = None,
                  shared_gamma: bool = True) -> NetworkConfig:
    """Uniform width draw from the pool for each block in ``blocks``.

    With ``shared_gamma`` one ratio is drawn on the finest grid among the
    blocks (largest ``C``) and applied to all of them.
    """
    ref = dict(pool.reference)
    blocks = list(ref) if blocks is None else list(blocks)
    if not blocks:
        raise ContractError("no blocks to configure")
    g = rng.generator()
    if shared_gamma:
        anchor = max(blocks, key=lambda b: (ref[b], -b))
        widths = pool.widths(anchor)
        c = widths[int(g.integers(len(widths)))]
        gamma = 1.0 - c / ref[anchor]
        return instantiate_config({b: ref[b] for b in blocks}, gamma)
    out = []
    for b in blocks:
        widths = pool.widths(b)
        out.append(BlockWidth(b, widths[int(g.integers(len(widths)))], ref[b]))
    return NetworkConfig(tuple(out))


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    lr: float
    gamma: float
    loss: float
    task: float
    recon: float
    reg: float
    accuracy: float
    alphas: dict = field(default_factory=dict)


class Trainer:
    """State of one INR training run over a smoothed, BN-folded prior."""

    def __init__(self, prior: PriorNetwork, plan: StagePlan, inr_config: INRConfig = INRConfig(),
                 weights: LossWeights = LossWeights(), seed: int = 0,
                 on_epoch: Callable[[EpochRecord], None] | None = None):
        if not prior.folded:
            raise ContractError("train on a BN-folded prior (run smoothing first)")
        self.spec = prior.spec
        candidates = set(self.spec.metamorphic_candidates)
        if not set(plan.blocks) <= candidates:
            raise ContractError(f"blocks {sorted(set(plan.blocks) - candidates)} cannot be metamorphosed")
        if not plan.blocks:
            raise ContractError("no metamorphic blocks requested")
        self.prior = prior
        self.plan = plan
        self.inr_config = inr_config
        self.weights = weights
        self.rng = RngStream(seed)
        self.on_epoch = on_epoch
        self.use_alpha = plan.ablation.alpha_scaling
        self.bundle = INRBundle(inr_config, disentangle=plan.ablation.disentangle)
        self.shared = SharedParams.from_prior(prior.params, self.spec, (), use_alpha=self.use_alpha,
                                              include_last_block=plan.include_last_block)
        self.pool = ConfigurationPool.for_blocks({b: self.spec.blocks[b].c_mid for b in plan.blocks})
        self.active: list[int] = []
        self.inr_opts: dict[str, AdamW] = {}
        self.shared_opts: dict[str, AdamW] = {
            "tensors": AdamW(list(self.shared.tensors.values()), lr=plan.shared_lr, weight_decay=plan.weight_decay)}
        self.history: list[EpochRecord] = []
        self.iterations = 0
        self.inr_updates = 0
        self.stage_index = -1

    # -- structure -----------------------------------------------------------
    def slot(self, name: str) -> LayerSlot:
        layer = next(layer for layer in self.spec.base_layers if layer.name == name)
        return LayerSlot(name, self.spec.layer_index(name), len(self.spec.base_layers), layer.c_in, layer.c_out,
                         self.spec.channel_normalizer, layer.k)

    def add_block(self, block: int, predecessor: int | None = None) -> None:
        """Create the INR pair(s) for ``block``; copy weights from ``predecessor``'s INRs if given."""
        for j, name in enumerate(block_layer_names(block)):
            pair = make_pair(self.inr_config, self.plan.ablation.disentangle, self.spec.k,
                             self.rng.split(1000 + block, j))
            if predecessor is not None:
                old = self.bundle.entries[block_layer_names(predecessor)[j]]
                for new_model, old_model in zip(pair.models(), old.models()):
                    init_from_predecessor(new_model, old_model)
            self.bundle.add(self.slot(name), pair)
            self.inr_opts[name] = AdamW(pair.parameters(), lr=self.plan.peak_lr, weight_decay=self.plan.weight_decay)
        if self.use_alpha:
            self.shared.add_block(block)
            self.shared_opts[f"alpha.{block}"] = AdamW([self.shared.alphas[block]], lr=self.plan.shared_lr)
        self.active.append(block)

    def inr_parameters(self) -> list[Tensor]:
        return [p for name in self.inr_opts for p in self.inr_opts[name].params]

    def shared_parameters(self) -> list[Tensor]:
        return [p for opt in self.shared_opts.values() for p in opt.params]

    # -- forward ---------------------------------------------------------------
    def generate(self, config: NetworkConfig, rng: RngStream | None, perturb: bool = True):
        spec = self.plan.perturbation if perturb else None
        out = {}
        for name, shape in generated_shapes(self.spec, config).items():
            out[name] = self.bundle.generate(name, shape, spec, rng)
        return out

    def assemble(self, config: NetworkConfig, generated):
        return assemble_network(self.prior.params, self.spec, config, generated, self.shared, self.use_alpha)

    def config_loss(self, config: NetworkConfig, x, y, rng: RngStream) -> tuple[Tensor, dict, Tensor]:
        generated = self.generate(config, rng)
        net = self.assemble(config, generated)
        logits = net.forward(x, training=True)
        flat = [t for name in generated for t in generated[name]]
        prior = None
        if config.uncompressed:
            prior = [self.prior.params[f"{name}.{s}"] for name in generated for s in ("w", "b")]
        loss, terms = compute_loss(logits, y, flat, prior, config, self.weights)
        return loss, terms, logits

    # -- updates -----------------------------------------------------------------
    def accumulate_gradients(self, configs: Sequence[NetworkConfig], batches, rng: RngStream,
                             shared_lr: float | None = None) -> tuple[list[np.ndarray], list[dict]]:
        """Per-config backward passes; INR gradients are averaged, shared weights are
        stepped after every config (skipped when ``shared_lr`` is None)."""
        if not configs:
            raise ContractError("empty accumulation window")
        if len(batches) != len(configs):
            raise ContractError("one batch per configuration is required")
        inr = self.inr_parameters()
        acc = [np.zeros_like(p.data) for p in inr]
        n = len(configs)
        records = []
        for k, (config, (x, y)) in enumerate(zip(configs, batches)):
            for p in inr + self.shared_parameters():
                p.grad = None
            loss, terms, logits = self.config_loss(config, x, y, rng.split(k))
            loss.backward()
            if shared_lr is not None:
                for opt in self.shared_opts.values():
                    opt.step(lr=shared_lr)
            for a, p in zip(acc, inr):
                if p.grad is not None:
                    a += p.grad / n
            terms["correct"] = int((logits.data.argmax(1) == np.asarray(y)).sum())
            terms["count"] = len(y)
            terms["gamma"] = float(np.mean(list(config.gammas().values())))
            records.append(terms)
            self.iterations += 1
        return acc, records

    def accumulate_step(self, configs: Sequence[NetworkConfig], batches, rng: RngStream,
                        lr: float | None = None, shared_lr: float | None = None) -> list[dict]:
        """One accumulation window: shared weights move per config, INRs once on the mean gradient."""
        lr = self.plan.peak_lr if lr is None else lr
        shared_lr = self.plan.shared_lr if shared_lr is None else shared_lr
        grads, records = self.accumulate_gradients(configs, batches, rng, shared_lr)
        i = 0
        for opt in self.inr_opts.values():
            n = len(opt.params)
            opt.step(lr=lr, grads=grads[i:i + n])
            i += n
        self.inr_updates += 1
        return records

    # -- stages -------------------------------------------------------------------
    def window_configs(self, size: int, rng: RngStream) -> list[NetworkConfig]:
        configs = []
        for k in range(size):
            if self.plan.ablation.grad_accum and k == 0:
                configs.append(NetworkConfig(tuple(BlockWidth(b, self.spec.blocks[b].c_mid,
                                                              self.spec.blocks[b].c_mid) for b in self.active)))
            else:
                configs.append(sample_config(self.pool, rng, self.active, self.plan.shared_gamma))
        return configs

    def train_stage(self, new_blocks: Sequence[int], dataset, epochs: int | None = None) -> None:
        """Add INRs for ``new_blocks`` and train every active INR plus shared weights."""
        self.stage_index += 1
        stage = self.stage_index
        for block in new_blocks:
            predecessor = None
            if self.plan.ablation.pre_init and self.plan.ablation.incremental and self.active:
                predecessor = self.active[-1]
            self.add_block(block, predecessor)
        epochs = self.plan.stage_epochs() if epochs is None else epochs
        acc = self.plan.effective_acc
        batches_per_epoch = -(-len(dataset) // self.plan.batch_size)
        healthy = self.state_arrays()
        for epoch in range(epochs):
            data_rng = self.rng.split(1, stage, epoch)
            cfg_rng = self.rng.split(2, stage, epoch)
            gen_rng = self.rng.split(3, stage, epoch)
            sums = dict(loss=0.0, task=0.0, recon=0.0, reg=0.0, gamma=0.0)
            correct = count = configs_seen = 0
            batches = list(dataset.batches(self.plan.batch_size, data_rng, augment=self.plan.augment))
            try:
                for w, start in enumerate(range(0, len(batches), acc)):
                    window = batches[start:start + acc]
                    progress = epoch + start / batches_per_epoch
                    lr = lr_schedule(progress, self.plan.warmup_epochs, self.plan.peak_lr)
                    shared_lr = lr_schedule(progress, self.plan.warmup_epochs, self.plan.shared_lr)
                    configs = self.window_configs(len(window), cfg_rng)
                    for rec in self.accumulate_step(configs, window, gen_rng.split(w), lr, shared_lr):
                        sums["loss"] += rec["total"]
                        for key in ("task", "recon", "reg", "gamma"):
                            sums[key] += rec[key]
                        correct += rec["correct"]
                        count += rec["count"]
                        configs_seen += 1
                if not np.isfinite(sums["loss"]):
                    raise NumericError("non-finite loss")
            except NumericError as exc:
                self.load_state_arrays(healthy)
                raise TrainingError(f"stage {stage} epoch {epoch} diverged: {exc}", checkpoint=healthy) from exc
            healthy = self.state_arrays()
            rec = EpochRecord(stage, epoch, lr, sums["gamma"] / configs_seen, sums["loss"] / configs_seen,
                              sums["task"] / configs_seen, sums["recon"] / configs_seen, sums["reg"] / configs_seen,
                              correct / max(count, 1),
                              {b: float(a.data[0]) for b, a in self.shared.alphas.items()})
            self.history.append(rec)
            log.info("stage %d epoch %d loss %.4f task %.4f recon %.4f acc %.4f", stage, epoch, rec.loss, rec.task,
                     rec.recon, rec.accuracy)
            if self.on_epoch is not None:
                self.on_epoch(rec)

    def train(self, dataset) -> None:
        for blocks in self.plan.stages():
            self.train_stage(blocks, dataset)

    # -- state ------------------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every trainable array (INRs and shared weights), copied."""
        out = {}
        for name, pair in self.bundle.entries.items():
            for role, model in zip(("kernel", "bias"), pair.models()):
                for i, p in enumerate(model.parameters()):
                    out[f"inr.{name}.{role}.{i}"] = p.data.copy()
        for name, t in self.shared.named().items():
            out[f"shared.{name}"] = t.data.copy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, pair in self.bundle.entries.items():
            for role, model in zip(("kernel", "bias"), pair.models()):
                for i, p in enumerate(model.parameters()):
                    key = f"inr.{name}.{role}.{i}"
                    if key in arrays:
                        p.data = np.array(arrays[key], dtype=p.dtype)
        for name, t in self.shared.named().items():
            key = f"shared.{name}"
            if key in arrays:
                t.data = np.array(arrays[key], dtype=t.dtype)


def plan_to_dict(plan: StagePlan) -> dict:
    d = asdict(plan)
    d["blocks"] = list(plan.blocks)
    return d


def plan_from_dict(d: Mapping) -> StagePlan:
    d = dict(d)
    d["blocks"] = tuple(d["blocks"])
    d["perturbation"] = PerturbationSpec(**d["perturbation"])
    d["ablation"] = Ablation(**d["ablation"])
    return StagePlan(**d)


def baseline_plan(plan: StagePlan) -> StagePlan:
    """The same plan with every recipe component switched off."""
    return replace(plan, ablation=Ablation(False, False, False, False, False))
