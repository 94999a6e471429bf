"""Flat ``key = value`` run configuration and the run manifest.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Unknown keys are rejected so typos fail loudly. Tuple values are written as
comma-separated integers (``widths = 8,16,32``).
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .coords import PerturbationSpec
from .data import Dataset, SynthShapes, load_raw
from .errors import ContractError
from .inr import INRConfig
from .persist import canonical_json
from .prior import PriorRecipe
from .resnet import ResNetSpec
from .sampler import SamplerSpec
from .trainer import Ablation, LossWeights, StagePlan


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # data
    data_seed: int = 0
    train_count: int = 4096
    test_count: int = 1024
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    # architecture
    widths: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 2
    num_classes: int = 4
    # prior
    prior_epochs: int = 4
    prior_batch_size: int = 64
    prior_lr: float = 3e-3
    prior_weight_decay: float = 5e-4
    smoothing_scope: str = "intra-block"
    # INR training
    blocks: tuple[int, ...] = (0, 1, 3)
    epochs: int = 10
    acc_steps: int = 4
    warmup_epochs: float = 4.0
    peak_lr: float = 8e-4
    shared_lr: float = 8e-4
    weight_decay: float = 1e-4
    batch_size: int = 128
    shared_gamma: bool = True
    include_last_block: bool = True
    augment: bool = True
    perturbation: bool = True
    perturbation_mode: str = "index"
    inr_depth: int = 8
    inr_width: int = 64
    num_frequencies: int = 32
    legacy_output_dim: int = 9
    lambda_task: float = 1e2
    lambda_recon: float = 1.0
    lambda_reg: float = 1e-3
    # sampling
    K: int = 16

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ContractError(f"unknown configuration keys: {', '.join(unknown)}")
        kwargs = {k: _coerce(known[k], v) for k, v in values.items()}
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    # -- derived objects ------------------------------------------------------
    @property
    def spec(self) -> ResNetSpec:
        return ResNetSpec(self.widths, self.blocks_per_stage, 1, self.num_classes)

    @property
    def prior_recipe(self) -> PriorRecipe:
        return PriorRecipe(self.prior_epochs, self.prior_batch_size, self.prior_lr, self.prior_weight_decay,
                           self.augment)

    @property
    def perturbation_spec(self) -> PerturbationSpec:
        return PerturbationSpec(enabled=self.perturbation, mode=self.perturbation_mode)

    def stage_plan(self, ablation: Ablation = Ablation()) -> StagePlan:
        return StagePlan(blocks=self.blocks, epochs=self.epochs, acc_steps=self.acc_steps,
                         warmup_epochs=self.warmup_epochs, peak_lr=self.peak_lr, shared_lr=self.shared_lr,
                         weight_decay=self.weight_decay, batch_size=self.batch_size, shared_gamma=self.shared_gamma,
                         include_last_block=self.include_last_block, augment=self.augment,
                         perturbation=self.perturbation_spec, ablation=ablation)

    @property
    def inr_config(self) -> INRConfig:
        return INRConfig(self.inr_depth, self.inr_width, self.num_frequencies, self.legacy_output_dim)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_task, self.lambda_recon, self.lambda_reg)

    def sampler_spec(self, K: int | None = None, seed: int | None = None) -> SamplerSpec:
        return SamplerSpec(self.K if K is None else K, self.perturbation_spec, self.seed if seed is None else seed)

    def dataset(self, split: str) -> Dataset:
        images, labels = (self.train_images, self.train_labels) if split == "train" else \
            (self.test_images, self.test_labels)
        if images or labels:
            if not (images and labels):
                raise ContractError(f"{split}: both an image and a label file are required")
            return load_raw(images, labels)
        return SynthShapes(seed=self.data_seed, train_count=self.train_count, test_count=self.test_count).split(split)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind.startswith("tuple"):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        if kind == "bool":
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ContractError(f"bad value for {f.name}: {raw!r}") from None
    return raw


def parse_config(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ContractError(f"line {number}: empty key")
        if key in values:
            raise ContractError(f"line {number}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_mapping(parse_config(Path(path).read_text(encoding="utf-8")))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Everything that determines a command's output; ``hash`` identifies it."""

    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # artifact path -> sha256 of its bytes
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed, "inputs": self.inputs,
                "options": self.options}

    @property
    def hash(self) -> str:
        # paths are not content; only digests enter the hash
        body = self.to_dict()
        body["inputs"] = sorted(self.inputs.values())
        return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def build_manifest(command: str, config: RunConfig, seed: int, inputs=(), **options) -> RunManifest:
    return RunManifest(command, config.to_dict(), seed, {str(p): file_digest(p) for p in inputs}, options)
