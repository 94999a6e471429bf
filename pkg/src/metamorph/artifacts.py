"""On-disk artifacts: prior checkpoints and trained INR bundles (NMCK files)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import persist
from .errors import FormatError
from .inr import INRBundle, INRConfig, LayerSlot, make_pair
from .morphnet import SharedParams
from .prior import PriorNetwork
from .resnet import ResNetSpec
from .rng import RngStream
from .tensor import Tensor
from .trainer import StagePlan, Trainer, plan_from_dict, plan_to_dict

PRIOR_KIND = "metamorph.prior"
INR_KIND = "metamorph.inr"
INR_FILE = "inr.nmck"
MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.jsonl"


def save_prior(path, net: PriorNetwork, meta: dict | None = None) -> None:
    info = dict(meta or {})
    info.update(kind=PRIOR_KIND, spec=net.spec.to_dict(), folded=net.folded, permutations=net.permutations)
    persist.save(path, dict(sorted(net.params.items())), info)


def load_prior(path) -> tuple[PriorNetwork, dict]:
    tensors, meta = persist.load(path)
    if meta.get("kind") != PRIOR_KIND:
        raise FormatError(f"{path} is not a prior checkpoint")
    net = PriorNetwork(ResNetSpec.from_dict(meta["spec"]), tensors, dict(meta.get("permutations", {})))
    return net, meta


@dataclass
class INRArtifact:
    spec: ResNetSpec
    prior_params: dict[str, np.ndarray]
    bundle: INRBundle
    shared: SharedParams
    plan: StagePlan
    meta: dict

    @property
    def use_alpha(self) -> bool:
        return self.plan.ablation.alpha_scaling


def save_inr(path, trainer: Trainer, meta: dict | None = None) -> None:
    tensors = {f"prior.{k}": v for k, v in sorted(trainer.prior.params.items())}
    tensors.update(trainer.state_arrays())
    info = dict(meta or {})
    info.update(kind=INR_KIND, spec=trainer.spec.to_dict(), plan=plan_to_dict(trainer.plan),
                inr_config=vars(trainer.inr_config), disentangle=trainer.bundle.disentangle,
                slots={n: vars(s) for n, s in trainer.bundle.slots.items()}, active=list(trainer.active),
                shared_names=sorted(trainer.shared.tensors))
    persist.save(path, tensors, info)


def load_inr(path) -> INRArtifact:
    path = Path(path)
    if path.is_dir():
        path = path / INR_FILE
    tensors, meta = persist.load(path)
    if meta.get("kind") != INR_KIND:
        raise FormatError(f"{path} is not an INR bundle")
    spec = ResNetSpec.from_dict(meta["spec"])
    config = INRConfig(**meta["inr_config"])
    plan = plan_from_dict(meta["plan"])
    bundle = INRBundle(config, disentangle=meta["disentangle"])
    for name, slot in meta["slots"].items():
        pair = make_pair(config, bundle.disentangle, slot["k"], RngStream(0))
        for role, model in zip(("kernel", "bias"), pair.models()):
            model.load_arrays([tensors[f"inr.{name}.{role}.{i}"] for i in range(len(model.parameters()))])
        bundle.add(LayerSlot(**slot), pair)
    shared = SharedParams({}, {n: Tensor(tensors[f"shared.{n}"]) for n in meta["shared_names"]})
    if plan.ablation.alpha_scaling:
        shared.alphas = {b: Tensor(tensors[f"shared.blocks.{b}.alpha"]) for b in meta["active"]}
    prior = {k[len("prior."):]: v for k, v in tensors.items() if k.startswith("prior.")}
    return INRArtifact(spec, prior, bundle, shared, plan, meta)


def write_metrics(path, records) -> None:
    lines = [json.dumps(vars(r) | {"alphas": {str(k): v for k, v in r.alphas.items()}}, sort_keys=True)
             for r in records]
    persist.atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8") if lines else b"")
