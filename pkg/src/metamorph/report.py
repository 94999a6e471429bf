"""Evaluation and sweep reports (CSV and JSON)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .artifacts import INRArtifact
from .morphnet import AssembledNetwork, instantiate_config
from .sampler import SamplerSpec, build_network, sample_weights

CSV_FIELDS = ("gamma", "accuracy", "ce_loss", "param_count", "seed")


@dataclass
class EvalRow:
    gamma: float
    accuracy: float
    ce_loss: float
    param_count: int
    seed: int


def evaluate(net: AssembledNetwork, dataset, batch_size: int = 512) -> tuple[float, float]:
    """Accuracy and mean cross-entropy of ``net`` on ``dataset``."""
    logits = net.logits(dataset.images, batch_size).astype(np.float64)
    logp = F.log_softmax(logits)
    ce = float(-logp[np.arange(len(dataset)), dataset.labels].mean()) if len(dataset) else 0.0
    acc = float((logits.argmax(1) == dataset.labels).mean()) if len(dataset) else 0.0
    return acc, ce


def network_at(artifact: INRArtifact, gamma: float, sampler: SamplerSpec) -> AssembledNetwork:
    reference = {b: artifact.spec.blocks[b].c_mid for b in artifact.meta["active"]}
    config = instantiate_config(reference, gamma)
    weights = sample_weights(artifact.bundle, config, sampler, pool=None)
    return build_network(artifact.prior_params, artifact.spec, config, weights, artifact.shared, artifact.use_alpha)


def sweep(artifact: INRArtifact, gammas, dataset, sampler: SamplerSpec) -> list[EvalRow]:
    rows = []
    for gamma in gammas:
        net = network_at(artifact, float(gamma), sampler)
        acc, ce = evaluate(net, dataset)
        rows.append(EvalRow(round(float(gamma), 10), acc, ce, net.parameter_count(), sampler.seed))
    return rows


def parse_gammas(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(p) for p in text.split(":"))
        if step <= 0:
            raise ValueError("gamma step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(max(n, 0))]
    return [float(p) for p in text.split(",") if p.strip()]


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(asdict(row))
    return buf.getvalue()


def rows_to_json(rows) -> str:
    return json.dumps([asdict(r) for r in rows], indent=2) + "\n"
