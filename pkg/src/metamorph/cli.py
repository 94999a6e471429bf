"""Command-line entry point: ``metamorph <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .artifacts import (MANIFEST_FILE, METRICS_FILE, INR_FILE, load_inr, load_prior, save_inr, save_prior,
                        write_metrics)
from .config import RunConfig, build_manifest, load_config
from .errors import MetamorphError
from .morphnet import ConfigurationPool, instantiate_config
from .persist import atomic_write
from .prior import smooth, train_prior
from .report import EvalRow, evaluate, parse_gammas, rows_to_csv, rows_to_json, sweep
from .rng import RngStream
from .sampler import export_model, load_model, sample_weights
from .trainer import Ablation, Trainer

log = logging.getLogger("metamorph")


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def cmd_train_prior(args) -> int:
    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    manifest = build_manifest("train-prior", cfg, seed, [args.config] if args.config else [])
    train, test = cfg.dataset("train"), cfg.dataset("test")
    net = train_prior(cfg.spec, train, cfg.prior_recipe, RngStream(seed),
                      on_epoch=lambda e, loss, acc: log.info("epoch %d loss %.4f acc %.4f", e, loss, acc))
    acc = net.accuracy(test)
    save_prior(args.out, net, {"manifest": manifest.to_dict(), "manifest_hash": manifest.hash, "test_accuracy": acc})
    print(f"prior test accuracy {acc:.4f} -> {args.out}")
    return 0


def cmd_smooth(args) -> int:
    net, meta = load_prior(args.input)
    out, records = smooth(net, args.scope)
    print("space,tv_before,tv_after")
    for r in records:
        print(f"{r.space},{r.tv_before:.6f},{r.tv_after:.6f}")
    info = {k: v for k, v in meta.items() if k in ("manifest", "manifest_hash", "test_accuracy")}
    info["smoothing_scope"] = args.scope
    info["source_hash"] = meta.get("manifest_hash")
    save_prior(args.out, out, info)
    return 0


def cmd_train_inr(args) -> int:
    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    prior, _ = load_prior(args.prior)
    if not prior.folded:
        prior, _ = smooth(prior, cfg.smoothing_scope)
    ablation = Ablation(incremental=not args.no_incremental, alpha_scaling=not args.no_alpha,
                        grad_accum=not args.no_accum, pre_init=not args.no_init, disentangle=not args.no_disentangle)
    inputs = [args.prior] + ([args.config] if args.config else [])
    manifest = build_manifest("train-inr", cfg, seed, inputs, ablation=vars(ablation))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(prior, cfg.stage_plan(ablation), cfg.inr_config, cfg.loss_weights, seed=seed,
                      on_epoch=lambda r: log.info("stage %d epoch %d loss %.4f acc %.4f", r.stage, r.epoch, r.loss,
                                                  r.accuracy))
    trainer.train(cfg.dataset("train"))
    meta = {"manifest_hash": manifest.hash, "config": cfg.to_dict(), "seed": seed}
    save_inr(out / INR_FILE, trainer, meta)
    write_metrics(out / METRICS_FILE, trainer.history)
    atomic_write(out / MANIFEST_FILE, (json.dumps(manifest.to_dict() | {"hash": manifest.hash}, indent=2,
                                                  sort_keys=True) + "\n").encode("utf-8"))
    last = trainer.history[-1] if trainer.history else None
    print(f"trained {len(trainer.bundle.entries)} INRs; final train accuracy "
          f"{last.accuracy if last else float('nan'):.4f} -> {out}")
    return 0


def _artifact_config(artifact) -> RunConfig:
    return RunConfig.from_mapping({k: tuple(v) if isinstance(v, list) else v
                                   for k, v in artifact.meta["config"].items()})


def cmd_sample(args) -> int:
    artifact = load_inr(args.inr)
    cfg = _artifact_config(artifact)
    seed = cfg.seed if args.seed is None else args.seed
    sampler = cfg.sampler_spec(args.K, seed)
    reference = {b: artifact.spec.blocks[b].c_mid for b in artifact.meta["active"]}
    config = instantiate_config(reference, args.gamma)
    weights = sample_weights(artifact.bundle, config, sampler, pool=ConfigurationPool.for_blocks(reference))
    meta = {"inr_manifest_hash": artifact.meta.get("manifest_hash"), "K": sampler.K, "seed": seed,
            "gamma": args.gamma, "data": {k: cfg.to_dict()[k] for k in
                                         ("data_seed", "train_count", "test_count", "test_images", "test_labels")}}
    net = export_model(weights, artifact.shared, config, args.out, artifact.prior_params, artifact.spec,
                       artifact.use_alpha, meta)
    print(f"gamma {args.gamma}: {net.parameter_count()} parameters -> {args.out}")
    return 0


def _emit(text: str, report: str) -> None:
    if report in ("csv", "json"):
        sys.stdout.write(text)
    else:
        atomic_write(report, text.encode("utf-8"))


def _eval_dataset(meta: dict, args):
    if getattr(args, "config", None):
        return load_config(args.config).dataset(args.split)
    data = dict(meta.get("data", {}))
    return RunConfig.from_mapping(data).dataset(args.split)


def cmd_eval(args) -> int:
    net, meta = load_model(args.model)
    acc, ce = evaluate(net, _eval_dataset(meta, args))
    row = EvalRow(float(meta.get("gamma", 0.0)), acc, ce, net.parameter_count(), int(meta.get("seed", 0)))
    fmt = _format(args.report)
    _emit(rows_to_csv([row]) if fmt == "csv" else rows_to_json([row]), args.report)
    if args.report not in ("csv", "json"):
        print(f"accuracy {acc:.6f} ce_loss {ce:.6f}")
    return 0


def cmd_sweep(args) -> int:
    artifact = load_inr(args.inr)
    cfg = _artifact_config(artifact)
    seed = cfg.seed if args.seed is None else args.seed
    dataset = load_config(args.config).dataset(args.split) if args.config else cfg.dataset(args.split)
    rows = sweep(artifact, parse_gammas(args.gammas), dataset, cfg.sampler_spec(args.K, seed))
    _emit(rows_to_csv(rows) if _format(args.report) == "csv" else rows_to_json(rows), args.report)
    return 0


def _format(report: str) -> str:
    if report in ("csv", "json"):
        return report
    return "json" if report.endswith(".json") else "csv"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metamorph", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-prior", help="train the reference network")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_prior)

    s = sub.add_parser("smooth", help="fold BN and permute channels to minimise total variation")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scope", choices=("intra-block", "stage-wide"), default="intra-block")
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("train-inr", help="train the weight-generating INRs")
    s.add_argument("--prior", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    for flag in ("incremental", "alpha", "accum", "init", "disentangle"):
        s.add_argument(f"--no-{flag}", action="store_true")
    s.set_defaults(func=cmd_train_inr)

    s = sub.add_parser("sample", help="export a standalone network at one compression ratio")
    s.add_argument("--inr", required=True)
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--K", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="accuracy and cross-entropy of an exported network")
    s.add_argument("--model", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--config", help="evaluate on this configuration's data instead")
    s.add_argument("--report", default="json", help="csv, json, or an output path (.csv/.json)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="accuracy against compression ratio")
    s.add_argument("--inr", required=True)
    s.add_argument("--gammas", default="0.0:0.95:0.05")
    s.add_argument("--K", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--config")
    s.add_argument("--report", default="csv")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (MetamorphError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"metamorph {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
