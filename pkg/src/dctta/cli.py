"""Command-line entry point: pretrain, adapt, profile, export.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 artifact mismatch.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adaptation import ADAPT_MODES, DivergenceError, adapt_stream, prepare_params, pretrain
from .analysis import (TokenGeometry, attention_rollout, export_embeddings, profile, records_for_sample,
                       write_csv, write_metrics)
from .autograd import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dumps, load_config
from .data import corrupt_dataset, gen_synthetic_dataset, make_stream
from .model import _no_grad, model_forward, predict

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4
EXPORTS = ("class_tokens", "conditioners", "rollout")
log = logging.getLogger("dctta")


class ArtifactError(Exception):
    """Checkpoint missing, corrupt or inconsistent with the run config."""


def _datasets(cfg: RunConfig):
    d = cfg.data
    return gen_synthetic_dataset(d.classes, d.per_class, d.image_size, cfg.child_seed("dataset"),
                                 test_per_class=d.test_per_class)


def _load(cfg: RunConfig, path):
    path = Path(path) if path else cfg.output("source.ckpt")
    try:
        params = load_checkpoint(path)
    except CheckpointError as exc:
        raise ArtifactError(str(exc)) from exc
    if params.config != cfg.model:
        raise ArtifactError(f"{path}: checkpoint model config {params.config.to_dict()} does not match "
                            f"run config {cfg.model.to_dict()}")
    return params


def _subset(test, limit: int) -> np.ndarray:
    return np.arange(min(limit, len(test)))


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train, test = _datasets(cfg)
    rows = []

    def on_epoch(row):
        rows.append(row)
        log.info("epoch %d loss %.4f train accuracy %.4f", row["epoch"], row["loss"], row["train_accuracy"])

    params = pretrain(cfg.model, train, cfg.pretrain_config(), on_epoch=on_epoch)
    ckpt = save_checkpoint(params, cfg.output("source.ckpt"))
    write_csv(cfg.output("train.csv"), ("epoch", "loss", "train_accuracy"),
              ([r["epoch"], r["loss"], r["train_accuracy"]] for r in rows))
    acc = float(np.mean(predict(test.images, params) == test.labels))
    print(f"source accuracy {acc:.4f} (clean test, {len(test)} images) -> {ckpt}")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, args) -> int:
    params = _load(cfg, args.checkpoint)
    _, test = _datasets(cfg)
    spec = cfg.corruption()
    stream = make_stream(test, spec, cfg.protocol(), cfg.child_seed("corruption"))
    metrics, adapted = adapt_stream(params, stream, cfg.adapt)
    for row in metrics.rows:
        log.info("batch %d: selected %d/%d, running accuracy %.4f%s", row["batch_idx"], row["n_selected_pass1"],
                 row["n_samples"], row["running_accuracy"], " (skipped)" if row["skipped"] else "")
    write_metrics(cfg.output("metrics.csv"), metrics)
    if cfg.adapt.mode != "none":
        save_checkpoint(adapted, cfg.output("adapted.ckpt"))
    summary = {
        "run_id": cfg.run_id,
        "mode": cfg.adapt.mode,
        "corruption": spec.kind,
        "severity": spec.severity,
        "protocol": cfg.stream.protocol,
        "final_accuracy": metrics.accuracy,
        "skipped_batches": metrics.skipped_batches,
        "config": json.loads(dumps(cfg)),
    }
    path = cfg.output("summary.json")
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    print(f"{cfg.adapt.mode} {spec.kind}@{spec.severity} {cfg.stream.protocol}: "
          f"final accuracy {metrics.accuracy:.4f}")
    return EXIT_OK


def _forward_params(cfg: RunConfig, params):
    work = prepare_params(params, cfg.adapt.mode)
    work.set_trainable([])
    return work, cfg.adapt.forward_mode


def cmd_profile(cfg: RunConfig, args) -> int:
    try:
        severities = [int(s) for s in args.severities.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--severities: expected comma-separated integers, got {args.severities!r}")
    if not severities or any(not 0 <= s <= 5 for s in severities):
        raise ConfigError("--severities: values must lie in 0..5")
    work, mode = _forward_params(cfg, _load(cfg, args.checkpoint))
    _, test = _datasets(cfg)
    idx = _subset(test, args.limit)
    geom = TokenGeometry(cfg.model.grid, cfg.model.patch_size)
    rows = []
    for sev in severities:
        images = corrupt_dataset(test.images[idx], cfg.corruption(sev), cfg.child_seed("corruption"))
        with _no_grad(work):
            _, records = model_forward(images, work, mode)
        prof = profile([records], geom)
        for layer, heads in enumerate(prof.per_head):
            for head, dist in enumerate(heads):
                rows.append([cfg.stream.corruption, sev, layer, head, float(dist)])
        print(f"severity {sev}: per-layer distance " + " ".join(f"{d:.3f}" for d in prof.per_layer))
    write_csv(cfg.output("profile.csv"), ("corruption", "severity", "layer", "head", "distance"), rows)
    return EXIT_OK


def cmd_export(cfg: RunConfig, args) -> int:
    if args.what not in EXPORTS:
        raise ConfigError(f"--what: unknown export {args.what!r}; expected one of {EXPORTS}")
    if args.what == "conditioners" and cfg.adapt.mode in ("ln-only", "none"):
        raise ConfigError(f"--what conditioners: mode {cfg.adapt.mode!r} has no conditioners")
    work, mode = _forward_params(cfg, _load(cfg, args.checkpoint))
    _, test = _datasets(cfg)
    idx = _subset(test, args.limit)
    spec = cfg.corruption()
    domains = {"clean": test.images[idx],
               f"{spec.kind}@{spec.severity}": corrupt_dataset(test.images[idx], spec, cfg.child_seed("corruption"))}
    if args.what == "rollout":
        rows = []
        for tag, images in domains.items():
            with _no_grad(work):
                _, records = model_forward(images, work, mode)
            for i, sid in enumerate(idx):
                sal, flag = attention_rollout(records_for_sample(records, i), records[0].has_conditioner)
                rows.append([int(sid), tag, int(test.labels[sid]), int(flag)] + [float(v) for v in sal])
        header = ["sample_id", "domain", "label", "degenerate"] + [f"p{j}" for j in range(cfg.model.num_patches)]
        path = write_csv(cfg.output("rollout.csv"), header, rows)
    else:
        images = np.concatenate(list(domains.values()))
        tags = np.repeat(list(domains), len(idx))
        ids = np.tile(idx, len(domains))
        path = cfg.output("embed.csv")
        rows = export_embeddings(work, images, test.labels[ids], ids, tags, args.what, mode, path)
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "profile": cmd_profile, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dctta", description="Domain-conditioned test-time adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="override out_dir")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "pretrain":
            p.add_argument("--checkpoint", help="defaults to {out_dir}/{run_id}.source.ckpt")
            p.add_argument("--mode", choices=ADAPT_MODES, help="override adapt.mode")
        if name in ("profile", "export"):
            p.add_argument("--limit", type=int, default=200, help="evaluation subset size (first test ids)")
        if name == "profile":
            p.add_argument("--severities", default="0,1,3,5")
        if name == "export":
            p.add_argument("--what", default="class_tokens")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, adapt=dataclasses.replace(cfg.adapt, mode=args.mode))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
