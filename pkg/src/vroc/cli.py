"""Command line driver.

Subcommands: build-vocab, pretrain, cotrain, train-baseline, evaluate,
predict, gradcheck.  Every training run writes a manifest.json (config
snapshot, dataset content hash, seed, artifact paths, timestamps) into
the output directory before training starts, so any result can be
reproduced from its manifest.  Config file values are overridden by
flags; all randomness funnels through the seed.  The VROC_THREADS
environment variable caps the worker count of `cotrain --all-tasks`.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from vroc import gradsuite
from vroc import heads as heads_mod
from vroc import metrics as metrics_mod
from vroc import training as training_mod
from vroc import vae as vae_mod
from vroc.checkpoint import save_tensors
from vroc.text import build_vocab, encode_tokens, load_dataset, pad_batch, tokenize
from vroc.training import CoTrainConfig

PROTOCOL_NAMES = {"holdout": "holdout", "loo": "leave-one-out",
                  "loo-all": "leave-one-out-all-events"}


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir, command: str, config: CoTrainConfig,
                   data_path=None, artifacts=None) -> str:
    """Record how a run was produced; written before any training."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "seed": config.seed,
        "data_path": str(data_path) if data_path else None,
        "dataset_sha256": _sha256(data_path) if data_path else None,
        "artifacts": artifacts or {},
        "created_utc": _utc_now(),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_config(args) -> CoTrainConfig:
    """Config file (when given) with flag overrides on top."""
    if getattr(args, "config", None):
        config = CoTrainConfig.load(args.config)
    else:
        config = CoTrainConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "frozen", False):
        config.mode = "frozen-baseline"
    lam = getattr(args, "lambda_weight", None)
    if lam is not None:
        tasks = [args.task] if getattr(args, "task", None) else list(heads_mod.TASKS)
        for task in tasks:
            setattr(config, f"lambda_{task}", lam)
    return config.validate()


def _worker_count(n_jobs: int) -> int:
    cap = os.environ.get("VROC_THREADS")
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError:
            raise ValueError(f"VROC_THREADS must be an integer, got {cap!r}") from None
        if cap < 1:
            raise ValueError(f"VROC_THREADS must be >= 1, got {cap}")
        return min(n_jobs, cap)
    return min(n_jobs, os.cpu_count() or 1)


def _write_reports(out_dir, reports) -> dict:
    text = metrics_mod.render_report(reports)
    tsv = metrics_mod.report_tsv(reports)
    paths = {"metrics_txt": os.path.join(out_dir, "metrics.txt"),
             "metrics_tsv": os.path.join(out_dir, "metrics.tsv")}
    with open(paths["metrics_txt"], "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(paths["metrics_tsv"], "w", encoding="utf-8") as fh:
        fh.write(tsv)
    print(text, end="")
    return paths


def _headline_macro_f1(reports: dict) -> float:
    if "aggregate" in reports:
        return reports["aggregate"].macro_f1
    return float(np.mean([r.macro_f1 for r in reports.values()]))


def _assert_threshold(reports: dict, threshold) -> int:
    if threshold is None:
        return 0
    got = _headline_macro_f1(reports)
    if got >= threshold:
        print(f"macro-F1 {got:.4f} >= required {threshold:.4f}")
        return 0
    print(f"macro-F1 {got:.4f} below required {threshold:.4f}", file=sys.stderr)
    return 1


def cmd_build_vocab(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    vocab = build_vocab([list(ex.tokens) for ex in dataset], config.min_freq)
    os.makedirs(args.out, exist_ok=True)
    vocab_path = os.path.join(args.out, "vocab.txt")
    write_manifest(args.out, "build-vocab", config, args.data,
                   {"vocab": vocab_path})
    vocab.save(vocab_path)
    print(f"vocabulary of {len(vocab)} tokens ({len(vocab) - 4} learned) "
          f"written to {vocab_path}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    if len(dataset) == 0:
        raise ValueError(f"{args.data} contains no usable examples")
    os.makedirs(args.out, exist_ok=True)
    paths = {"checkpoint": os.path.join(args.out, "checkpoint.bin"),
             "vocab": os.path.join(args.out, "vocab.txt"),
             "history": os.path.join(args.out, "history.tsv")}
    write_manifest(args.out, "pretrain", config, args.data, paths)
    result = training_mod.pretrain_vae(dataset, config)
    result.vocab.save(paths["vocab"])
    save_tensors(paths["checkpoint"], result.params.tensors())
    with open(paths["history"], "w", encoding="utf-8") as fh:
        fh.write(training_mod.pretrain_history_tsv(result.history))
    print(f"pretrained VAE (best epoch {result.best_epoch}) written to {args.out}")
    return 0


def _train_one_task(data_path: str, task: str, protocol: str, config_dict: dict,
                    held_out_event, out_dir: str):
    """Worker for one task (runs in its own process under --all-tasks)."""
    config = CoTrainConfig.from_dict(config_dict)
    dataset = load_dataset(data_path)
    reports, tsets = training_mod.run_protocol_impl(
        dataset, task, protocol, config, held_out_event)
    os.makedirs(out_dir, exist_ok=True)
    for name, tset in tsets.items():
        training_mod.save_set(tset, os.path.join(out_dir, name))
    report_rows = {name: (rep.macro_f1, rep.accuracy) for name, rep in reports.items()}
    _write_reports(out_dir, reports)
    return task, report_rows, reports


def cmd_cotrain(args) -> int:
    config = _load_config(args)
    if not args.all_tasks and not args.task:
        raise ValueError("cotrain needs --task or --all-tasks")
    tasks = list(heads_mod.TASKS) if args.all_tasks else [args.task]
    protocol = PROTOCOL_NAMES[args.protocol]
    os.makedirs(args.out, exist_ok=True)
    artifacts = {task: os.path.join(args.out, task) for task in tasks}
    write_manifest(args.out, "cotrain" if config.mode == "cotrain" else "train-baseline",
                   config, args.data, artifacts)

    all_reports: dict = {}
    if len(tasks) > 1:
        workers = _worker_count(len(tasks))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_one_task, args.data, task, protocol,
                                   config.to_dict(), args.held_out_event,
                                   artifacts[task])
                       for task in tasks]
            for fut in futures:
                task, _, reports = fut.result()
                all_reports.update({f"{task}:{k}": v for k, v in reports.items()})
    else:
        task = tasks[0]
        _, _, reports = _train_one_task(args.data, task, protocol, config.to_dict(),
                                        args.held_out_event, artifacts[task])
        all_reports.update(reports)

    return _assert_threshold(all_reports, args.assert_min_macro_f1)


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    if args.model:
        tset = training_mod.load_set(args.model)
        report = training_mod.evaluate_set(tset, dataset)
        reports = {tset.task: report}
    else:
        if not args.task:
            raise ValueError("evaluate needs --task (or --model DIR)")
        protocol = PROTOCOL_NAMES[args.protocol]
        reports, _ = training_mod.run_protocol_impl(
            dataset, args.task, protocol, config, args.held_out_event)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_manifest(args.out, "evaluate", config, args.data)
        _write_reports(args.out, reports)
    else:
        print(metrics_mod.render_report(reports), end="")
    return _assert_threshold(reports, args.assert_min_macro_f1)


def cmd_predict(args) -> int:
    tset = training_mod.load_set(args.model)
    if args.task and args.task != tset.task:
        raise ValueError(f"model in {args.model} is a {tset.task} model, not {args.task}")
    ids = encode_tokens(tokenize(args.text), tset.vocab, tset.config.max_len)
    batch, mask = pad_batch([ids])
    mu, _ = vae_mod.encode(tset.vae.encoder, batch, mask)
    probs = heads_mod.head_forward(tset.head, mu).data[0]
    label = tset.classes[int(np.argmax(probs))]
    print(label)
    for cls, p in zip(tset.classes, probs):
        print(f"  {cls}\t{p:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradsuite.run_suite(seed=args.seed if args.seed is not None else 0)
    print(gradsuite.format_results(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vroc",
        description="Multi-task rumor classification with a co-trained text VAE.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out_required=True):
        if data:
            p.add_argument("--data", required=True, help="JSONL dataset path")
        p.add_argument("--config", help="JSON config file (CoTrainConfig schema)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("build-vocab", help="build and save a vocabulary")
    common(p)

    p = sub.add_parser("pretrain", help="pretrain the VAE alone")
    common(p)

    for name, help_text in (("cotrain", "co-train VAE and head per task"),
                            ("train-baseline", "train the frozen two-stage baseline")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--task", choices=list(heads_mod.TASKS))
        p.add_argument("--all-tasks", action="store_true",
                       help="train all four tasks (VROC_THREADS caps workers)")
        p.add_argument("--protocol", choices=list(PROTOCOL_NAMES), default="holdout")
        p.add_argument("--held-out-event", help="event for the loo protocol")
        p.add_argument("--lambda", dest="lambda_weight", type=float,
                       help="task loss weight")
        if name == "cotrain":
            p.add_argument("--frozen", action="store_true",
                           help="freeze the VAE (baseline mode)")
        p.add_argument("--assert-min-macro-f1", type=float,
                       help="exit 1 if the headline macro-F1 is below this")

    p = sub.add_parser("evaluate", help="run a protocol (or score a saved model)")
    common(p, out_required=False)
    p.add_argument("--task", choices=list(heads_mod.TASKS))
    p.add_argument("--protocol", choices=list(PROTOCOL_NAMES), default="holdout")
    p.add_argument("--held-out-event")
    p.add_argument("--model", help="saved model directory to score as-is")
    p.add_argument("--frozen", action="store_true", help="baseline mode")
    p.add_argument("--lambda", dest="lambda_weight", type=float)
    p.add_argument("--assert-min-macro-f1", type=float)

    p = sub.add_parser("predict", help="classify one text with a saved model")
    p.add_argument("--model", required=True, help="saved model directory")
    p.add_argument("--task", choices=list(heads_mod.TASKS),
                   help="sanity check against the model's task")
    p.add_argument("--text", required=True, help="raw text to classify")

    p = sub.add_parser("gradcheck", help="finite-difference self check")
    p.add_argument("--seed", type=int)

    return parser


_COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "pretrain": cmd_pretrain,
    "cotrain": cmd_cotrain,
    "train-baseline": cmd_cotrain,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train-baseline":
        args.frozen = True
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
