"""Operator entry points.

Every subcommand is batch-oriented and deterministic for a fixed config and
seed (bench's wall-clock columns excepted). Exit codes are a stable
contract: 0 success, 2 usage error, 3 data or format error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys

import numpy as np

from . import data as datamod
from . import embedder, evalkit, registry, trainer
from .errors import ConfigurationError, DataError, GelatoError, NumericError
from .profiles import MODALITIES, TASK_VARIANTS, get_profile

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ------------------------------------------------------------- config files

def parse_config(path: str) -> dict:
    """key=value lines; '#' starts a comment; unknown keys are the caller's
    problem to reject."""
    cfg = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def parse_scope(text: str) -> trainer.FreezeScope:
    if text == "full":
        return trainer.full_scope()
    if text.startswith("custom:"):
        names = tuple(n for n in text[len("custom:"):].split(",") if n)
        return trainer.FreezeScope.custom(*names)
    return trainer.FreezeScope(text)


def parse_data_spec(text: str, base_dir: str) -> trainer.MixtureSpec:
    """"path[:weight],path[:weight],..." with paths relative to the config."""
    entries = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            path, weight = part.rsplit(":", 1)
            entries.append((os.path.join(base_dir, path), float(weight)))
        else:
            entries.append((os.path.join(base_dir, part), 1.0))
    if not entries:
        raise ConfigurationError("empty data specification")
    return datamod.mixture_from_config(entries)


_TRAIN_KEYS = {
    "profile", "task", "modality", "data", "init", "build_seed",
    "steps", "batch_size", "lr_max", "warmup_steps", "beta1", "beta2",
    "weight_decay", "eps", "max_grad_norm", "tau", "k_set", "seed",
    "scope", "stage2_scope", "stage2_lr", "stage2_steps", "stage2_warmup",
    "eval_interval",
}


def train_config_from_file(path: str):
    raw = parse_config(path)
    unknown = set(raw) - _TRAIN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(path))

    cfg = trainer.TrainConfig(
        lr_max=float(raw.get("lr_max", 2e-4)),
        warmup_steps=int(raw.get("warmup_steps", 500)),
        beta1=float(raw.get("beta1", 0.9)),
        beta2=float(raw.get("beta2", 0.999)),
        weight_decay=float(raw.get("weight_decay", 0.01)),
        eps=float(raw.get("eps", 1e-8)),
        max_grad_norm=float(raw.get("max_grad_norm", 1.0)),
        batch_size=int(raw.get("batch_size", 256)),
        steps=int(raw.get("steps", 15000)),
        tau=float(raw.get("tau", 0.02)),
        k_set=tuple(int(k) for k in raw["k_set"].split(",")) if "k_set" in raw else None,
        seed=int(raw.get("seed", 0)),
        scope=parse_scope(raw.get("scope", "projector_only")),
        eval_interval=int(raw.get("eval_interval", 100)),
    )
    if "stage2_scope" in raw:
        cfg.stage2 = trainer.Stage2Config(
            scope=parse_scope(raw["stage2_scope"]),
            lr_max=float(raw.get("stage2_lr", cfg.lr_max)),
            steps=int(raw.get("stage2_steps", cfg.steps)),
            warmup_steps=int(raw.get("stage2_warmup", 0)),
        )

    if "data" not in raw:
        raise ConfigurationError("config needs a data= entry")
    mixture = parse_data_spec(raw["data"], base)

    meta = {
        "profile": raw.get("profile", "toy"),
        "task": raw.get("task", "retrieval"),
        "modality": raw.get("modality", "omni"),
        "init": os.path.join(base, raw["init"]) if "init" in raw else None,
        "build_seed": int(raw.get("build_seed", 1)),
    }
    if meta["task"] not in TASK_VARIANTS:
        raise ConfigurationError(f"unknown task {meta['task']!r}")
    if meta["modality"] not in MODALITIES:
        raise ConfigurationError(f"unknown modality {meta['modality']!r}")
    return cfg, mixture, meta


# -------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    cfg, mixture, meta = train_config_from_file(args.config)
    with open(args.config, "rb") as f:
        config_bytes = f.read()
    digest = hashlib.sha256(config_bytes).hexdigest()[:12]
    run_dir = os.path.join(args.out, f"{digest}-s{cfg.seed}")
    os.makedirs(run_dir, exist_ok=True)
    shutil.copyfile(args.config, os.path.join(run_dir, "config.txt"))

    if meta["init"]:
        bundle = registry.load(meta["init"], meta["task"], meta["modality"])
    else:
        ckpt = registry.build_model(get_profile(meta["profile"]), meta["build_seed"])
        bundle = registry.bundle_from_checkpoint(ckpt, meta["task"], meta["modality"])

    result = trainer.train(bundle, mixture, cfg)
    trainer.write_trace(os.path.join(run_dir, "trace.tsv"), result.trace)
    registry.save_bundle(result.bundle, os.path.join(run_dir, "checkpoint.gela"))
    print(run_dir)
    return EXIT_OK


def _load_bundle(args):
    return registry.load(args.checkpoint, args.task, args.modality)


def cmd_embed(args) -> int:
    bundle = _load_bundle(args)
    items = datamod.load_item_manifest(args.input)
    embeddings = embedder.embed_batch([item for _, item in items], bundle)
    if args.dim is not None:
        vectors = [embedder.truncate(e, args.dim) for e in embeddings]
    else:
        vectors = [e.full for e in embeddings]
    ids = [item_id for item_id, _ in items]
    if args.format == "binary":
        embedder.write_embeddings_binary(args.out, ids, vectors)
    else:
        embedder.write_embeddings_text(args.out, ids, vectors)
    print(args.out)
    return EXIT_OK


def _load_retrieval_task(args) -> evalkit.RetrievalTask:
    queries = datamod.load_item_manifest(args.queries)
    corpus = datamod.load_item_manifest(args.corpus)
    qrels = {}
    with open(args.qrels) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigurationError(f"{args.qrels}:{lineno}: expected qid<TAB>did<TAB>rel")
            qrels[(parts[0], parts[1])] = int(parts[2])
    return evalkit.RetrievalTask(queries=queries, corpus=corpus, qrels=qrels)


def cmd_eval(args) -> int:
    bundle = _load_bundle(args)
    task = _load_retrieval_task(args)
    dims = [int(k) for k in args.dims.split(",")] if args.dims else [bundle.profile.d_text]
    report = evalkit.retrieval_eval(task, bundle, dims, label=f"{args.task}/{args.modality}")
    text = report.to_text()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    bundle = _load_bundle(args)
    task = _load_retrieval_task(args)
    dims = sorted(set(bundle.profile.k_set) | {bundle.profile.d_text})
    if args.dims:
        dims = [int(k) for k in args.dims.split(",")]
    report = evalkit.retrieval_eval(task, bundle, dims, label=f"{args.task}/{args.modality}")
    with open(args.out, "w") as f:
        f.write(report.to_text())
    if args.plot_out:
        with open(args.plot_out, "w") as f:
            f.write(report.plot_data())
    sys.stdout.write(report.to_text())
    return EXIT_OK


_ABLATE_KEYS = {
    "checkpoint", "profile", "build_seed", "task", "suite", "steps",
    "batch_size", "seed", "data", "lr_fast", "lr_slow", "warmup_steps",
    "eval_interval", "tau", "k_set",
}


def cmd_ablate(args) -> int:
    raw = parse_config(args.config)
    unknown = set(raw) - _ABLATE_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    base = os.path.dirname(os.path.abspath(args.config))

    suite_name = raw.get("suite", "vision")
    steps = int(raw.get("steps", 100))
    lr_fast = float(raw.get("lr_fast", 2e-4))
    lr_slow = float(raw.get("lr_slow", 1e-5))
    if suite_name == "vision":
        specs = evalkit.vision_ablation_suite(steps, lr_fast, lr_slow)
        prefixes = ("vproj/fc2/", "vision/")
    elif suite_name == "audio":
        specs = evalkit.audio_ablation_suite(steps, lr_fast, lr_slow)
        prefixes = ("aproj/", "audio/")
    else:
        raise ConfigurationError(f"unknown suite {suite_name!r}; expected vision or audio")

    task = raw.get("task", "retrieval")
    if "checkpoint" in raw:
        bundle = registry.load(os.path.join(base, raw["checkpoint"]), task, "omni")
    else:
        ckpt = registry.build_model(get_profile(raw.get("profile", "toy")),
                                    int(raw.get("build_seed", 1)))
        bundle = registry.bundle_from_checkpoint(ckpt, task, "omni")

    mixture = parse_data_spec(raw["data"], base)
    cfg = trainer.TrainConfig(
        batch_size=int(raw.get("batch_size", 16)),
        warmup_steps=int(raw.get("warmup_steps", 50)),
        seed=int(raw.get("seed", 0)),
        tau=float(raw.get("tau", 0.02)),
        k_set=tuple(int(k) for k in raw["k_set"].split(",")) if "k_set" in raw else None,
        eval_interval=int(raw.get("eval_interval", 100)),
    )

    report = evalkit.run_ablation_suite(
        specs, bundle, mixture, cfg,
        primary_prefix=prefixes[0], encoder_prefix=prefixes[1],
    )
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.tsv"), "w") as f:
        f.write(report.to_text())
    for name, trace in report.traces.items():
        trainer.write_trace(os.path.join(args.out, f"trace_{name}.tsv"), trace)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    bundle = _load_bundle(args)
    mixture = parse_data_spec(args.data, os.getcwd())
    scopes = [(name, parse_scope(name)) for name in args.scopes.split(",")]
    cfg = trainer.TrainConfig(batch_size=args.batch_size, seed=args.seed, steps=args.budget)
    rows = trainer.measure_efficiency(
        bundle, mixture, scopes, cfg,
        warmup_steps=args.warmup, timed_steps=args.timed_steps,
    )
    if args.out:
        trainer.write_efficiency_table(args.out, rows)
    sys.stdout.write("scope\tupdated_params\tseconds_per_step\tminutes_for_budget\n")
    for r in rows:
        sys.stdout.write(
            f"{r.scope}\t{r.updated_params}\t{r.seconds_per_step:.6f}\t{r.minutes_for_budget:.3f}\n"
        )
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest, index = registry.checkpoint_index(args.checkpoint)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    total = 0
    for name in sorted(index):
        dims, offset = index[name]
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        total += size
        print(f"{name}\t{list(dims)}\toffset={offset}")
    print(f"# {len(index)} tensors, {total} parameters")
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gelato", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="runs")
    t.set_defaults(func=cmd_train)

    def add_bundle_flags(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--task", default="retrieval", choices=TASK_VARIANTS)
        sp.add_argument("--modality", default="omni", choices=MODALITIES)

    e = sub.add_parser("embed", help="embed a manifest of items")
    add_bundle_flags(e)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dim", type=int, default=None)
    e.add_argument("--format", default="binary", choices=("binary", "text"))
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("eval", help="score a retrieval task")
    add_bundle_flags(v)
    v.add_argument("--queries", required=True)
    v.add_argument("--corpus", required=True)
    v.add_argument("--qrels", required=True)
    v.add_argument("--dims", default=None)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="truncation sweep over the profile's prefix set")
    add_bundle_flags(s)
    s.add_argument("--queries", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--qrels", required=True)
    s.add_argument("--dims", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--plot-out", default=None)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="run a freeze-scope comparison suite")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="compare update cost across scopes")
    add_bundle_flags(b)
    b.add_argument("--data", required=True)
    b.add_argument("--scopes", default="projector_only,full")
    b.add_argument("--batch-size", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--timed-steps", type=int, default=50)
    b.add_argument("--budget", type=int, default=15000,
                   help="step budget used for the projected-minutes column")
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", help="print a checkpoint's manifest and tensor index")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except GelatoError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
