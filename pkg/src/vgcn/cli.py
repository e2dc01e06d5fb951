"""Command-line entry point: ``vgcn <command> ...`` or ``python -m vgcn <command> ...``.

Exit codes: 0 success, 2 configuration, 3 data, 4 model compatibility,
5 capability (the model has no attention), 1 replay mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    CheckpointError,
    CompatibilityError,
    ConfigError,
    DataError,
    UnsupportedModelError,
)

EXIT_OK, EXIT_MISMATCH, EXIT_CONFIG, EXIT_DATA, EXIT_COMPAT, EXIT_CAPABILITY = 0, 1, 2, 3, 4, 5

OUTPUT_FLAGS = ("--out", "--json", "--metrics")


class CapabilityError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(out) -> Path:
    return Path(out).with_suffix(".manifest.json")


def write_manifest(command: str, argv: list, config: dict, seed, inputs: list, outputs: list,
                   started: float) -> Path:
    doc = {
        "command": command,
        "argv": list(argv),
        "cwd": str(Path.cwd()),
        "config": config,
        "seed": seed,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "version": __version__,
        "duration_seconds": round(time.perf_counter() - started, 6),
    }
    path = manifest_path(outputs[0])
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return path


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, argv, started) -> int:
    from .data import gen_ego_task, gen_skeleton_task, save_dataset

    if args.task == "ego":
        cfg = {"task": "ego", "n_samples": args.samples, "n_nodes_range": [args.nodes_min, args.nodes_max],
               "n_features": args.features, "rule": args.rule, "noise": args.noise, "seed": args.seed}
        ds = gen_ego_task(args.samples, (args.nodes_min, args.nodes_max), args.features, args.rule,
                          args.noise, args.seed)
    else:
        cfg = {"task": "skeleton", "n_samples": args.samples, "n_joints": args.joints, "T": args.frames,
               "motion_classes": args.classes, "noise": args.noise, "seed": args.seed,
               "channels": args.channels}
        ds = gen_skeleton_task(args.samples, args.joints, args.frames, args.classes, args.noise, args.seed,
                               args.channels)
    save_dataset(ds, args.out)
    write_manifest("generate", argv, cfg, args.seed, [], [args.out], started)
    return EXIT_OK


def _arch_for(doc: dict, ds) -> dict:
    arch = dict(doc.get("architecture", doc))
    arch.setdefault("in_channels", ds.n_features)
    arch.setdefault("n_classes", ds.n_classes)
    if ds.kind == "spatiotemporal":
        arch.setdefault("n_nodes", ds.n_nodes)
    return arch


def cmd_train(args, argv, started) -> int:
    from .data import load_dataset
    from .models import ArchConfig, Model
    from .training import TrainConfig, init_from_pretrained, load_checkpoint, save_checkpoint, train

    doc = _read_json(args.config, "config")
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    ds = load_dataset(args.data)
    arch = ArchConfig.from_dict(_arch_for(doc, ds))
    if arch.is_temporal != (ds.kind == "spatiotemporal"):
        raise CompatibilityError(f"a {arch.kind} model cannot train on a {ds.kind} dataset")
    tdict = dict(doc.get("training", {}))
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
                      ("optimizer", "optimizer"), ("train_samples", "train_samples_per_input"),
                      ("eval_samples", "eval_samples")):
        if getattr(args, flag) is not None:
            tdict[key] = getattr(args, flag)
    tdict["seed"] = args.seed
    tcfg = TrainConfig.from_dict(tdict)
    model = Model(arch, seed=args.seed)
    inputs = [args.config, args.data]
    if args.pretrained:
        source = load_checkpoint(args.pretrained)
        model = init_from_pretrained(model, source, args.init_variance)
        inputs.append(args.pretrained)
    result = train(model, ds, tcfg)
    save_checkpoint(result.model, args.out, {"seed": args.seed, "epoch": result.best_epoch,
                                             "pretrained": bool(args.pretrained)})
    metrics = args.metrics or str(Path(args.out).with_suffix(".metrics.csv"))
    Path(metrics).write_text(result.log_csv())
    cfg = {"architecture": arch.to_dict(), "training": tcfg.to_dict(),
           "init_variance": args.init_variance if args.pretrained else None}
    write_manifest("train", argv, cfg, args.seed, inputs, [args.out, metrics], started)
    return EXIT_OK


def _split(ds, which: str):
    from .data import split_indices

    if which == "all":
        return np.arange(len(ds))
    train_idx, val_idx, test_idx = split_indices(len(ds))
    return {"train": train_idx, "val": val_idx, "test": test_idx}[which]


def cmd_eval(args, argv, started) -> int:
    from .data import load_dataset
    from .metrics import evaluate_predictions
    from .training import load_checkpoint, predict_dataset

    if args.samples < 1:
        raise ConfigError("--samples must be >= 1")
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    idx = _split(ds, args.split)
    probs, var = predict_dataset(model, ds, idx, args.samples, args.seed)
    averaging = "binary" if (ds.kind == "spatial" and ds.n_classes == 2) else "macro"
    report = evaluate_predictions(probs, ds.labels[idx], args.samples, var, averaging, ds.n_classes)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.json:
        Path(args.json).write_text(text)
        write_manifest("eval", argv, {"samples": args.samples, "split": args.split}, args.seed,
                       [args.ckpt, args.data], [args.json], started)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _sample_input(ds, index: int):
    from .models import GraphBatch

    if not 0 <= index < len(ds):
        raise ConfigError(f"sample index {index} outside 0..{len(ds) - 1}")
    s = ds.samples[index]
    if ds.kind == "spatial":
        return s.features[None], GraphBatch(s.graph.adjacency)
    return s.features[None], ds.partitions


def cmd_attention(args, argv, started) -> int:
    from .data import load_dataset
    from .rng import RandomStream
    from .training import load_checkpoint
    from .uncertainty import attention_to_dot, attention_to_json, mc_attention

    model = load_checkpoint(args.ckpt)
    if not model.has_attention:
        raise CapabilityError("model has no attention")
    if args.samples < 2:
        raise ConfigError("--samples must be >= 2")
    ds = load_dataset(args.data)
    x, graph = _sample_input(ds, args.sample_index)
    uas = [u.select(0) for u in mc_attention(model, x, graph, args.samples, RandomStream(args.seed))]
    if args.format == "json":
        text = json.dumps(attention_to_json(uas), sort_keys=True, indent=1) + "\n"
    else:
        text = attention_to_dot(uas)
    Path(args.out).write_text(text)
    write_manifest("attention", argv, {"sample_index": args.sample_index, "samples": args.samples,
                                       "format": args.format}, args.seed, [args.ckpt, args.data],
                   [args.out], started)
    return EXIT_OK


def cmd_convert_fmci(args, argv, started) -> int:
    from .data import load_dataset
    from .rng import RandomStream
    from .training import load_checkpoint, save_checkpoint
    from .uncertainty import FilterConfig, convert_vgat_to_fmci

    model = load_checkpoint(args.ckpt)
    if model.kind != "vgat":
        raise UnsupportedModelError(f"only vgat checkpoints convert, got {model.kind}")
    if args.samples < 2:
        raise ConfigError("--samples must be >= 2")
    cfg = FilterConfig(args.limit, args.replacement, args.rule)
    ds = load_dataset(args.data)
    sample = _sample_input(ds, args.calibration_index)
    out = convert_vgat_to_fmci(model, sample, args.samples, cfg, RandomStream(args.seed))
    save_checkpoint(out, args.out)
    write_manifest("convert-fmci", argv, {"limit": args.limit, "replacement": args.replacement,
                                          "rule": args.rule, "samples": args.samples,
                                          "calibration_index": args.calibration_index},
                   args.seed, [args.ckpt, args.data], [args.out], started)
    return EXIT_OK


def _retarget(argv: list, into: Path) -> tuple[list, dict]:
    """Point every output flag of ``argv`` into ``into``; returns the new argv and old->new paths."""
    out, moved = [], {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        flag, eq, val = tok.partition("=")
        if flag in OUTPUT_FLAGS:
            if eq:
                new = str(into / Path(val).name)
                moved[val] = new
                out.append(f"{flag}={new}")
            else:
                val = argv[i + 1]
                new = str(into / Path(val).name)
                moved[val] = new
                out += [flag, new]
                i += 1
        else:
            out.append(tok)
        i += 1
    return out, moved


def cmd_replay(args, argv, started) -> int:
    doc = _read_json(args.manifest, "manifest")
    try:
        recorded, outputs = doc["argv"], doc["outputs"]
    except (KeyError, TypeError):
        raise DataError(f"{args.manifest} is not a run manifest") from None
    tmp = Path(tempfile.mkdtemp(prefix="vgcn-replay-"))
    here = Path.cwd()
    try:
        # relative input paths were recorded against the original working directory
        os.chdir(doc.get("cwd", here))
        new_argv, moved = _retarget(recorded, tmp)
        code = main(new_argv)
        if code != EXIT_OK:
            print(f"replay exited with code {code}", file=sys.stderr)
            return code
        bad = []
        for path, digest in outputs.items():
            target = moved.get(path)
            if target is None:
                # derived outputs (e.g. metrics next to the checkpoint) follow their flag's directory
                target = str(tmp / Path(path).name)
            if not Path(target).exists() or sha256_file(target) != digest:
                bad.append(path)
        for path in outputs:
            print(f"{'DIFFERS' if path in bad else 'identical'} {path}")
        return EXIT_MISMATCH if bad else EXIT_OK
    finally:
        os.chdir(here)
        shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vgcn", description="Variational graph networks with uncertain attention.")
    p.add_argument("--version", action="version", version=f"vgcn {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--task", choices=("ego", "skeleton"), required=True)
    g.add_argument("--samples", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--nodes-min", type=int, default=5)
    g.add_argument("--nodes-max", type=int, default=9)
    g.add_argument("--features", type=int, default=4)
    g.add_argument("--rule", choices=("neighbor-majority", "xor-pair"), default="neighbor-majority")
    g.add_argument("--joints", type=int, default=7)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--channels", type=int, default=2)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from an architecture config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--pretrained")
    t.add_argument("--init-variance", type=float, default=1e-3)
    t.add_argument("--metrics")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--optimizer", choices=("sgd", "sgd-momentum", "adam"))
    t.add_argument("--train-samples", type=int)
    t.add_argument("--eval-samples", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Monte Carlo evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--samples", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="test")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("attention", help="export Monte Carlo attention of one sample")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--sample-index", type=int, default=0)
    a.add_argument("--samples", type=int, default=32)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--format", choices=("json", "dot"), default="json")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attention)

    c = sub.add_parser("convert-fmci", help="turn a VGAT checkpoint into a fully integrated one")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--samples", type=int, default=32)
    c.add_argument("--limit", type=float, default=1.0)
    c.add_argument("--replacement", type=float, default=0.01)
    c.add_argument("--rule", choices=("as-written", "consistent"), default="as-written")
    c.add_argument("--calibration-index", type=int, default=0)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_convert_fmci)

    r = sub.add_parser("replay", help="re-run a recorded command and compare its outputs")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.perf_counter()
    try:
        return args.func(args, argv, started)
    except CapabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (CompatibilityError, UnsupportedModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
