"""Command-line interface: training, sampling, evaluation, projection, and
dataset materialization as subcommands over the library.

Every run writes `run.json` (resolved config + arguments) under --out-dir
and prints a single-line JSON summary to stdout.  Exit codes: 0 success,
1 invalid usage/config/input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import data, evalmetrics, training
from .checkpoint import CheckpointError, load_checkpoint
from .config import TrainConfig, config_to_dict, load_config, parse_config_text
from .data import DataError
from .tensor import NonFiniteError

CLASSIFIER_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage problems are exit 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _add_config_flags(sub):
    """One CLI flag per config field, plus --config for the file."""
    sub.add_argument("--config", default=None, help="key = value config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            sub.add_argument(flag, action="store_true", default=None)
        else:
            sub.add_argument(flag, default=None, metavar=f.name.upper())
    return sub


def _overrides(args):
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _grid(text):
    try:
        r, c = text.lower().split("x")
        r, c = int(r), int(c)
    except ValueError:
        raise _UsageError(f"--grid wants ROWSxCOLS, got {text!r}")
    if r < 1 or c < 1:
        raise _UsageError("--grid dimensions must be >= 1")
    return r, c


def _write_run_json(out_dir, command, cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, "config": config_to_dict(cfg)}
    payload.update(extra or {})
    path = os.path.join(out_dir, "run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _emit(summary):
    print(json.dumps(summary, sort_keys=True))


def _config_from_checkpoint(path, args):
    """Rebuild the saved run's config, letting CLI flags override it."""
    _, cfg_text, _ = load_checkpoint(path)
    base = parse_config_text(cfg_text) if cfg_text.strip() else {}
    return load_config(args.config, _overrides(args), base=base)


def _generator_from(path, fallback_cfg):
    """Rebuild a generator using the architecture recorded in its own
    checkpoint; the surrounding command's config only fills gaps."""
    arrays, cfg_text, _ = load_checkpoint(path)
    if "g.dense.w" not in arrays:
        raise CheckpointError(f"{path}: no generator tensors inside")
    cfg = (load_config(None, parse_config_text(cfg_text))
           if cfg_text.strip() else fallback_cfg)
    label_dim = arrays["g.dense.w"].shape[0] - cfg.latent_dim
    if label_dim < 0:
        raise CheckpointError(f"{path}: latent_dim {cfg.latent_dim} larger than stored input")
    return training.load_generator(cfg, path, label_dim > 0, label_dim)


def _classifier_from(path, cfg):
    arrays, cfg_text, _ = load_checkpoint(path)
    if "c.class.w" not in arrays:
        raise CheckpointError(f"{path}: no classifier tensors inside")
    classes = arrays["c.class.w"].shape[1]
    stored = load_config(None, parse_config_text(cfg_text)) if cfg_text.strip() else cfg
    return training.load_classifier(stored, path, classes)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_train_classifier(args):
    cfg = load_config(args.config, _overrides(args), base=CLASSIFIER_DEFAULTS)
    _write_run_json(cfg.out_dir, "train-classifier", cfg)
    _, summary = training.train_classifier(cfg, log=_log)
    _emit({
        "command": "train-classifier", "seed": cfg.seed,
        "final_accuracy": summary["final_accuracy"], "steps": summary["steps"],
        "checkpoint": summary["checkpoint"], "accuracy_csv": summary["accuracy_csv"],
    })
    return 0


def _cmd_train_gan(args, conditional):
    cfg = load_config(args.config, _overrides(args))
    name = "train-cgan" if conditional else "train-gan"
    _write_run_json(cfg.out_dir, name, cfg, {"resume": args.resume})
    _, _, summary = training.train_gan(cfg, conditional=conditional,
                                       resume=args.resume, log=_log)
    last = summary["trace"][-1] if summary["trace"] else {}
    _emit({
        "command": name, "seed": cfg.seed, "steps": summary["steps"],
        "wasserstein": last.get("wasserstein"), "gen_loss": last.get("gen_loss"),
        "checkpoint": summary["checkpoint"], "metrics_csv": summary["metrics_csv"],
    })
    return 0


def _cmd_sample(args):
    cfg = _config_from_checkpoint(args.checkpoint, args)
    rows, cols = _grid(args.grid)
    if rows * cols > args.n:
        raise _UsageError(f"grid {rows}x{cols} needs more than --n {args.n} samples")
    gen = _generator_from(args.checkpoint, cfg)
    images, _ = training.generate(cfg, gen, args.n, tag=args.tag)
    _write_run_json(cfg.out_dir, "sample", cfg,
                    {"checkpoint": args.checkpoint, "n": args.n})
    path = evalmetrics.emit_grid(images, os.path.join(cfg.out_dir, "samples"),
                                 rows, cols)
    _emit({"command": "sample", "seed": cfg.seed, "n": args.n, "grid": path})
    return 0


def _cmd_eval_is(args):
    cfg = _config_from_checkpoint(args.checkpoint, args)
    classifier = _classifier_from(args.checkpoint, cfg)
    if args.gen_checkpoint:
        gen = _generator_from(args.gen_checkpoint, cfg)
        images, _ = training.generate(cfg, gen, args.n, tag=args.tag)
        source = args.gen_checkpoint
    else:
        ds = data.load_named_dataset(cfg.dataset, cfg.resolved_data_dir(), "test")
        images = ds.images[: args.n]
        source = cfg.dataset
    probs = evalmetrics.class_probabilities(classifier, images)
    _write_run_json(cfg.out_dir, "eval-is", cfg, {"source": source, "n": len(images)})
    _emit({
        "command": "eval-is", "seed": cfg.seed, "source": source,
        "inception_score": evalmetrics.inception_score(probs),
        "modified_inception_score": evalmetrics.modified_inception_score(probs),
    })
    return 0


def _cmd_eval_fid(args):
    cfg = _config_from_checkpoint(args.checkpoint, args)
    classifier = _classifier_from(args.checkpoint, cfg)
    real = data.load_named_dataset(cfg.dataset, cfg.resolved_data_dir(), "test")
    gen = _generator_from(args.gen_checkpoint, cfg)
    n = min(args.n, len(real))
    if gen.label_dim:
        ids = np.arange(n) % gen.label_dim
        images, _ = training.generate(cfg, gen, n, class_ids=ids, tag=args.tag)
    else:
        images, _ = training.generate(cfg, gen, n, tag=args.tag)
        classifier_probs = evalmetrics.class_probabilities(classifier, images)
        ids = classifier_probs.argmax(axis=1)
    fids = evalmetrics.classwise_fid(classifier, real.images[:n], real.labels[:n],
                                     images, ids)
    _write_run_json(cfg.out_dir, "eval-fid", cfg,
                    {"gen_checkpoint": args.gen_checkpoint, "n": n})
    csv_path = evalmetrics.write_fid_csv(os.path.join(cfg.out_dir, "fid.csv"), fids)
    defined = [v for v in fids.values() if v is not None]
    _emit({
        "command": "eval-fid", "seed": cfg.seed, "fid_csv": csv_path,
        "mean_fid": (sum(defined) / len(defined)) if defined else None,
        "classes_defined": len(defined), "classes_total": len(fids),
    })
    return 0


def _cmd_project(args):
    cfg = _config_from_checkpoint(args.checkpoint, args)
    classifier = _classifier_from(args.checkpoint, cfg)
    real = data.load_named_dataset(cfg.dataset, cfg.resolved_data_dir(), "test")
    n = min(args.n, len(real))
    train_feats = evalmetrics.max_length_features(classifier, real.images[:n])
    sets = {"train": evalmetrics.pca_project(train_feats, train_feats)}
    for name, ckpt in (("generated-caps", args.gen_checkpoint),
                       ("generated-baseline", args.baseline_checkpoint)):
        if not ckpt:
            continue
        gen = _generator_from(ckpt, cfg)
        images, _ = training.generate(cfg, gen, n, tag=args.tag)
        feats = evalmetrics.max_length_features(classifier, images)
        sets[name] = evalmetrics.pca_project(feats, train_feats)
    _write_run_json(cfg.out_dir, "project", cfg, {"sets": sorted(sets)})
    csv_path = evalmetrics.write_projection_csv(
        os.path.join(cfg.out_dir, "projection.csv"), sets)
    _emit({"command": "project", "seed": cfg.seed, "projection_csv": csv_path,
           "sets": sorted(sets), "points_per_set": n})
    return 0


def _cmd_build_rotated(args):
    cfg = load_config(args.config, _overrides(args))
    root = os.path.join(cfg.resolved_data_dir() or cfg.out_dir, "rotated-mnist")
    os.makedirs(root, exist_ok=True)
    written = {}
    for split, (img_name, lab_name) in (
        ("train", ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")),
        ("test", ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")),
    ):
        ds = data.load_named_dataset("mnist", cfg.resolved_data_dir(), split)
        rot = data.build_rotated(ds)
        u8 = np.clip(np.round((rot.images[:, 0] + 1.0) * 127.5), 0, 255).astype(np.uint8)
        data.write_idx(os.path.join(root, img_name), os.path.join(root, lab_name),
                       u8, rot.labels.astype(np.uint8))
        written[split] = len(rot)
    _write_run_json(cfg.out_dir, "build-rotated", cfg, {"written": written})
    _emit({"command": "build-rotated", "seed": cfg.seed, "dir": root,
           "train_images": written["train"], "test_images": written["test"]})
    return 0


def _log(msg):
    print(msg, file=sys.stderr)


def build_parser():
    parser = _Parser(prog="capsgan", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name in ("train-classifier", "train-gan", "train-cgan"):
        sub = _add_config_flags(subs.add_parser(name))
        if name != "train-classifier":
            sub.add_argument("--resume", default=None,
                             help="checkpoint to continue from")

    sample = _add_config_flags(subs.add_parser("sample"))
    sample.add_argument("--checkpoint", required=True)
    sample.add_argument("--n", type=int, default=64)
    sample.add_argument("--grid", default="8x8")
    sample.add_argument("--tag", type=int, default=0)

    for name in ("eval-is", "eval-fid"):
        sub = _add_config_flags(subs.add_parser(name))
        sub.add_argument("--checkpoint", required=True,
                         help="classifier checkpoint (feature extractor)")
        sub.add_argument("--gen-checkpoint", default=None,
                         required=(name == "eval-fid"))
        sub.add_argument("--n", type=int, default=1000)
        sub.add_argument("--tag", type=int, default=0)

    project = _add_config_flags(subs.add_parser("project"))
    project.add_argument("--checkpoint", required=True)
    project.add_argument("--gen-checkpoint", default=None)
    project.add_argument("--baseline-checkpoint", default=None)
    project.add_argument("--n", type=int, default=500)
    project.add_argument("--tag", type=int, default=0)

    _add_config_flags(subs.add_parser("build-rotated"))
    return parser


_COMMANDS = {
    "train-classifier": _cmd_train_classifier,
    "train-gan": lambda a: _cmd_train_gan(a, conditional=False),
    "train-cgan": lambda a: _cmd_train_gan(a, conditional=True),
    "sample": _cmd_sample,
    "eval-is": _cmd_eval_is,
    "eval-fid": _cmd_eval_fid,
    "project": _cmd_project,
    "build-rotated": _cmd_build_rotated,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            return 1
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (training.DivergenceError, NonFiniteError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2
    except Exception as e:  # anything else is a runtime failure, exit 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
