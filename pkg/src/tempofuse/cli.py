"""Command-line entry point: ``tempofuse {generate,train,eval,infer}``.

Settings resolve as command-line flag, then ``--config`` file value, then the
built-in default. The seed additionally falls back to ``$TEMPOFUSE_SEED``
before the built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import dataset as ds
from .boxgen import DEFAULT_MIN_AREA
from .fusion import fuse_corpus, fuse_sequence
from .metrics import MetricsError
from .network import PRESETS, NetworkConfig, build_model, preset
from .pipeline import evaluate, infer_samples
from .training import (CheckpointError, TrainConfig, TrainingDiverged, latest_checkpoint,
                       load_checkpoint, set_deterministic, train)

log = logging.getLogger("tempofuse")

SEED_ENV = "TEMPOFUSE_SEED"

DEFAULTS = {
    "sequences": 4,
    "frames": 9,
    "size": 64,
    "classes": 5,
    "preset": "tiny",
    "network": None,
    "epochs": 1,
    "batch_size": 4,
    "lr": 0.0005,
    "momentum": 0.9,
    "checkpoint_every": 1,
    "train_fraction": 0.7,
    "split": "eval",
    "iou_threshold": 0.5,
    "min_area": DEFAULT_MIN_AREA,
    "deterministic": False,
}

TYPES = {
    "sequences": int, "frames": int, "size": int, "classes": int, "epochs": int,
    "batch_size": int, "checkpoint_every": int, "min_area": int, "seed": int,
    "lr": float, "momentum": float, "train_fraction": float, "iou_threshold": float,
}


class CLIError(Exception):
    pass


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Dashes in keys map to underscores."""
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key in TYPES:
            value = TYPES[key](value)
        elif key == "deterministic":
            value = value.lower() in ("1", "true", "yes", "on")
        out[key] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    settings = {}
    for key, value in vars(args).items():
        if key in ("func", "config"):
            continue
        if value is None or value is False:
            value = file_values.get(key, value)
        if value is None:
            value = DEFAULTS.get(key)
        settings[key] = value
    if settings.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        settings["seed"] = int(env) if env not in (None, "") else 0
    return settings


def _require_dir(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"missing required option: {what}")
    p = Path(path)
    if not p.is_dir():
        raise CLIError(f"{what} directory does not exist: {p}")
    return p


def _require(settings: dict, key: str):
    if settings.get(key) is None:
        raise CLIError(f"missing required option --{key.replace('_', '-')}")
    return settings[key]


def _network_config(settings: dict, num_classes: int) -> NetworkConfig:
    if settings.get("network"):
        path = Path(settings["network"])
        if not path.is_file():
            raise CLIError(f"network config file not found: {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        d["num_classes"] = num_classes
        return NetworkConfig.from_dict(d)
    return preset(settings["preset"], num_classes=num_classes, seed=settings["seed"])


def _checkpoint_path(path) -> Path:
    p = Path(_require({"checkpoint": path}, "checkpoint"))
    return latest_checkpoint(p) if p.is_dir() else p


# -- commands ----------------------------------------------------------------

def cmd_generate(s: dict) -> int:
    out = Path(_require(s, "out"))
    sequences = ds.generate_synthetic(s["sequences"], s["frames"], (s["size"], s["size"]),
                                      s["classes"], s["seed"])
    ds.save_corpus(sequences, out)
    print(f"wrote {len(sequences)} sequences x {s['frames']} frames to {out}")
    return 0


def cmd_train(s: dict) -> int:
    data = _require_dir(s.get("data"), "--data")
    out = Path(_require(s, "out"))
    sequences = ds.load_corpus(data)
    class_names = list(sequences[0].class_names)
    split = ds.split_corpus(sequences, s["train_fraction"], s["seed"])
    samples = fuse_corpus(split.train)
    net_cfg = _network_config(s, len(class_names))
    cfg = TrainConfig(batch_size=s["batch_size"], learning_rate=s["lr"], momentum=s["momentum"],
                      epochs=s["epochs"], seed=s["seed"], checkpoint_every=s["checkpoint_every"])
    print(f"lr={cfg.learning_rate} momentum={cfg.momentum} batch_size={cfg.batch_size} "
          f"epochs={cfg.epochs} seed={cfg.seed} deterministic={bool(s['deterministic'])}")
    print(f"train sequences: {[q.id for q in split.train]} ({len(samples)} fused samples); "
          f"eval sequences: {[q.id for q in split.eval]}")
    model = build_model(net_cfg)
    extra = {"class_names": class_names, "seed": s["seed"],
             "train_fraction": s["train_fraction"]}
    state = train(model, samples, cfg, checkpoint_dir=out, log_path=out / "train_log.csv",
                  extra=extra)
    print(f"finished epoch {state.epoch}, step {state.step}, mean loss {state.running_loss:.6f}")
    print(f"checkpoint: {state.last_checkpoint}")
    return 0


def cmd_eval(s: dict) -> int:
    data = _require_dir(s.get("data"), "--data")
    out = Path(_require(s, "out"))
    model, _, extra = load_checkpoint(_checkpoint_path(s.get("checkpoint")))
    sequences = ds.load_corpus(data)
    class_names = list(sequences[0].class_names)
    if class_names != list(extra.get("class_names", class_names)):
        raise CLIError(f"corpus classes {class_names} do not match checkpoint classes "
                       f"{extra['class_names']}")
    if len(class_names) != model.config.num_classes:
        raise CLIError(f"corpus has {len(class_names)} classes, checkpoint network "
                       f"expects {model.config.num_classes}")
    if s["split"] == "all":
        chosen = sequences
    else:
        split = ds.split_corpus(sequences, extra.get("train_fraction", s["train_fraction"]),
                                extra.get("seed", s["seed"]))
        chosen = split.train if s["split"] == "train" else split.eval
    report = evaluate(model, fuse_corpus(chosen), class_names,
                      s["iou_threshold"], s["min_area"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return 0


def cmd_infer(s: dict) -> int:
    seq_dir = _require_dir(s.get("input"), "--input")
    out = Path(_require(s, "out"))
    model, _, extra = load_checkpoint(_checkpoint_path(s.get("checkpoint")))
    class_names = extra.get("class_names") or (
        ["background"] + [f"class{c}" for c in range(1, model.config.num_classes)])
    sequence = ds.load_sequence_dir(seq_dir, class_names, require_masks=False)
    samples = fuse_sequence(sequence)
    overlays = infer_samples(model, samples, class_names, out,
                             with_truth=ds.has_masks(seq_dir), min_area=s["min_area"])
    print(f"wrote {len(overlays)} overlays to {out}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tempofuse",
        description="Segment threats in fused X-ray scan triples and extract their boxes.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--seed", type=int, help=f"random seed (fallback: ${SEED_ENV})")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded, deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", help="corpus root to create")
    p.add_argument("--sequences", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int, help="square frame size in pixels")
    p.add_argument("--classes", type=int, help="class count including background")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train on the train split of a corpus")
    p.add_argument("--data", help="corpus root")
    p.add_argument("--out", help="run directory for checkpoints and the training log")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--network", help="JSON network config file (overrides --preset)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--train-fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a corpus split")
    p.add_argument("--checkpoint", help="checkpoint file or run directory (latest is used)")
    p.add_argument("--data", help="corpus root")
    p.add_argument("--out", help="directory for report.json and report.txt")
    p.add_argument("--split", choices=["eval", "train", "all"])
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--iou-threshold", type=float)
    p.add_argument("--min-area", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="masks, boxes and overlays for one sequence")
    p.add_argument("--checkpoint", help="checkpoint file or run directory (latest is used)")
    p.add_argument("--input", help="sequence directory of numbered PNG scans")
    p.add_argument("--out", help="output directory")
    p.add_argument("--min-area", type=int)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = resolve(args)
        logging.basicConfig(level=logging.INFO if settings.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if settings["deterministic"]:
            set_deterministic(True)
        return args.func(settings)
    except (CLIError, ds.CorpusError, CheckpointError, MetricsError, TrainingDiverged,
            ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
