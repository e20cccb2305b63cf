"""Command-line entry point: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error.
Run settings come from built-in defaults, then an optional JSON config
file (``--config``), then explicit flags, later sources winning.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import (DataError, SynthKnobs, default_output_dir, load_split, read_manifest,
                   read_rgb, synth_dataset, write_mask)
from .metrics import evaluate
from .model import ModelConfig, predict_change_map
from .ops import SpecError
from .tensor import ShapeError, Tensor
from .training import TrainConfig, TrainingError, train

logger = logging.getLogger("hpcfnet")

MODEL_KEYS = ("width_scale", "dilations", "leaky_slope", "use_rsa", "use_mpfl", "arch", "dtype")
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
PATH_KEYS = ("data", "out")


class UsageError(Exception):
    """Bad flags, config keys or inputs; maps to exit code 2."""


def default_run_config() -> dict:
    model = ModelConfig()
    cfg = {k: getattr(model, k) for k in MODEL_KEYS}
    cfg.update(dataclasses.asdict(TrainConfig()))
    cfg.update(data=None, out=None)
    return cfg


def load_run_config(path, overrides: dict) -> dict:
    """Defaults <- JSON file <- non-None overrides. Unknown file keys are rejected."""
    cfg = default_run_config()
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
        cfg.update(loaded)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0 or h % 16 or w % 16:
        raise UsageError(f"--size {text}: height and width must be positive multiples of 16")
    return h, w


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _manifest(path):
    path = Path(_require(path, "--data"))
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.is_file():
        raise UsageError(f"--data: no manifest at {path}")
    return read_manifest(path)


def cmd_synth(args) -> int:
    size = parse_size(args.size)
    out = Path(args.out) if args.out else default_output_dir() / "synth"
    knobs = SynthKnobs(val_fraction=args.val_fraction)
    manifest = synth_dataset(out, seed=args.seed, count=args.count, size=size, knobs=knobs)
    print(f"wrote {len(manifest)} pairs and manifest to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = {k: getattr(args, k, None) for k in MODEL_KEYS + TRAIN_KEYS + PATH_KEYS}
    cfg = load_run_config(args.config, overrides)
    manifest = _manifest(cfg["data"])
    train_recs = manifest.split("train")
    if not train_recs:
        raise UsageError(f"--data {cfg['data']}: training split is empty")
    pairs = load_split(manifest, "train")
    val = load_split(manifest, "val")
    size = pairs[0].size
    out = Path(cfg["out"]) if cfg["out"] else default_output_dir() / "train"
    try:
        model_cfg = ModelConfig(input_size=size, seed=cfg["seed"],
                                **{k: cfg[k] for k in MODEL_KEYS})
        train_cfg = TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except (TypeError, ValueError, SpecError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    print("config " + json.dumps({k: cfg[k] for k in TRAIN_KEYS + MODEL_KEYS}, sort_keys=True))
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")

    def echo(rec):
        parts = [f"epoch {rec['epoch']:4d}", f"loss {rec['loss']:.6f}"]
        if "f_score" in rec:
            parts.append(f"{rec['eval_split']} P {rec['precision']:.4f} R {rec['recall']:.4f} "
                         f"F {rec['f_score']:.4f}")
        parts.append(f"{rec['seconds']:.2f}s")
        print("  ".join(parts), flush=True)

    result = train(train_cfg, model_cfg, (pairs, val), out, echo=echo)
    print(f"{result.steps} steps; checkpoints: {', '.join(result.checkpoints)}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    manifest = _manifest(args.data)
    pairs = load_split(manifest, args.split)
    if not pairs:
        raise UsageError(f"split {args.split!r} of {args.data} is empty")
    report = evaluate(model, pairs, batch_size=args.batch_size, beta=args.beta)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(f".{args.split}.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_jsonl(), encoding="utf-8")
    print(report.table())
    print(json.dumps(report.to_records()[-1]))
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    t0 = read_rgb(_require(args.t0, "--t0"))
    t1 = read_rgb(_require(args.t1, "--t1"))
    if t0.shape != t1.shape:
        raise UsageError(f"--t0 is {t0.shape[1]}x{t0.shape[2]} but --t1 is {t1.shape[1]}x{t1.shape[2]}")
    dt = model.config.np_dtype
    pred = predict_change_map(Tensor(t0[None].astype(dt)), Tensor(t1[None].astype(dt)), model)[0]
    out = Path(args.out) if args.out else default_output_dir() / "change_map.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask(out, pred)
    print(f"{int(pred.sum())} of {pred.size} pixels changed; wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    report = run_suite(scale=args.scale, tol=args.tol, op_tol=args.op_tol, seed=args.seed,
                       include_model=not args.ops_only, echo=lambda line: print(line, flush=True))
    print(report.lines()[-1])
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hpcfnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic change-detection dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--size", default="64x64", help="HxW, multiples of 16")
    s.add_argument("--val-fraction", type=float, default=0.0)
    s.add_argument("--out", help="output directory (default: $HPCFNET_OUT/synth)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="JSON run config; flags override it")
    t.add_argument("--data", help="manifest file or dataset directory")
    t.add_argument("--out", help="run directory (default: $HPCFNET_OUT/train)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--target-f1", dest="target_f1", type=float,
                   help="stop once the per-epoch F-score reaches this value")
    t.add_argument("--width-scale", dest="width_scale", type=float)
    t.add_argument("--arch", choices=("hpcfnet", "early_concat"))
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint")
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--batch-size", type=int, default=8)
    e.add_argument("--beta", type=float, default=1.0)
    e.add_argument("--out", help="JSONL report path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write the change map of one image pair")
    r.add_argument("--checkpoint")
    r.add_argument("--t0")
    r.add_argument("--t1")
    r.add_argument("--out", help="PNG path (default: $HPCFNET_OUT/change_map.png)")
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    g.add_argument("--scale", type=float, default=1 / 16)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--op-tol", type=float, default=None,
                   help="tolerance for primitive ops (default: min(tol, 1e-4))")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ops-only", action="store_true", help="skip the end-to-end model check")
    g.set_defaults(func=cmd_gradcheck)
    return p


USAGE_ERRORS = (UsageError, DataError, ShapeError, SpecError, CheckpointError, FileNotFoundError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"hpcfnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"hpcfnet {args.command}: training failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort report for the exit-code contract
        logger.debug("unhandled", exc_info=True)
        print(f"hpcfnet {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
