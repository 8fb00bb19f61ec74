"""Command-line entry point: ``cvgg {gen-data,train,eval,gradcheck,compare}``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DataFormatError, generate_phase_dataset, load_checkpoint, load_split
from .gradcheck import format_table, run_suite
from .layers import Activation, PoolVariant
from .models import amplitude_only_mode, build_model, spec_from_name
from .train import AXES, DivergenceError, TrainConfig, compare_variants, evaluate, ranking_csv, train

log = logging.getLogger("cvggnet")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4

POOLS = [v.value for v in PoolVariant]
ACTIVATIONS = [a.value for a in Activation]


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=["cvgg", "cvnet5"], default="cvnet5")
    p.add_argument("--width-mult", default="1", help="channel width multiplier, e.g. 0.25 or 1/16")
    p.add_argument("--pool", choices=POOLS, default=PoolVariant.AREA.value)
    p.add_argument("--activation", choices=ACTIVATIONS, default=Activation.CRELU.value)
    p.add_argument("--input-size", type=_positive_int, default=32)
    p.add_argument("--data-dir")
    p.add_argument("--epochs", type=_positive_int, default=100)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvgg", description="Complex-valued CNNs for complex SAR slices.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic phase dataset")
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--amp-discriminable", action="store_true")
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")

    p = sub.add_parser("train", help="train a model and write metrics plus a checkpoint")
    _model_flags(p)
    p.add_argument("--amplitude-only", action="store_true", help="phase-blind ablation twin")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir")
    p.add_argument("--split", default="test")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer op")
    p.add_argument("--scope", choices=["layers", "model", "all"], default="all")
    p.add_argument("--precision-check", action="store_true", help="also report the 32-bit loss gap")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("compare", help="rank variants along one axis")
    p.add_argument("--axis", choices=sorted(AXES))
    p.add_argument("--repeats", type=_positive_int, default=1)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", help="also write the ranking CSV here")
    _model_flags(p)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="plain-text key=value file; flags override it")
        sp.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def read_config(path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, text in values.items():
        action = actions[key]
        try:
            if isinstance(action, argparse._StoreTrueAction):
                value = _bool(text)
            else:
                value = action.type(text) if action.type else text
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"config key {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)


# Checked after the config file is merged, so either source may supply them.
REQUIRED = {
    "gen-data": ("out_dir",),
    "train": ("data_dir", "out"),
    "eval": ("checkpoint", "data_dir"),
    "gradcheck": (),
    "compare": ("axis", "data_dir"),
}


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sub, read_config(args.config))
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{args.command}: missing required {flags}")
    return args


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("log_level", "config")}


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    if args.per_class < 2:
        raise UsageError(f"--per-class must be >= 2, got {args.per_class}")
    ds = generate_phase_dataset(args.out_dir, args.classes, args.per_class, args.size,
                                args.amp_discriminable, args.noise_sigma, args.seed)
    n_train, n_test = len(ds.train.records), len(ds.test.records)
    print(f"wrote {n_train + n_test} slices ({n_train} train, {n_test} test, {args.classes} classes) "
          f"to {ds.out_dir}")
    return EXIT_OK


def _spec(args, num_classes):
    return spec_from_name(args.model, num_classes=num_classes, activation=args.activation,
                          pool_variant=args.pool, width_multiplier=args.width_mult,
                          input_size=args.input_size)


def _config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, learning_rate=args.lr, epochs=args.epochs, seed=args.seed)


def cmd_train(args) -> int:
    train_set = load_split(args.data_dir, "train", args.input_size)
    test_set = load_split(args.data_dir, "test", args.input_size)
    model = build_model(_spec(args, train_set.num_classes), seed=args.seed)
    if args.amplitude_only:
        model = amplitude_only_mode(model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(_resolved(args), sort_keys=True, indent=1) + "\n",
                                     encoding="utf-8")
    metrics = open(out / "metrics.jsonl", "w", encoding="utf-8")

    def on_epoch(record):
        metrics.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
        metrics.flush()

    with metrics:
        history, _ = train(model, train_set, test_set, _config(args), out / "model.ckpt", on_epoch)
    final = history[-1]
    with open(out / "summary.csv", "w", encoding="utf-8") as fh:
        fh.write("model,width_mult,pool,activation,amplitude_only,epochs,final_train_loss,final_test_accuracy\n")
        fh.write(f"{args.model},{args.width_mult},{args.pool},{args.activation},{args.amplitude_only},"
                 f"{len(history)},{final.train_loss:.6f},{final.test_accuracy:.6f}\n")
    print(f"final test accuracy: {final.test_accuracy:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_split(args.data_dir, args.split, model.spec.input_size)
    if ds.num_classes != model.spec.num_classes:
        raise UsageError(f"dataset has {ds.num_classes} classes, checkpoint expects {model.spec.num_classes}")
    result = evaluate(model, ds)
    print(f"accuracy: {result.accuracy:.6f}")
    names = ds.class_names
    print("per-class accuracy: " + ", ".join(f"{n}={a:.6f}" for n, a in zip(names, result.per_class_accuracy)))
    sys.stdout.write(result.confusion_csv(names))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope, args.precision_check, args.seed)
    sys.stdout.write(format_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.op}: {r.worst}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_compare(args) -> int:
    train_set = load_split(args.data_dir, "train", args.input_size)
    test_set = load_split(args.data_dir, "test", args.input_size)
    results = compare_variants(_spec(args, train_set.num_classes), args.axis, train_set, test_set,
                               _config(args), repeats=args.repeats, workers=args.workers)
    csv = ranking_csv(results)
    sys.stdout.write(csv)
    if args.out:
        Path(args.out).write_text(csv, encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"cvgg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cvgg: error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:  # argparse: --help exits 0, bad flags exit 2
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("resolved config: %s", json.dumps(_resolved(args), sort_keys=True))
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError) as exc:
        print(f"cvgg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataFormatError) as exc:
        print(f"cvgg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as exc:
        print(f"cvgg: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
