"""Command-line entry point: fingerprint, plan, train, predict, eval.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 runtime failure.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from . import engine
from .planner import TaskPlan, make_plan
from .volume import (DatasetFingerprint, FormatError, SegmentationMap, Volume, compute_fingerprint, load_manifest,
                     read_volume, write_volume)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class DataError(Exception):
    """Bad or unreadable input: exit code 2."""


def _read_text(path, what):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror or exc}") from None


def _write_text(path, text):
    # write failures are runtime failures, not data errors
    Path(path).write_text(text)


def _read_json(path, what):
    try:
        return json.loads(_read_text(path, what))
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path} is not valid JSON ({exc})") from None


def _read_volume(path, kind, what):
    try:
        v = read_volume(path)
    except OSError as exc:
        raise DataError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    if not isinstance(v, kind):
        raise DataError(f"{what} {path} has the wrong element type for a {kind.__name__}")
    return v


def cmd_fingerprint(args):
    fp = compute_fingerprint(load_manifest(args.dataset))
    _write_text(args.out, json.dumps(fp.to_dict(), indent=2) + "\n")
    sp = fp.median_spacing.as_tuple()
    print(f"{fp.case_count} cases, {fp.class_count} classes, median spacing {sp}, median shape {fp.median_shape}")


def cmd_plan(args):
    doc = _read_json(args.fingerprint, "fingerprint")
    if not isinstance(doc, dict):
        raise DataError(f"fingerprint {args.fingerprint} must be a JSON object")
    plan = make_plan(DatasetFingerprint.from_dict(doc))
    _write_text(args.out, plan.to_json())
    print(f"depths {list(plan.depths)}, train patch {list(plan.train_patch)}, "
          f"receptive field {list(plan.receptive_field)}")


def _emit(record):
    record = dict(record)
    record["time"] = time.time()
    print(json.dumps(record), flush=True)


def cmd_train(args):
    manifest = load_manifest(args.dataset)
    plan = TaskPlan.from_json(_read_text(args.plan, "plan"))
    cfg = engine.TrainConfig(iterations=args.iters, batch_size=args.batch, seed=args.seed)
    _emit({"event": "config", "iterations": cfg.iterations, "batch_size": cfg.batch_size, "seed": cfg.seed,
           "augmentation": cfg.augmentation.to_dict()})
    ck = engine.train(manifest, plan, cfg, log=_emit)
    engine.save_checkpoint(ck, args.out)
    _emit({"event": "done", "step": ck.step, "checkpoint": str(args.out)})


def cmd_predict(args):
    try:
        ck = engine.load_checkpoint(args.model)
    except OSError as exc:
        raise DataError(f"cannot read model {args.model}: {exc.strerror or exc}") from None
    volume = _read_volume(args.input, Volume, "input volume")
    seg = engine.predict(ck, volume)
    write_volume(seg, args.output)
    print(f"wrote {args.output} dims {list(seg.dims)}")


def cmd_eval(args):
    pred = _read_volume(args.pred, SegmentationMap, "prediction")
    ref = _read_volume(args.ref, SegmentationMap, "reference")
    if pred.dims != ref.dims:
        raise DataError(f"prediction dims {pred.dims} differ from reference dims {ref.dims}")
    scores = engine.evaluate(pred, ref)
    print(json.dumps({str(k): v for k, v in scores.items()}))


def _positive(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or action.default is argparse.SUPPRESS or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser():
    fmt = _HelpFormatter
    parser = _Parser(prog="autoseg3d", description="Self-configuring 3D segmentation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fingerprint", help="compute the dataset fingerprint", formatter_class=fmt)
    p.add_argument("--dataset", required=True, metavar="DIR", help="directory holding manifest.json")
    p.add_argument("--out", required=True, metavar="PATH", help="fingerprint JSON to write")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("plan", help="derive the task plan from a fingerprint", formatter_class=fmt)
    p.add_argument("--fingerprint", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="plan JSON to write")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="train a network and write a checkpoint", formatter_class=fmt)
    p.add_argument("--dataset", required=True, metavar="DIR")
    p.add_argument("--plan", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH", help="checkpoint to write")
    p.add_argument("--iters", type=_positive, default=30000, metavar="N", help="training iterations")
    p.add_argument("--batch", type=_positive, default=4, metavar="B", help="patches per step")
    p.add_argument("--seed", type=int, default=0, metavar="S", help="run seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one volume", formatter_class=fmt)
    p.add_argument("--model", required=True, metavar="PATH", help="checkpoint")
    p.add_argument("--input", required=True, metavar="PATH", help="input SVF volume")
    p.add_argument("--output", required=True, metavar="PATH", help="SVF label map to write")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-class Dice of a prediction", formatter_class=fmt)
    p.add_argument("--pred", required=True, metavar="PATH")
    p.add_argument("--ref", required=True, metavar="PATH")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    try:
        args.func(args)
    except (DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (engine.TrainingError, OSError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # invariant violations in user-supplied documents (e.g. class_count 1)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
