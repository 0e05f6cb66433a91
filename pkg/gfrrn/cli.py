"""
Command-line entry point.

    gfrrn synth --sources photos/ --out data/ --count 8 --size 64
    gfrrn labels --in data/0000 --sigma 2 --out labels/
    gfrrn train --config configs/tiny.yaml --data-root data/ --mode mona --steps 200 --out-dir runs/
    gfrrn eval --data-root data/ --checkpoint runs/checkpoint_last.npz --out-dir report/
    gfrrn analyze-filters --size 128 --out-dir filters/
    gfrrn inspect-weights --checkpoint runs/checkpoint_last.npz --image photo.png --out-dir weights/

Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime failure.
"""
import argparse
import dataclasses
import json
import sys
from pathlib import Path

from loguru import logger

from gfrrn.adapters import TuningMode
from gfrrn.evaluation import IDENTITY, analyze_filters, evaluate_dataset, inspect_weights, plot_filter_surfaces
from gfrrn.labels import (LabelMode, PairRecord, SynthesisConfig, load_dataset, make_labels,
                          synthesize_dataset, write_label_cache)
from gfrrn.training import RunConfig, fit
from gfrrn.utils import ConfigurationError, InvalidArgumentError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def cmd_synth(args):
    synthesize_dataset(args.sources, args.out, args.count, size=args.size, seed=args.seed, config=SynthesisConfig())
    return EXIT_OK


def cmd_labels(args):
    pair_dir = Path(args.input)
    I, T = PairRecord(pair_dir.name, pair_dir / "I.png", pair_dir / "T.png").load()
    labels = make_labels(I, T, mode=args.mode, sigma=args.sigma)
    for path in write_label_cache(args.out, labels):
        print(path)
    return EXIT_OK


def cmd_train(args):
    run = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    if args.mode:
        run = run.with_mode(args.mode)
    if args.vgg_weights:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, vgg_weights=args.vgg_weights))
    if args.steps:
        run = dataclasses.replace(run, train=dataclasses.replace(run.train, max_steps=args.steps))
    result = fit(load_dataset(args.data_root), run, out_dir=args.out_dir, resume=args.resume)
    if not result.trajectory.empty:
        print(f"final total loss {result.trajectory['total'].iloc[-1]:.6f} after {len(result.trajectory)} steps")
    return EXIT_OK


def cmd_eval(args):
    expected = RunConfig.from_yaml(args.config).model.hash() if args.config else None
    report = evaluate_dataset(load_dataset(args.data_root), args.checkpoint, args.out_dir, expected_hash=expected)
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def cmd_analyze_filters(args):
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = analyze_filters(size=args.size)
    table.to_csv(out_dir / "filters.csv", index=False)
    plot_filter_surfaces(out_dir, size=args.size)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_inspect_weights(args):
    print(json.dumps(inspect_weights(args.checkpoint, args.image, args.out_dir), indent=2))
    return EXIT_OK


def build_parser():
    parser = ArgumentParser(prog="gfrrn", description="Reflection removal with unified labels and G-AFLB.")
    sub = parser.add_subparsers(dest="command", parser_class=ArgumentParser)

    p = sub.add_parser("synth", help="build a synthetic pair dataset from a folder of photos")
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("labels", help="write T, R_low and N labels for one pair directory")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--mode", choices=[m.value for m in LabelMode], default=LabelMode.UNIFIED.value)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_labels)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--data-root", required=True)
    p.add_argument("--mode", choices=[m.value for m in TuningMode], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--resume", default=None)
    p.add_argument("--vgg-weights", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint (or the identity restorer) on a dataset")
    p.add_argument("--data-root", required=True)
    p.add_argument("--checkpoint", default=IDENTITY)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze-filters", help="ringing table and surface plots for both mask kinds")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out-dir", default="filters")
    p.set_defaults(func=cmd_analyze_filters)

    p = sub.add_parser("inspect-weights", help="window importance heat-maps of one image under a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", default="weights")
    p.set_defaults(func=cmd_inspect_weights)
    return parser


def cli_dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as e:  # --help
        return e.code or EXIT_OK
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (InvalidArgumentError, ConfigurationError) as e:
        logger.error(f"While running {args.command} GFRRN had the following error: {e}")
        return EXIT_INVALID
    except Exception as e:
        logger.exception(f"While running {args.command} GFRRN had the following error: {e}")
        return EXIT_RUNTIME


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
