"""Command-line entry point.

Exit codes: 0 ok, 2 usage or config error, 3 I/O error, 4 numerical abort,
5 compatibility error (vocabulary mismatch, corrupt or foreign checkpoint).
"""

import argparse
import json
import logging
import sys

from . import experiment as xp
from .errors import CompatibilityError, NumericalAbort, STSError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5


def _config(args):
    return xp.load_config(args.config, args.set or [])


def cmd_simulate(args):
    cfg = _config(args)
    path, summary = xp.simulate(cfg, args.out, args.seed, args.n)
    print(f"manifest: {path}")
    print(f"{'partition':<12}{'examples':>10}{'overlap':>10}")
    for name, s in summary.items():
        ratio = s["mean_overlap_ratio"]
        shown = "n/a" if ratio is None else f"{ratio:.3f}"
        print(f"{name:<12}{s['n_examples']:>10}{shown:>10}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    try:
        model, log_records, ckpt = xp.run_training(cfg, args.steps, args.resume, args.out)
    except NumericalAbort as exc:
        print(f"numerical abort at step {exc.details.get('step')}; diagnostics: {exc.details.get('dump_path')}", file=sys.stderr)
        raise
    print(f"checkpoint: {ckpt}")
    if log_records:
        last = log_records[-1]
        print(f"steps: {last['step'] + 1}  first loss: {log_records[0]['loss']:.4f}  last loss: {last['loss']:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    frame_ms = args.frame_ms
    max_symbols = args.max_symbols_per_frame
    split = None if args.split == "all" else args.split
    report, paths = xp.run_evaluation(
        args.dataset,
        args.report,
        checkpoint=args.checkpoint,
        hypotheses=args.hypotheses,
        oracle=args.oracle,
        split=split,
        partitions=args.partitions,
        frame_ms=frame_ms,
        max_symbols_per_frame=max_symbols,
    )
    print(paths["table"].read_text(), end="")
    print(f"report: {paths['json']}")
    return EXIT_OK


def cmd_analyze_latency(args):
    payload, paths = xp.analyze_latency(args.hypotheses, args.references, args.out, args.frame_ms, args.extended)
    print(paths["table"].read_text(), end="")
    print(f"samples: {paths['samples']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.gamma=0.01")

    p = sub.add_parser("simulate", help="generate the evaluation dataset")
    with_config(p)
    p.add_argument("--out", help="dataset directory (default: <output_dir>/data)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="examples per partition")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train on the simulator stream")
    with_config(p)
    p.add_argument("--steps", type=int, help="updates to run in this call")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", help="run directory (default: output_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="decode and score a dataset")
    p.add_argument("--dataset", required=True, help="manifest.json")
    p.add_argument("--report", required=True, help="output directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--hypotheses", help="existing hypothesis JSONL")
    src.add_argument("--oracle", action="store_true", help="score targets as hypotheses")
    p.add_argument("--split", default="test", choices=["dev", "test", "all"])
    p.add_argument("--partitions", nargs="+")
    p.add_argument("--frame-ms", type=float, default=30.0)
    p.add_argument("--max-symbols-per-frame", type=int, default=3)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-latency", help="EP/LS/SP/FS emission latency tables")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True, help="manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--frame-ms", type=float, default=30.0)
    p.add_argument("--extended", action="store_true", help="also report p60, p70 and p80")
    p.set_defaults(func=cmd_analyze_latency)
    return parser


def _report(exc) -> None:
    detail = exc.to_dict() if isinstance(exc, STSError) else {"message": str(exc)}
    print("error: " + json.dumps(detail, sort_keys=True, default=str), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CompatibilityError as exc:
        _report(exc)
        return EXIT_COMPAT
    except NumericalAbort as exc:
        _report(exc)
        return EXIT_NUMERIC
    except (STSError, json.JSONDecodeError, KeyError) as exc:
        _report(exc)
        return EXIT_USAGE
    except OSError as exc:
        _report(exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
