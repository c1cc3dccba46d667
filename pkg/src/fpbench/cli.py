"""Command-line harness for benchmark runs and trace analysis.

Exit codes: 0 success, 1 usage or config error, 2 a solver diverged or a
trace never reached the requested tolerance, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import detect_crossover, read_trace_csv, run, speedup
from .errors import DivergenceError, InputError, NotReachedError
from .solvers import AndersonConfig

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpbench",
                     description="Anderson vs forward fixed-point benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a benchmark config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--parallel", action="store_true",
                       help="fan repetitions beyond the first (non-timed) "
                            "out across threads")

    p_cross = sub.add_parser("crossover",
                             help="crossover report from two trace CSVs")
    p_cross.add_argument("--forward", required=True)
    p_cross.add_argument("--anderson", required=True)

    p_speed = sub.add_parser("speedup",
                             help="time-to-tol ratio of trace b over trace a")
    p_speed.add_argument("--a", required=True)
    p_speed.add_argument("--b", required=True)
    p_speed.add_argument("--tol", required=True, type=float)

    p_plot = sub.add_parser("plot", help="render trace CSVs to an SVG figure")
    p_plot.add_argument("csvs", nargs="+")
    p_plot.add_argument("--out", required=True)

    p_train = sub.add_parser("train-demo",
                             help="train the blob classifier with one solver")
    p_train.add_argument("--solver", choices=["forward", "anderson"],
                         default="anderson")
    p_train.add_argument("--epochs", type=int, default=200)
    p_train.add_argument("--lr", type=float, default=0.1)
    p_train.add_argument("--seed", type=int, default=1)
    p_train.add_argument("--points", type=int, default=400)
    p_train.add_argument("--out", default=None,
                         help="directory for the report CSV/JSON/SVG")
    return parser


def _cmd_run(args):
    summary, diverged = run(args.config, out_dir=args.out,
                            parallel=args.parallel)
    print(json.dumps({k: v for k, v in summary.items() if k != "config"},
                     indent=2))
    return EXIT_DIVERGED if diverged else EXIT_OK


def _cmd_crossover(args):
    fwd = read_trace_csv(args.forward)
    acc = read_trace_csv(args.anderson)
    print(json.dumps(detect_crossover(fwd, acc).to_dict(), indent=2))
    return EXIT_OK


def _cmd_speedup(args):
    a = read_trace_csv(args.a)
    b = read_trace_csv(args.b)
    print(f"{speedup(a, b, args.tol):.6g}")
    return EXIT_OK


def _cmd_plot(args):
    from .plots import plot_traces
    traces = [read_trace_csv(p) for p in args.csvs]
    crossover = None
    fwd = [t for t in traces if "forward" in t.label]
    acc = [t for t in traces if "anderson" in t.label]
    if fwd and acc:
        crossover = detect_crossover(fwd[0], acc[0])
    plot_traces(traces, args.out, crossover=crossover)
    print(args.out)
    return EXIT_OK


def _cmd_train_demo(args):
    from .plots import plot_train_report
    from .training import generate_blobs, train

    dataset = generate_blobs(args.points, d=8, classes=2, separation=2.0,
                             seed=args.seed)
    # A capped adjoint keeps the per-epoch gradient cost bounded when the
    # loose-tolerance adjoint stalls; both variants get the same cap.
    report = train(dataset, epochs=args.epochs, lr=args.lr,
                   solver=args.solver, cfg=AndersonConfig(), seed=args.seed,
                   groups=1, adjoint_cfg=AndersonConfig(max_iter=50))
    print(json.dumps(report.summary(), indent=2))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.to_csv(out / f"train_{args.solver}.csv")
        report.to_json(out / f"train_{args.solver}.json")
        plot_train_report([report], out / f"train_{args.solver}.svg")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "crossover": _cmd_crossover,
    "speedup": _cmd_speedup,
    "plot": _cmd_plot,
    "train-demo": _cmd_train_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except InputError as exc:
        print(f"fpbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NotReachedError) as exc:
        print(f"fpbench: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"fpbench: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
