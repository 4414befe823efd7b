"""Command line interface: ``mpcx gen|train|verify|bench|simulate|smooth-demo``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def existing_file(path):
    if not os.path.isfile(path):
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return path


def build_parser() -> argparse.ArgumentParser:
    from .problem import SCENARIOS
    from .predictor.model import ARCHS, HEADS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=existing_file,
                        help="JSON file with option defaults; command-line flags win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mpcx", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mpcx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = sub.choices

    p = sub.add_parser("gen", parents=[common], help="generate a labeled dataset")
    p.add_argument("--scenario", choices=SCENARIOS, default="double-integrator")
    p.add_argument("--count", type=positive_int, default=5000)
    p.add_argument("--out", required=True)
    p.add_argument("--with-times", action="store_true",
                   help="store wall-clock solve times (breaks byte-identical reruns)")

    p = sub.add_parser("train", parents=[common], help="train a predictor")
    p.add_argument("--data", type=existing_file, required=True)
    p.add_argument("--arch", choices=ARCHS, default="transformer")
    p.add_argument("--head", choices=HEADS, default="constraint")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--report", help="training report JSON (default: <out>.report.json)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--epochs", type=positive_int)
    p.add_argument("--batch-size", type=positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--loss", choices=("mse", "bce"))
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("verify", parents=[common], help="offline verification on held-out records")
    p.add_argument("--data", type=existing_file, required=True)
    p.add_argument("--model", type=existing_file)
    p.add_argument("--warm-model", type=existing_file)
    p.add_argument("--mode", choices=("model", "oracle", "all-inactive", "all-active"), default="model")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--outputs", help="JSONL of emitted solutions for re-verification")

    p = sub.add_parser("bench", parents=[common], help="timing study against the full solver")
    p.add_argument("--data", type=existing_file,
                   help="labeled dataset; default generates fresh instances from --seed")
    p.add_argument("--split", choices=("test", "train", "all"), default="test",
                   help="records of --data to time (first --count of the split)")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--scenario", choices=SCENARIOS, default="double-integrator")
    p.add_argument("--model", type=existing_file)
    p.add_argument("--warm-model", type=existing_file)
    p.add_argument("--count", type=positive_int, default=500)
    p.add_argument("--repeats", type=positive_int, default=3)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", default="bench", help="output stem for .json/.csv/.png")
    p.add_argument("--outputs", help="JSONL of emitted solutions for re-verification")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("simulate", parents=[common], help="closed-loop receding-horizon run")
    p.add_argument("--scenario", choices=SCENARIOS, default="double-integrator")
    p.add_argument("--steps", type=positive_int, default=50)
    p.add_argument("--model", type=existing_file)
    p.add_argument("--warm-model", type=existing_file)
    p.add_argument("--out", help="trace JSON path")

    p = sub.add_parser("smooth-demo", parents=[common], help="log-sum-exp bounds on a sampled set")
    p.add_argument("--members", type=positive_int, default=8)
    p.add_argument("--points", type=positive_int, default=5)
    p.add_argument("--beta", type=float, action="append")
    return parser


def apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags win."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        with open(args.config, encoding="utf-8") as fh:
            conf = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    if not isinstance(conf, dict):
        parser.error("config file must hold a JSON object")
    section = conf.get(args.command, {})
    merged = {k: v for k, v in conf.items() if not isinstance(v, dict)}
    merged.update(section)
    merged = {k.replace("-", "_"): v for k, v in merged.items()}
    known = set(vars(args))
    unknown = sorted(set(merged) - known)
    if unknown:
        logging.getLogger("mpcx").warning("ignoring unknown config keys: %s", ", ".join(unknown))
    defaults = {k: v for k, v in merged.items() if k in known and k != "config"}
    parser.subcommands[args.command].set_defaults(**defaults)
    return parser.parse_args(argv)


def _pipeline_cfg(args):
    from .pipeline import PipelineConfig
    return PipelineConfig(tau=getattr(args, "tau", 0.5), verify_tol=getattr(args, "tol", 1e-6))


def _load_models(args):
    from .predictor.model import load_model
    c_model = load_model(args.model) if args.model else None
    w_model = load_model(args.warm_model) if args.warm_model else None
    if c_model is not None and c_model.head != "constraint":
        raise UsageError(f"{args.model} is a {c_model.head} model, expected constraint")
    if w_model is not None and w_model.head != "warmstart":
        raise UsageError(f"{args.warm_model} is a {w_model.head} model, expected warmstart")
    return c_model, w_model


def _dump(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, allow_nan=False)
        fh.write("\n")


# ---------------------------------------------------------------------------


def cmd_gen(args):
    from .oracle import GenerationStats, catalog_digest_for, dataset_header, generate_dataset, write_dataset

    stats = GenerationStats()
    header = dataset_header(args.scenario, args.seed, args.count, catalog_digest_for(args.scenario))
    records = []

    def stream():
        for rec in generate_dataset(args.scenario, args.count, args.seed, stats=stats):
            records.append(rec)
            yield rec

    write_dataset(args.out, header, stream(), include_times=args.with_times)
    summary = stats.summary(records)
    print(json.dumps({"out": args.out, **summary}, indent=2))
    return EXIT_OK


def cmd_train(args):
    from .bench import plot_training
    from .oracle import read_dataset, split_dataset
    from .predictor.model import save_model
    from .predictor.train import TrainConfig, train

    _, records = read_dataset(args.data)
    try:
        train_set, test_set = split_dataset(records, args.train_fraction, args.split_seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "loss")
                 if getattr(args, k) is not None}
    cfg = TrainConfig(seed=args.seed, **overrides)
    model, report = train(train_set, test_set, args.arch, args.head, cfg)
    save_model(model, args.out)
    doc = report.to_dict()
    doc.update(data=args.data, train_records=len(train_set), test_records=len(test_set),
               split_seed=args.split_seed)
    report_path = args.report or os.path.splitext(args.out)[0] + ".report.json"
    _dump(report_path, doc)
    if not args.no_figures:
        plot_training(doc, os.path.splitext(report_path)[0])
    print(json.dumps({"model": args.out, "report": report_path, "elapsed": report.elapsed,
                      "test": report.metrics}, indent=2))
    return EXIT_OK


def _held_out(args):
    from .oracle import read_dataset, split_dataset
    _, records = read_dataset(args.data)
    if args.split == "all":
        return records
    train_set, test_set = split_dataset(records, args.train_fraction, args.split_seed)
    return test_set if args.split == "test" else train_set


def cmd_verify(args):
    from .bench import offline_verify, write_outputs

    c_model, w_model = _load_models(args)
    if args.mode == "model" and c_model is None:
        raise UsageError("--mode model needs --model")
    records = _held_out(args)
    report, entries = offline_verify(records, c_model, w_model, _pipeline_cfg(args), args.mode)
    if args.outputs:
        write_outputs(args.outputs, entries)
        report["outputs"] = args.outputs
    if args.out:
        _dump(args.out, report)
    print(json.dumps(report, indent=2))
    return EXIT_OK if report["all_outputs_verified"] else EXIT_FAILURE


def cmd_bench(args):
    from .bench import MIN_BENCH_COUNT, plot_bench, run_bench, write_outputs, write_report_json, write_rows_csv
    from .oracle import generate_dataset

    if args.count < MIN_BENCH_COUNT:
        raise UsageError(f"--count must be >= {MIN_BENCH_COUNT} for meaningful statistics")
    c_model, w_model = _load_models(args)
    if args.data:
        records = _held_out(args)[:args.count]
        if len(records) < MIN_BENCH_COUNT:
            raise UsageError(f"the {args.split} split of {args.data} holds fewer than "
                             f"{MIN_BENCH_COUNT} records")
    else:
        scenario = c_model.scenario if c_model is not None else args.scenario
        records = list(generate_dataset(scenario, args.count, args.seed))
    report, per_instance, entries = run_bench(records, c_model, w_model, _pipeline_cfg(args),
                                              args.repeats)
    report["seed"] = args.seed
    write_report_json(args.out + ".json", report, per_instance)
    write_rows_csv(args.out + ".csv", report["rows"])
    if args.outputs:
        write_outputs(args.outputs, entries)
    if not args.no_figures:
        plot_bench(report, per_instance, args.out)
    for row in report["rows"]:
        print(f"{row['config_name']:>14}  baseline {row['baseline_avg_time'] * 1e3:8.3f} ms  "
              f"pipeline {row['pipeline_avg_time'] * 1e3:8.3f} ms  alpha {row['alpha']:.3f}  "
              f"speedup {row['speedup']:6.2f}x")
    return EXIT_OK


def cmd_simulate(args):
    from .pipeline import run_receding_horizon
    from .problem import build_mpc_instance

    c_model, w_model = _load_models(args)
    models = {"constraint": c_model, "warmstart": w_model} if c_model is not None else None
    x0 = build_mpc_instance(args.scenario, None, args.seed).x0
    trace = run_receding_horizon(args.scenario, x0, args.steps, models, seed=args.seed)
    doc = {
        "scenario": args.scenario,
        "steps": args.steps,
        "cost": trace.cost,
        "states": [s.tolist() for s in trace.states],
        "inputs": [u.tolist() for u in trace.inputs],
        "fallbacks": sum(r.fell_back for r in trace.results),
    }
    if args.out:
        _dump(args.out, doc)
    print(json.dumps({k: doc[k] for k in ("scenario", "steps", "cost", "fallbacks")}, indent=2))
    return EXIT_OK


def cmd_smooth_demo(args):
    from .smooth import DEFAULT_BETA, disk_constraints, lse_combine, sandwich_check

    rng = np.random.default_rng(args.seed)
    centers = rng.uniform(-1.0, 1.0, size=(args.members, 2))
    radii = rng.uniform(1.0, 2.0, size=args.members)
    points = rng.uniform(-0.5, 0.5, size=(args.points, 2))
    values = disk_constraints(points, centers, radii)
    betas = args.beta or [DEFAULT_BETA / 10, DEFAULT_BETA, DEFAULT_BETA * 10]
    print(f"{'point':>16}  {'beta':>7}  {'max g':>10}  {'lse/beta':>10}  {'upper':>10}  holds")
    for p, v in zip(points, values):
        for beta in betas:
            s = sandwich_check(v, beta)
            inside = lse_combine(v, beta) <= 0.0
            print(f"({p[0]:6.3f},{p[1]:6.3f})  {beta:7.1f}  {s.lower:10.4f}  {s.scaled:10.4f}  "
                  f"{s.upper:10.4f}  {s.holds}{'  combined<=0' if inside else ''}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "verify": cmd_verify, "bench": cmd_bench,
    "simulate": cmd_simulate, "smooth-demo": cmd_smooth_demo,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mpcx {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_FAILURE
    except Exception as exc:  # surfaced as a runtime failure with a diagnostic
        if args.verbose:
            raise
        print(f"mpcx {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
