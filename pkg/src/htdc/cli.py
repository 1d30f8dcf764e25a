"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(dataset, scenario, trace), 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import generator, harness, replay
from .config import HarnessConfig, default_config
from .errors import ConfigurationError, DataError, InvariantViolation
from .trace_format import validate_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="htdc", description="Hesitation-gated contrastive decoding harness")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="decode a dataset and write a report")
    run.add_argument("--config", help="config JSON (defaults apply when omitted)")
    run.add_argument("--dataset", required=True, help="JSONL dataset path")
    run.add_argument("--backend", help="override: synthetic:<scenario.json> or trace:<path>")
    run.add_argument("--out", help="directory for report.json / report.md / per_instance.csv")
    run.add_argument("--seed", type=int, help="override the config's run seed")

    sweep = sub.add_parser("sweep", help="one run per value of a single axis")
    sweep.add_argument("--config", help="config JSON (defaults apply when omitted)")
    sweep.add_argument("--dataset", required=True)
    sweep.add_argument("--backend")
    sweep.add_argument("--out")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--axis", required=True, choices=harness.SWEEP_AXES)
    sweep.add_argument("--values", required=True, help="comma-separated axis values")

    gen = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    gen.add_argument("--recipe", required=True, help="recipe JSON path")
    gen.add_argument("--out", required=True, help="output dataset path (JSONL)")
    gen.add_argument("--seed", type=int, help="override the recipe's seed")

    val = sub.add_parser("validate-trace", help="check a trace file against the wire format")
    val.add_argument("trace", help="trace file path")

    dflt = sub.add_parser("default-config", help="print or write the default config")
    dflt.add_argument("--out", help="write to this path instead of stdout")

    rep = sub.add_parser("replay", help="replay a trace against its reference sidecar")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--sidecar", help="defaults to <trace>.ref.json")
    rep.add_argument("--verify", action="store_true", help="fail unless within tolerance")
    rep.add_argument("--tolerance", type=float, default=1e-5)
    return parser


def _load_config(path: str | None, seed: int | None) -> HarnessConfig:
    config = default_config() if path is None else HarnessConfig.from_json_file(path)
    if seed is not None:
        from dataclasses import replace

        config = replace(config, run=replace(config.run, seed=seed))
    return config


def _parse_values(axis: str, raw: str) -> list:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigurationError("sweep --values is empty")
    if axis == "gate_mode_static_vs_dynamic":
        return parts
    if axis == "layer_depth_k":
        return [int(p) for p in parts]
    return [float(p) for p in parts]


def _cmd_run(args) -> int:
    config = _load_config(args.config, args.seed)
    report = harness.run_evaluation(config, args.dataset, args.backend, args.out)
    print(
        f"instances={report.n_instances} errors={report.n_errors} "
        f"accuracy={report.accuracy:.4f} f1={report.f1:.4f} "
        f"trigger_rate={report.trigger_rate:.4f} n_fwd={report.n_fwd:.4f} "
        f"flip_rate={report.flip_rate:.4f}"
    )
    print(f"fingerprint={report.fingerprint}")
    return EXIT_DATA if report.n_errors else EXIT_OK


def _cmd_sweep(args) -> int:
    config = _load_config(args.config, args.seed)
    values = _parse_values(args.axis, args.values)
    points = harness.run_sweep(config, args.dataset, args.axis, values, args.backend, args.out)
    for value, rep in points:
        print(
            f"{args.axis}={value}: accuracy={rep.accuracy:.4f} "
            f"trigger_rate={rep.trigger_rate:.4f} n_fwd={rep.n_fwd:.4f}"
        )
    if any(rep.n_errors for _, rep in points):
        return EXIT_DATA
    return EXIT_OK


def _cmd_gen(args) -> int:
    recipe = generator.Recipe.from_json_file(args.recipe)
    count = generator.generate(recipe, args.out, seed=args.seed)
    print(f"wrote {count} instances to {args.out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    report = validate_trace(args.trace)
    print(report.summary())
    return EXIT_OK if report.valid else EXIT_DATA


def _cmd_default_config(args) -> int:
    text = default_config().to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_replay(args) -> int:
    sidecar = args.sidecar if args.sidecar else f"{args.trace}.ref.json"
    outcome = replay.replay_trace(args.trace, sidecar)
    print(
        f"steps={outcome.steps} branches_checked={outcome.branches_checked} "
        f"max_abs_deviation={outcome.max_abs_deviation:.3e} "
        f"winner_mismatches={outcome.winner_mismatches}"
    )
    if args.verify and not outcome.within(args.tolerance):
        print(f"verification FAILED (tolerance {args.tolerance:g})", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": _cmd_sweep,
        "gen-synthetic": _cmd_gen,
        "validate-trace": _cmd_validate,
        "default-config": _cmd_default_config,
        "replay": _cmd_replay,
    }
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
