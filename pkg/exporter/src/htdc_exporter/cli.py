"""Command line entry point: htdc-export.

Exit codes: 0 success, 1 bad flags or job parameters, 2 model or I/O
failures.
"""

from __future__ import annotations

import argparse
import sys

from .errors import DataError, ModelError, UsageError
from .export import run_export
from .job import ExportJob, V0Spec, parse_policy, resolve_template

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="htdc-export",
        description="Record per-step full/V0/X0 branch logits from a "
        "vision-language model as a replayable trace file.",
    )
    parser.add_argument("--model", required=True, help="checkpoint path or identifier")
    parser.add_argument("--image", required=True, help="input image path")
    parser.add_argument("--query", required=True, help="question about the image")
    parser.add_argument(
        "--candidates", required=True,
        help="comma-separated candidate answer token ids, e.g. 4,5",
    )
    parser.add_argument(
        "--layers", required=True,
        help="comma-separated 1-based decoder layers to record, e.g. 2,3,4,5",
    )
    parser.add_argument("--out", required=True, help="trace file to write")
    parser.add_argument(
        "--policy", default="full",
        help="stored-token policy: 'full' or 'topn:<N>' (default: full)",
    )
    parser.add_argument(
        "--v0-sigma", type=float, default=0.8,
        help="noise scale for the visual-nullification branch (default: 0.8)",
    )
    parser.add_argument(
        "--v0-kind", default="embedding_noise",
        choices=("embedding_noise", "image_noise"),
        help="where V0 noise enters: projected embeddings (default) or pixels",
    )
    parser.add_argument(
        "--x0-template", default="yes_no",
        help="registry name or literal text replacing the query on the "
        "semantic-nullification branch (default: yes_no)",
    )
    parser.add_argument("--steps", type=int, default=8, help="maximum steps to record")
    parser.add_argument("--seed", type=int, default=0, help="seed for the V0 noise draw")
    parser.add_argument(
        "--sidecar", action="store_true",
        help="also write <out>.ref.json with export-time reference scores",
    )
    parser.add_argument(
        "--full-only", action="store_true",
        help="record only the full branch (probe branches are not forwarded)",
    )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        job = ExportJob(
            model_id=args.model,
            image_path=args.image,
            query=args.query,
            candidate_token_ids=tuple(_int_list(args.candidates)),
            layers=tuple(_int_list(args.layers)),
            out_path=args.out,
            max_steps=args.steps,
            stored=parse_policy(args.policy),
            v0=V0Spec(kind=args.v0_kind, sigma=args.v0_sigma),
            x0_template=resolve_template(args.x0_template),
            seed=args.seed,
            sidecar=args.sidecar,
            full_only=args.full_only,
        )
        result = run_export(job)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, DataError) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(
        f"wrote {result.steps_recorded} steps to {result.trace_path} "
        f"(stop: {result.stop_reason})"
    )
    if result.sidecar_path:
        print(f"wrote sidecar {result.sidecar_path}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
