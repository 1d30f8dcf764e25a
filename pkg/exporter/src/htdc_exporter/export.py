"""The export loop: greedy decoding with all branches recorded per step.

Each step forwards up to three prompt variants that share the generated
continuation so far. The full branch sees the original (image, query)
pair; V0 sees weakened visual evidence; X0 keeps the image but swaps the
query for a content-free template. The full branch's greedy argmax over
the whole vocabulary picks the next token for every branch, so the
recorded branches stay aligned on an identical generated prefix.

Reference scores for the sidecar are computed here, at export time, from
the same float64 rows handed to the trace writer: per branch, the
log-softmax over the stored token support aggregated per candidate. That
is the quantity a replay recomputes from the stored float32 rows, so the
round trip is expected to agree to well under float32 resolution.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .adapter import VisionLanguageAdapter
from .errors import DataError, UsageError
from .job import V0_IMAGE_NOISE, ExportJob
from .wire import BRANCH_ORDER, WireHeader, write_trace


@dataclass(frozen=True)
class ExportResult:
    trace_path: str
    sidecar_path: str | None
    steps_recorded: int
    generated_token_ids: tuple[int, ...]
    stop_reason: str  # "max_steps" or "eos"


def _top_ids(row: np.ndarray, n: int) -> np.ndarray:
    # Stable ranking: ties resolve toward the lower token id.
    order = np.lexsort((np.arange(row.size), -row))
    return order[: min(n, row.size)]


def _stored_ids(row: np.ndarray, n: int, candidates: tuple[int, ...]) -> np.ndarray:
    union = set(int(t) for t in _top_ids(row, n)) | set(candidates)
    return np.array(sorted(union), dtype=np.int64)


def _candidate_scores(
    row: np.ndarray, stored_ids: np.ndarray | None, candidates: tuple[int, ...]
) -> dict[int, float]:
    """Log-softmax over the stored support, read off at each candidate id."""
    if stored_ids is None:
        support = row
        position = {int(t): int(t) for t in candidates}
    else:
        support = row[stored_ids]
        position = {int(t): int(np.searchsorted(stored_ids, t)) for t in candidates}
    shifted = support - support.max()
    log_norm = np.log(np.exp(shifted).sum())
    return {t: float(shifted[position[t]] - log_norm) for t in candidates}


def run_export(job: ExportJob) -> ExportResult:
    adapter = VisionLanguageAdapter.load(job.model_id)

    if job.layers[-1] > adapter.num_layers:
        raise UsageError(
            f"sampled layers {list(job.layers)} exceed the model's "
            f"{adapter.num_layers} decoder layers"
        )
    bad = [t for t in job.candidate_token_ids if t >= adapter.vocab_size]
    if bad:
        raise UsageError(
            f"candidate token ids {bad} are outside the model's vocabulary "
            f"of {adapter.vocab_size}"
        )

    pixels = adapter.pixel_values(job.image_path)
    noise_gen = torch.Generator().manual_seed(job.seed)
    if job.v0.kind == V0_IMAGE_NOISE:
        noised = pixels + job.v0.sigma * torch.randn(
            pixels.shape, generator=noise_gen, dtype=pixels.dtype
        )
        visual = adapter.visual_embeddings(pixels)
        v0_visual = adapter.visual_embeddings(noised)
    else:
        visual = adapter.visual_embeddings(pixels)
        v0_visual = visual + job.v0.sigma * torch.randn(
            visual.shape, generator=noise_gen, dtype=visual.dtype
        )

    query_ids = adapter.token_ids(job.query)
    template_ids = adapter.token_ids(job.x0_template)
    prompts = {
        "full": adapter.prompt_embeddings(visual, query_ids),
        "v0": adapter.prompt_embeddings(v0_visual, query_ids),
        "x0": adapter.prompt_embeddings(visual, template_ids),
    }
    branches = ("full",) if job.full_only else BRANCH_ORDER

    labels = {t: adapter.token_label(t) for t in job.candidate_token_ids}
    if len(set(labels.values())) != len(labels):
        raise UsageError(f"candidate token ids map to duplicate token strings: {labels}")
    generated: list[int] = []
    steps: list[dict] = []
    references: list[dict] = []
    stop_reason = "max_steps"

    for _ in range(job.max_steps):
        suffix = adapter.embed_tokens(generated)
        recorded: dict[str, dict] = {}
        scores: dict[str, dict[int, float]] = {}
        next_token: int | None = None
        for branch in branches:
            prefix = torch.cat([prompts[branch], suffix], dim=1)
            final, rows = adapter.step_rows(prefix, job.layers)
            if branch == "full":
                # Greedy continuation always reads the untruncated row.
                next_token = int(np.argmax(final))
            stored = (
                _stored_ids(final, job.stored.n, job.candidate_token_ids)
                if job.stored.truncates
                else None
            )
            entry = {
                "final": final if stored is None else final[stored],
                "layers": {
                    j: (row if stored is None else row[stored]) for j, row in rows.items()
                },
            }
            if stored is not None:
                entry["stored_ids"] = stored
            recorded[branch] = entry
            scores[branch] = _candidate_scores(final, stored, job.candidate_token_ids)

        full_scores = scores["full"]
        # First maximum in candidate order, the same tie-break replay applies.
        winner = job.candidate_token_ids[
            int(np.argmax([full_scores[t] for t in job.candidate_token_ids]))
        ]
        references.append(
            {
                "step": len(steps),
                "scores": {
                    branch: {labels[t]: value for t, value in scores[branch].items()}
                    for branch in branches
                },
                "full_winner": labels[winner],
            }
        )
        steps.append(recorded)
        generated.append(next_token)
        if adapter.eos_token_id is not None and next_token == adapter.eos_token_id:
            stop_reason = "eos"
            break

    header = WireHeader(
        vocab_size=adapter.vocab_size,
        layers=job.layers,
        stored=job.stored,
        branches=branches,
    )
    write_trace(job.out_path, header, steps)

    sidecar_path = None
    if job.sidecar:
        sidecar_path = job.sidecar_path
        payload = {
            "trace": os.path.basename(str(job.out_path)),
            "candidates": {
                "agg": "log_sum_exp",
                "items": [
                    {"label": labels[t], "token_ids": [int(t)]}
                    for t in job.candidate_token_ids
                ],
            },
            "steps": references,
        }
        try:
            with open(sidecar_path, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=1, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise DataError(f"cannot write sidecar {sidecar_path}: {exc}") from None

    return ExportResult(
        trace_path=str(job.out_path),
        sidecar_path=sidecar_path,
        steps_recorded=len(steps),
        generated_token_ids=tuple(generated),
        stop_reason=stop_reason,
    )
