"""Replay a recorded trace and verify it against its reference sidecar.

A sidecar (written by an exporter next to the trace) pins the candidate
scores the exporter computed at export time:

  {"trace": "<basename>",
   "candidates": {"agg": "log_sum_exp",
                  "items": [{"label": ..., "token_ids": [...]}, ...]},
   "steps": [{"step": 0,
              "scores": {"full": {label: score, ...},
                         "v0": {...}, "x0": {...}},
              "full_winner": label}, ...]}

Replaying scores each recorded branch through the engine's own scoring
path and reports the largest absolute deviation from the sidecar values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .backend import BranchKind, TraceBackend, load_trace
from .candidates import CandidateSet, log_probs, parse_candidate_set, score_candidates
from .datasets import replay_state
from .errors import DataError


@dataclass(frozen=True)
class ReplayOutcome:
    steps: int
    branches_checked: int
    max_abs_deviation: float
    winner_mismatches: int

    def within(self, tolerance: float) -> bool:
        return self.max_abs_deviation <= tolerance and self.winner_mismatches == 0


def load_sidecar(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read sidecar {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"sidecar {path} is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or "candidates" not in obj or "steps" not in obj:
        raise DataError(f"sidecar {path} must carry 'candidates' and 'steps'")
    return obj


def verify_against_sidecar(backend: TraceBackend, sidecar: dict) -> ReplayOutcome:
    """Score every recorded branch and compare with the sidecar's values."""
    candidate_set: CandidateSet = parse_candidate_set(sidecar["candidates"])
    steps = sidecar["steps"]
    if not isinstance(steps, list) or not steps:
        raise DataError("sidecar steps must be a non-empty list")
    recorded = {b.value for b in backend.available_branches()}
    max_dev = 0.0
    mismatches = 0
    checked = 0
    for entry in steps:
        if not isinstance(entry, dict) or "step" not in entry or "scores" not in entry:
            raise DataError(f"malformed sidecar step entry: {entry!r}")
        t = int(entry["step"])
        state = replay_state("replay", "", t)
        for branch_name, expected in entry["scores"].items():
            if branch_name not in recorded:
                raise DataError(
                    f"sidecar references branch '{branch_name}' the trace does not record"
                )
            step = backend.forward(state, BranchKind(branch_name), ())
            scores = score_candidates(log_probs(step.final_logits), candidate_set)
            got = scores.as_dict()
            if set(expected) != set(got):
                raise DataError(
                    f"sidecar step {t} branch '{branch_name}' labels {sorted(expected)} "
                    f"do not match candidates {sorted(got)}"
                )
            for label, value in expected.items():
                max_dev = max(max_dev, abs(float(value) - got[label]))
            checked += 1
            if branch_name == "full" and "full_winner" in entry:
                if scores.argmax_label != entry["full_winner"]:
                    mismatches += 1
    return ReplayOutcome(
        steps=len(steps),
        branches_checked=checked,
        max_abs_deviation=max_dev,
        winner_mismatches=mismatches,
    )


def replay_trace(trace_path, sidecar_path) -> ReplayOutcome:
    backend = load_trace(trace_path)
    sidecar = load_sidecar(sidecar_path)
    return verify_against_sidecar(backend, sidecar)
