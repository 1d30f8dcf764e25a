"""Candidate-level scoring: collapse a branch's final logits onto answers.

A candidate (for example the answer "yes") owns a non-empty set of
vocabulary ids, its surface forms. Its score is an aggregate of the
log-probabilities of those tokens: log-sum-exp pools the total support for
the answer (the default), max keeps only the best surface form, which suits
tasks where exactly one form is ever produced.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError
from .numerics import NEG_INF, as_score_vector, log_softmax, log_sum_exp


class AggMode(str, Enum):
    LOG_SUM_EXP = "log_sum_exp"
    MAX = "max"


@dataclass(frozen=True)
class Candidate:
    """An answer label together with the token ids that express it."""

    label: str
    token_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.label:
            raise DataError("candidate label must be a non-empty string")
        ids = tuple(sorted({int(t) for t in self.token_ids}))
        if not ids:
            raise DataError(f"candidate '{self.label}' has an empty token set")
        if ids[0] < 0:
            raise DataError(f"candidate '{self.label}' has a negative token id")
        object.__setattr__(self, "token_ids", ids)


@dataclass(frozen=True)
class CandidateSet:
    """The closed answer space for one task instance."""

    candidates: tuple[Candidate, ...]
    agg_mode: AggMode = AggMode.LOG_SUM_EXP

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "agg_mode", AggMode(self.agg_mode))
        if not self.candidates:
            raise DataError("candidate set must contain at least one candidate")
        labels = [c.label for c in self.candidates]
        if len(set(labels)) != len(labels):
            raise DataError(f"candidate labels must be unique, got {labels}")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(c.label for c in self.candidates)

    def all_token_ids(self) -> tuple[int, ...]:
        ids: set[int] = set()
        for c in self.candidates:
            ids.update(c.token_ids)
        return tuple(sorted(ids))

    def index_of(self, label: str) -> int:
        for i, c in enumerate(self.candidates):
            if c.label == label:
                return i
        raise KeyError(label)

    def require_within_vocab(self, vocab_size: int) -> None:
        for c in self.candidates:
            for tid in c.token_ids:
                if tid >= vocab_size:
                    raise DataError(
                        f"candidate '{c.label}' uses token id {tid}, outside "
                        f"vocabulary of size {vocab_size}"
                    )


@dataclass(frozen=True)
class CandidateScores:
    """Per-candidate scores aligned with a candidate set's label order."""

    labels: tuple[str, ...]
    scores: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.shape != (len(self.labels),):
            raise ValueError(
                f"scores shape {arr.shape} does not match {len(self.labels)} labels"
            )
        object.__setattr__(self, "scores", arr)

    @property
    def argmax_label(self) -> str:
        # np.argmax keeps the first maximum, which is the documented
        # tie-break: earliest candidate in set order wins.
        return self.labels[int(np.argmax(self.scores))]

    def score_of(self, label: str) -> float:
        return float(self.scores[self.labels.index(label)])

    def as_dict(self) -> dict[str, float]:
        return {lab: float(s) for lab, s in zip(self.labels, self.scores)}


def log_probs(final_logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Log-softmax over the full vocabulary; -inf mask entries pass through."""
    arr = as_score_vector(final_logits, name="final_logits")
    if arr.size == 0 or not np.isfinite(arr).any():
        raise DataError("empty support")
    return log_softmax(arr)


def score_candidates(
    token_log_probs: Sequence[float] | np.ndarray, candidate_set: CandidateSet
) -> CandidateScores:
    """Aggregate token log-probabilities into one score per candidate.

    A candidate whose every token is masked to -inf scores -inf; that is
    legal input downstream (it simply never wins a comparison).
    """
    arr = as_score_vector(token_log_probs, name="token_log_probs")
    candidate_set.require_within_vocab(arr.size)
    out = np.empty(len(candidate_set.candidates), dtype=np.float64)
    for i, cand in enumerate(candidate_set.candidates):
        vals = arr[list(cand.token_ids)]
        if candidate_set.agg_mode is AggMode.LOG_SUM_EXP:
            out[i] = log_sum_exp(vals)
        else:
            out[i] = float(np.max(vals))
    return CandidateScores(labels=candidate_set.labels, scores=out)


def parse_candidate_set(obj: Mapping) -> CandidateSet:
    """Build a CandidateSet from its JSON form.

    Expected shape: {"agg": "log_sum_exp" | "max",
                     "items": [{"label": ..., "token_ids": [...]}, ...]}.
    """
    if not isinstance(obj, Mapping):
        raise DataError(f"candidates must be an object, got {type(obj).__name__}")
    items = obj.get("items")
    if not isinstance(items, Iterable) or isinstance(items, (str, bytes)):
        raise DataError("candidates.items must be a list of candidate objects")
    cands = []
    for entry in items:
        if not isinstance(entry, Mapping) or "label" not in entry or "token_ids" not in entry:
            raise DataError(f"malformed candidate entry: {entry!r}")
        cands.append(Candidate(label=str(entry["label"]), token_ids=tuple(entry["token_ids"])))
    agg = obj.get("agg", AggMode.LOG_SUM_EXP.value)
    try:
        mode = AggMode(agg)
    except ValueError:
        raise DataError(f"unknown aggregation mode: {agg!r}") from None
    return CandidateSet(candidates=tuple(cands), agg_mode=mode)
