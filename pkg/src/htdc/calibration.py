"""Dual-probe differential calibration and the per-step decode pipeline.

When a step is hesitation-prone, two extra forward passes run: a visual
perturbation probe (v0) and a semantic nullification probe (x0). The gap
between the full branch's candidate scores and each probe's scores tells
how much of a candidate's support is grounded rather than prior-driven,
and the calibrated score folds those gaps back in, scaled by the gate
weight. Selection is then restricted to candidates that are plausible
under the full branch (its top-K tokens) and guarded with a hysteresis
margin so a challenger must beat the incumbent clearly.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .backend import Backend, BranchKind, DecodeState, StepLogits
from .candidates import CandidateScores, CandidateSet, log_probs, score_candidates
from .errors import ConfigurationError, InvariantViolation
from .hesitation import HesitationConfig, HesitationReport, compute_step_hesitation
from .numerics import NEG_INF

logger = logging.getLogger(__name__)


class GateMode(str, Enum):
    """How the hesitation gate drives the probe passes.

    hard_then_soft: probes run only past the trigger threshold and the gate
      weight scales the correction (the default).
    soft_only: probes run on every step; the gate weight still scales the
      correction.
    static: always-on calibration at full strength; the ablation baseline
      whose outputs ignore the hesitation signal entirely.
    """

    HARD_THEN_SOFT = "hard_then_soft"
    SOFT_ONLY = "soft_only"
    STATIC = "static"


class HysteresisMode(str, Enum):
    """Which scale the incumbent is defended on.

    calibrated_scale compares challenger and incumbent both on calibrated
    scores (the default); mixed_scale defends the incumbent on its original
    full-branch score.
    """

    CALIBRATED_SCALE = "calibrated_scale"
    MIXED_SCALE = "mixed_scale"


@dataclass(frozen=True)
class CalibrationParams:
    """Scalar knobs for calibration and selection."""

    visual_coeff: float = 1.0
    semantic_coeff: float = 1.0
    plausibility_top_k: int = 200
    hysteresis_margin: float = 0.05
    gate_mode: GateMode = GateMode.HARD_THEN_SOFT
    hysteresis_mode: HysteresisMode = HysteresisMode.CALIBRATED_SCALE

    def __post_init__(self) -> None:
        object.__setattr__(self, "gate_mode", GateMode(self.gate_mode))
        object.__setattr__(self, "hysteresis_mode", HysteresisMode(self.hysteresis_mode))
        if self.plausibility_top_k < 1:
            raise ConfigurationError(
                f"plausibility_top_k must be >= 1, got {self.plausibility_top_k}"
            )
        if self.hysteresis_margin < 0:
            raise ConfigurationError(
                f"hysteresis_margin must be >= 0, got {self.hysteresis_margin}"
            )


@dataclass(frozen=True)
class DifferentialSignals:
    """Per-candidate grounding gaps: full-branch score minus probe score."""

    labels: tuple[str, ...]
    visual: np.ndarray = field(repr=False)
    semantic: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DecodeStepResult:
    """Everything one decoding step produced."""

    chosen_label: str
    full_scores: CandidateScores
    hesitation: HesitationReport
    forward_passes: int
    triggered: bool
    flipped: bool
    v0_scores: CandidateScores | None = None
    x0_scores: CandidateScores | None = None
    signals: DifferentialSignals | None = None
    calibrated_scores: CandidateScores | None = None
    eligibility: np.ndarray | None = field(default=None, repr=False)
    wall_seconds: float = 0.0


def _gap(full: np.ndarray, probe: np.ndarray) -> np.ndarray:
    # Both scores -inf means "no support either way"; the gap is defined
    # as 0 so a fully masked candidate carries no probe evidence.
    both_masked = np.isneginf(full) & np.isneginf(probe)
    with np.errstate(invalid="ignore"):
        out = full - probe
    out[both_masked] = 0.0
    return out


def differential_signals(
    full: CandidateScores, v0: CandidateScores, x0: CandidateScores
) -> DifferentialSignals:
    """Grounding gaps of the full branch against each probe branch."""
    if full.labels != v0.labels or full.labels != x0.labels:
        raise ConfigurationError("branch scores are not aligned on the same candidate labels")
    return DifferentialSignals(
        labels=full.labels,
        visual=_gap(full.scores, v0.scores),
        semantic=_gap(full.scores, x0.scores),
    )


def calibrate(
    full: CandidateScores,
    signals: DifferentialSignals,
    gate: float,
    params: CalibrationParams,
) -> CandidateScores:
    """Calibrated score: full score plus the gated, weighted grounding gaps.

    A zero gate or both coefficients zero short-circuits to an exact copy
    of the full-branch scores, so switched-off calibration is bit-identical
    to no calibration.
    """
    if full.labels != signals.labels:
        raise ConfigurationError("signals are not aligned with the full-branch scores")
    if not 0.0 <= gate <= 1.0:
        raise ConfigurationError(f"gate weight must be in [0, 1], got {gate}")
    if gate == 0.0 or (params.visual_coeff == 0.0 and params.semantic_coeff == 0.0):
        return CandidateScores(labels=full.labels, scores=full.scores.copy())
    correction = np.zeros_like(full.scores)
    if params.visual_coeff != 0.0:
        correction = correction + params.visual_coeff * signals.visual
    if params.semantic_coeff != 0.0:
        correction = correction + params.semantic_coeff * signals.semantic
    return CandidateScores(labels=full.labels, scores=full.scores + gate * correction)


def plausibility_mask(
    full_final_logits: np.ndarray, plausibility_top_k: int, candidate_set: CandidateSet
) -> np.ndarray:
    """Adaptive plausibility constraint at the candidate level.

    A candidate stays eligible iff at least one of its tokens sits in the
    top-K of the full branch's final logits. Ties at the cut are broken
    toward the lower token id.
    """
    arr = np.asarray(full_final_logits, dtype=np.float64)
    if plausibility_top_k < 1:
        raise ConfigurationError(f"plausibility_top_k must be >= 1, got {plausibility_top_k}")
    candidate_set.require_within_vocab(arr.size)
    k = min(plausibility_top_k, arr.size)
    order = np.argsort(-arr, kind="stable")
    top = set(int(t) for t in order[:k])
    mask = np.array(
        [any(t in top for t in cand.token_ids) for cand in candidate_set.candidates],
        dtype=bool,
    )
    return mask


def masked_scores(scores: CandidateScores, eligibility: np.ndarray) -> CandidateScores:
    """Scores with ineligible candidates forced to -inf."""
    if eligibility.shape != scores.scores.shape:
        raise ConfigurationError("eligibility mask does not match the candidate count")
    out = scores.scores.copy()
    out[~eligibility] = NEG_INF
    return CandidateScores(labels=scores.labels, scores=out)


def select_with_hysteresis(
    calibrated: CandidateScores,
    full_winner: str,
    margin: float,
    mode: HysteresisMode = HysteresisMode.CALIBRATED_SCALE,
    full: CandidateScores | None = None,
) -> str:
    """Return the challenger only if it clears the incumbent by the margin.

    Ties inside the challenger argmax resolve to the earliest candidate in
    set order. With margin 0 a challenger that exactly matches the
    incumbent's score wins, which keeps the rule monotone in the margin.
    """
    if margin < 0:
        raise ConfigurationError(f"hysteresis margin must be >= 0, got {margin}")
    challenger = calibrated.argmax_label
    if mode is HysteresisMode.CALIBRATED_SCALE:
        incumbent_score = calibrated.score_of(full_winner)
    else:
        if full is None:
            raise ConfigurationError("mixed_scale hysteresis needs the full-branch scores")
        incumbent_score = full.score_of(full_winner)
    if calibrated.score_of(challenger) >= incumbent_score + margin:
        return challenger
    return full_winner


@dataclass(frozen=True)
class EngineConfig:
    """The full per-step engine configuration."""

    hesitation: HesitationConfig = HesitationConfig()
    calibration: CalibrationParams = CalibrationParams()


def decode_step(
    state: DecodeState,
    backend: Backend,
    candidate_set: CandidateSet,
    config: EngineConfig,
) -> DecodeStepResult:
    """One gated decoding step.

    Exactly one forward pass happens on a quiet step and exactly three on a
    probed one; the result's ``forward_passes`` counts them. ``triggered``
    records the probe decision (under soft_only and static gating it is
    always true), while the embedded hesitation report keeps the raw
    signal-level threshold comparison.
    """
    started = time.perf_counter()
    layers = config.hesitation.sampled_layers
    if layers is None:
        raise ConfigurationError("sampled_layers is unresolved; resolve it against the backend")

    full_step: StepLogits = backend.forward(state, BranchKind.FULL, layers)
    report = compute_step_hesitation(full_step, config.hesitation, candidate_set)

    full_scores = score_candidates(log_probs(full_step.final_logits), candidate_set)
    eligibility = plausibility_mask(
        full_step.final_logits, config.calibration.plausibility_top_k, candidate_set
    )
    fail_open = not bool(eligibility.any())
    if fail_open:
        logger.warning(
            "all candidates ineligible under plausibility top-%d at step %d; "
            "falling back to the unconstrained full-branch argmax",
            config.calibration.plausibility_top_k,
            state.step_index,
        )
        full_winner = full_scores.argmax_label
    else:
        full_winner = masked_scores(full_scores, eligibility).argmax_label

    mode = config.calibration.gate_mode
    probe = report.triggered if mode is GateMode.HARD_THEN_SOFT else True

    if not probe:
        return DecodeStepResult(
            chosen_label=full_winner,
            full_scores=full_scores,
            hesitation=report,
            forward_passes=1,
            triggered=False,
            flipped=False,
            eligibility=eligibility,
            wall_seconds=time.perf_counter() - started,
        )

    v0_step = backend.forward(state, BranchKind.V0, ())
    x0_step = backend.forward(state, BranchKind.X0, ())
    v0_scores = score_candidates(log_probs(v0_step.final_logits), candidate_set)
    x0_scores = score_candidates(log_probs(x0_step.final_logits), candidate_set)
    signals = differential_signals(full_scores, v0_scores, x0_scores)
    gate = 1.0 if mode is GateMode.STATIC else report.gate_weight
    calibrated = calibrate(full_scores, signals, gate, config.calibration)

    if fail_open:
        chosen = full_winner
    else:
        chosen = select_with_hysteresis(
            masked_scores(calibrated, eligibility),
            full_winner,
            config.calibration.hysteresis_margin,
            mode=config.calibration.hysteresis_mode,
            full=masked_scores(full_scores, eligibility),
        )
    forward_passes = (
        full_step.forward_cost + v0_step.forward_cost + x0_step.forward_cost
    )
    if forward_passes != 3:
        raise InvariantViolation(f"probed step cost {forward_passes} passes, expected 3")
    return DecodeStepResult(
        chosen_label=chosen,
        full_scores=full_scores,
        hesitation=report,
        forward_passes=forward_passes,
        triggered=True,
        flipped=chosen != full_winner,
        v0_scores=v0_scores,
        x0_scores=x0_scores,
        signals=signals,
        calibrated_scores=calibrated,
        eligibility=eligibility,
        wall_seconds=time.perf_counter() - started,
    )
