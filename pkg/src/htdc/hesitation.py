"""Layer-wise hesitation estimation from intermediate-layer logit dynamics.

For one decoding step, the full branch's intermediate layers are projected
onto a small keyword set (the top-k tokens of the final distribution plus
every candidate token). Successive sampled layers give a sequence of
keyword distributions; each consecutive pair yields an update vector whose
misalignment with its own smoothed momentum is the layer's reversal score
r in [0, 2]. The step's hesitation combines the mean reversal with the
fraction of spiking reversals, and a sharp sigmoid turns it into a gate
weight in (0, 1) that decides whether the step deserves probe passes.

One convention matters and is applied consistently here and in every
oracle: the momentum is seeded with the first update between the first two
sampled layers, and that first update's r is defined as 0. A sampled set of
|J| layers therefore produces exactly |J| - 1 reversal scores, and all
means are taken over those |J| - 1 values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backend import BranchKind, StepLogits
from .candidates import CandidateSet
from .errors import ConfigurationError, DataError
from .numerics import cosine_distance, ema_update, sigmoid, softmax_tempered

PROVENANCE_TOP_K = "top_k_final"
PROVENANCE_CANDIDATE = "candidate"


@dataclass(frozen=True)
class KeywordSet:
    """The restricted token set hesitation is measured over.

    ``token_ids`` is sorted ascending; ``provenance`` tags each id with how
    it got in (candidate tokens win the tag when both sources apply).
    """

    token_ids: tuple[int, ...]
    provenance: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class LayerUpdateState:
    """Carries the previous keyword distribution and the update momentum."""

    prev_distribution: np.ndarray = field(repr=False)
    ema: np.ndarray | None = field(default=None, repr=False)


@dataclass(frozen=True)
class HesitationConfig:
    """Knobs for the hesitation estimator.

    ``sampled_layers`` may be None in a stored config; it must be resolved
    to a concrete ascending tuple of at least two layers before the
    estimator runs (the harness derives it from the backend when absent).
    ``layer_depth`` asks for that many layers counted back from the top of
    the backbone at stride 2 and is mutually exclusive with an explicit
    layer list.
    """

    sampled_layers: tuple[int, ...] | None = None
    layer_depth: int | None = None
    keyword_top_k: int = 50
    keyword_temperature: float = 1.0
    ema_alpha: float = 0.6
    core_weight: float = 1.0
    spike_threshold: float = 0.5
    gate_center: float = 0.5
    gate_temperature: float = 0.1
    min_gate_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.sampled_layers is not None:
            layers = tuple(int(j) for j in self.sampled_layers)
            if len(layers) < 2:
                raise ConfigurationError(
                    f"sampled_layers needs at least two layers, got {layers}"
                )
            if list(layers) != sorted(set(layers)):
                raise ConfigurationError(
                    f"sampled_layers must be ascending and distinct, got {layers}"
                )
            object.__setattr__(self, "sampled_layers", layers)
        if self.layer_depth is not None:
            if self.sampled_layers is not None:
                raise ConfigurationError("give sampled_layers or layer_depth, not both")
            if self.layer_depth < 2:
                raise ConfigurationError(f"layer_depth must be >= 2, got {self.layer_depth}")
        if self.keyword_top_k < 1:
            raise ConfigurationError(f"keyword_top_k must be >= 1, got {self.keyword_top_k}")
        if not self.keyword_temperature > 0:
            raise ConfigurationError(
                f"keyword_temperature must be > 0, got {self.keyword_temperature}"
            )
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ConfigurationError(f"ema_alpha must be in [0, 1), got {self.ema_alpha}")
        if self.core_weight < 0:
            raise ConfigurationError(f"core_weight must be >= 0, got {self.core_weight}")
        if not self.spike_threshold > 0:
            raise ConfigurationError(
                f"spike_threshold must be > 0, got {self.spike_threshold}"
            )
        if not self.gate_temperature > 0:
            raise ConfigurationError(
                f"gate_temperature must be > 0, got {self.gate_temperature}"
            )
        # 1.0 is deliberately legal: it sits above every attainable gate
        # weight and therefore disables triggering outright.
        if not 0.0 <= self.min_gate_weight <= 1.0:
            raise ConfigurationError(
                f"min_gate_weight must be in [0, 1], got {self.min_gate_weight}"
            )

    def resolved(self, layers: Sequence[int]) -> "HesitationConfig":
        from dataclasses import replace

        return replace(self, sampled_layers=tuple(int(j) for j in layers), layer_depth=None)


@dataclass(frozen=True)
class HesitationReport:
    """Everything the estimator measured for one step.

    ``per_layer_r`` pairs each non-initial sampled layer with the reversal
    score of the update that ends there; the first entry is the seeded
    update and is always 0.
    """

    per_layer_r: tuple[tuple[int, float], ...]
    core: float
    spike_fraction: float
    hes: float
    gate_weight: float
    triggered: bool


def build_keyword_set(
    final_logits: np.ndarray, keyword_top_k: int, candidate_set: CandidateSet
) -> KeywordSet:
    """Top-k final-logit tokens unioned with every candidate token.

    Ties in the top-k cut are broken toward the lower token id, which keeps
    the set reproducible across platforms.
    """
    arr = np.asarray(final_logits, dtype=np.float64)
    if keyword_top_k > arr.size:
        raise ConfigurationError(
            f"keyword_top_k {keyword_top_k} exceeds vocabulary of size {arr.size}"
        )
    candidate_set.require_within_vocab(arr.size)
    order = np.argsort(-arr, kind="stable")  # stable sort favors lower ids on ties
    top = set(int(t) for t in order[:keyword_top_k])
    cand_ids = set(candidate_set.all_token_ids())
    ids = tuple(sorted(top | cand_ids))
    provenance = tuple(
        PROVENANCE_CANDIDATE if t in cand_ids else PROVENANCE_TOP_K for t in ids
    )
    return KeywordSet(token_ids=ids, provenance=provenance)


def keyword_distribution(
    layer_logits: np.ndarray, keywords: KeywordSet, keyword_temperature: float
) -> np.ndarray:
    """Tempered softmax of one layer's logits restricted to the keywords.

    Keyword ids that are masked to -inf (unstored in a truncated trace) get
    probability exactly 0.
    """
    arr = np.asarray(layer_logits, dtype=np.float64)
    if keywords.token_ids and keywords.token_ids[-1] >= arr.size:
        raise DataError(
            f"keyword id {keywords.token_ids[-1]} outside layer row of size {arr.size}"
        )
    restricted = arr[list(keywords.token_ids)]
    return softmax_tempered(restricted, keyword_temperature)


def layer_hesitation(
    current_distribution: np.ndarray, state: LayerUpdateState, ema_alpha: float
) -> tuple[float, LayerUpdateState]:
    """One recurrence step: update momentum, score the update's reversal.

    The reversal score compares the update against the momentum that
    already includes it. On the first call the momentum is seeded with the
    update itself and r is exactly 0 by convention, not computed.
    """
    q = np.asarray(current_distribution, dtype=np.float64)
    prev = state.prev_distribution
    if prev is None:
        raise ConfigurationError("layer update state is not initialized")
    if q.shape != prev.shape:
        raise DataError(
            f"keyword distribution length changed between layers: {prev.shape} -> {q.shape}"
        )
    delta = q - prev
    if state.ema is None:
        return 0.0, LayerUpdateState(prev_distribution=q, ema=delta.copy())
    ema = ema_update(state.ema, delta, ema_alpha)
    r = cosine_distance(delta, ema)
    return r, LayerUpdateState(prev_distribution=q, ema=ema)


def hesitation_score(
    reversal_scores: Sequence[float], core_weight: float, spike_threshold: float
) -> float:
    """core_weight * mean(r) + fraction of r strictly above the threshold."""
    rs = np.asarray(reversal_scores, dtype=np.float64)
    if rs.size == 0:
        raise ValueError("hesitation_score needs at least one reversal score")
    if rs.min() < 0.0 or rs.max() > 2.0:
        raise ValueError("reversal scores must lie in [0, 2]")
    core = float(np.mean(rs))
    spike_fraction = float(np.mean(rs > spike_threshold))
    return core_weight * core + spike_fraction


def gate_weight(hes: float, gate_center: float, gate_temperature: float) -> float:
    """Sharp sigmoid mapping hesitation to a (0, 1) gate weight."""
    if not gate_temperature > 0:
        raise ConfigurationError(f"gate_temperature must be > 0, got {gate_temperature}")
    return sigmoid((hes - gate_center) / gate_temperature)


def compute_step_hesitation(
    step: StepLogits, config: HesitationConfig, candidate_set: CandidateSet
) -> HesitationReport:
    """Run the full estimator for one step's full-branch logits."""
    if step.branch is not BranchKind.FULL:
        raise ConfigurationError(
            f"hesitation is estimated on the full branch, got '{step.branch.value}'"
        )
    layers = config.sampled_layers
    if layers is None:
        raise ConfigurationError("sampled_layers is unresolved; resolve it against a backend")
    for j in layers:
        if j not in step.layer_logits:
            raise DataError(f"layer {j} missing from step logits (have {sorted(step.layer_logits)})")

    keywords = build_keyword_set(step.final_logits, config.keyword_top_k, candidate_set)
    state = LayerUpdateState(
        prev_distribution=keyword_distribution(
            step.layer_logits[layers[0]], keywords, config.keyword_temperature
        )
    )
    per_layer: list[tuple[int, float]] = []
    scores: list[float] = []
    for j in layers[1:]:
        q = keyword_distribution(step.layer_logits[j], keywords, config.keyword_temperature)
        r, state = layer_hesitation(q, state, config.ema_alpha)
        per_layer.append((j, r))
        scores.append(r)

    rs = np.asarray(scores, dtype=np.float64)
    core = float(np.mean(rs))
    spike_fraction = float(np.mean(rs > config.spike_threshold))
    hes = config.core_weight * core + spike_fraction
    weight = gate_weight(hes, config.gate_center, config.gate_temperature)
    return HesitationReport(
        per_layer_r=tuple(per_layer),
        core=core,
        spike_fraction=spike_fraction,
        hes=hes,
        gate_weight=weight,
        triggered=weight > config.min_gate_weight,
    )
