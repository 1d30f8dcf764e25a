"""Hesitation-triggered differential calibration for greedy decoding.

The engine watches how a model's intermediate layers move toward the final
distribution; steps whose layer trajectory keeps reversing are
hesitation-prone. Only on those steps does it pay for two extra probe
passes (a visual perturbation and a semantic nullification), then
recalibrate candidate scores with the probe gaps, constrain selection to
plausible candidates and require a hysteresis margin before overturning
the incumbent answer.
"""

from .backend import (
    Backend,
    BranchKind,
    DecodeState,
    StepLogits,
    SyntheticScenario,
    TraceBackend,
    load_trace,
    make_synthetic,
)
from .calibration import (
    CalibrationParams,
    DecodeStepResult,
    DifferentialSignals,
    EngineConfig,
    GateMode,
    HysteresisMode,
    calibrate,
    decode_step,
    differential_signals,
    masked_scores,
    plausibility_mask,
    select_with_hysteresis,
)
from .candidates import (
    AggMode,
    Candidate,
    CandidateScores,
    CandidateSet,
    log_probs,
    score_candidates,
)
from .config import BackendSettings, HarnessConfig, RunSettings, default_config
from .errors import (
    ConfigurationError,
    DataError,
    EngineError,
    InvariantViolation,
    TraceFormatError,
)
from .hesitation import (
    HesitationConfig,
    HesitationReport,
    KeywordSet,
    LayerUpdateState,
    build_keyword_set,
    compute_step_hesitation,
    gate_weight,
    hesitation_score,
    keyword_distribution,
    layer_hesitation,
)
from .numerics import (
    NEG_INF,
    cosine_distance,
    ema_update,
    log_softmax,
    log_sum_exp,
    sigmoid,
    softmax_tempered,
)

__version__ = "0.1.0"

__all__ = [
    "AggMode",
    "Backend",
    "BackendSettings",
    "BranchKind",
    "CalibrationParams",
    "Candidate",
    "CandidateScores",
    "CandidateSet",
    "ConfigurationError",
    "DataError",
    "DecodeState",
    "DecodeStepResult",
    "DifferentialSignals",
    "EngineConfig",
    "EngineError",
    "GateMode",
    "HarnessConfig",
    "HesitationConfig",
    "HesitationReport",
    "HysteresisMode",
    "InvariantViolation",
    "KeywordSet",
    "LayerUpdateState",
    "NEG_INF",
    "RunSettings",
    "StepLogits",
    "SyntheticScenario",
    "TraceBackend",
    "TraceFormatError",
    "build_keyword_set",
    "calibrate",
    "compute_step_hesitation",
    "cosine_distance",
    "decode_step",
    "default_config",
    "differential_signals",
    "ema_update",
    "gate_weight",
    "hesitation_score",
    "keyword_distribution",
    "layer_hesitation",
    "load_trace",
    "log_probs",
    "log_softmax",
    "log_sum_exp",
    "make_synthetic",
    "masked_scores",
    "plausibility_mask",
    "score_candidates",
    "select_with_hysteresis",
    "sigmoid",
    "softmax_tempered",
]
