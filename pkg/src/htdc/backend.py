"""Model backends: sources of final and intermediate-layer logits.

The engine never runs a neural network itself. It asks a backend for one
branch's logits at one decoding step and the backend either synthesizes
them procedurally (seeded, fully deterministic), replays scripted rows, or
reads them back from a recorded trace file. Three branches exist per step:
the full input, a visual-perturbation probe (v0) and a semantic
nullification probe (x0).

Backends are read-only after construction and safe to share across
threads; ``forward`` is a pure function of (backend, state, branch,
layers).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from . import trace_format
from .errors import ConfigurationError, DataError
from .numerics import NEG_INF

_HIDDEN_DIM = 32
_PREFIX_FEATURES = 8
_DRIFT_SCALE = 1.0
_OSC_SCALE = 1.5
_LOGIT_SCALE = 4.0
_NORM_EPS = 1e-12

DEFAULT_VISUAL_NOISE_SCALE = 0.8


class BranchKind(Enum):
    """Which conditioning variant a forward pass runs under."""

    FULL = "full"
    V0 = "v0"
    X0 = "x0"


@dataclass(frozen=True)
class DecodeState:
    """Everything a backend needs to locate one decoding step."""

    scenario_id: str
    query_text: str
    prefix_tokens: tuple[int, ...]
    step_index: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix_tokens", tuple(int(t) for t in self.prefix_tokens))
        if self.step_index != len(self.prefix_tokens):
            raise DataError(
                f"step_index {self.step_index} does not match prefix length "
                f"{len(self.prefix_tokens)}"
            )


@dataclass(frozen=True)
class StepLogits:
    """One branch's final logits plus the requested intermediate rows."""

    branch: BranchKind
    final_logits: np.ndarray = field(repr=False)
    layer_logits: Mapping[int, np.ndarray] = field(repr=False)
    forward_cost: int = 1


@runtime_checkable
class Backend(Protocol):
    """The surface the decoding engine relies on."""

    @property
    def vocab_size(self) -> int: ...

    def layer_universe(self) -> tuple[int, ...]: ...

    def default_sampled_layers(self) -> tuple[int, ...]: ...

    def available_branches(self) -> frozenset[BranchKind]: ...

    def forward(
        self, state: DecodeState, branch: BranchKind, layers: Sequence[int]
    ) -> StepLogits: ...


def _coerce_embedding(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ConfigurationError(f"{name} must be a non-empty 1-D vector")
    if not np.isfinite(arr).all():
        raise ConfigurationError(f"{name} must be finite")
    return arr


def _parse_script(raw, vocab_size: int) -> dict[int, dict[BranchKind, dict]]:
    """Normalize a scripted-rows mapping parsed from JSON.

    Wire shape: {"steps": [{"full": {"final": [...], "layers": {"6": [...]}},
                            "v0": {...}, "x0": {...}}, ...]}
    Rows are plain float lists. Missing rows are legal at parse time; the
    backend raises when decoding actually requests one.
    """
    if not isinstance(raw, Mapping) or "steps" not in raw:
        raise DataError("script must be an object with a 'steps' list")
    steps = raw["steps"]
    if not isinstance(steps, list) or not steps:
        raise DataError("script.steps must be a non-empty list")
    parsed: dict[int, dict[BranchKind, dict]] = {}
    for t, entry in enumerate(steps):
        if not isinstance(entry, Mapping):
            raise DataError(f"script step {t} must be an object")
        per_branch: dict[BranchKind, dict] = {}
        for branch in BranchKind:
            if branch.value not in entry:
                continue
            spec = entry[branch.value]
            if not isinstance(spec, Mapping) or "final" not in spec:
                raise DataError(f"script step {t} branch '{branch.value}' needs a 'final' row")
            final = np.asarray(spec["final"], dtype=np.float64)
            if final.shape != (vocab_size,):
                raise DataError(
                    f"script step {t} branch '{branch.value}' final row has "
                    f"{final.size} values, expected {vocab_size}"
                )
            layers = {}
            for key, row in dict(spec.get("layers", {})).items():
                arr = np.asarray(row, dtype=np.float64)
                if arr.shape != (vocab_size,):
                    raise DataError(
                        f"script step {t} branch '{branch.value}' layer {key} row has "
                        f"{arr.size} values, expected {vocab_size}"
                    )
                layers[int(key)] = arr
            per_branch[branch] = {"final": final, "layers": layers}
        if not per_branch:
            raise DataError(f"script step {t} carries no branches")
        parsed[t] = per_branch
    return parsed


@dataclass
class SyntheticScenario:
    """A deterministic stand-in for one (image, query) decoding problem.

    In procedural mode, logits come from a small seeded linear stack over
    the visual embedding, the query embedding and a summary of the prefix.
    The v0 branch adds zero-mean Gaussian noise (scale
    ``visual_noise_scale``) to the visual embedding; the x0 branch swaps the
    query embedding for the template embedding. When ``script`` is present
    it fully replaces the procedural stack with explicit rows.
    """

    seed: int
    vocab_size: int
    num_layers: int
    visual_embedding: np.ndarray
    query_embedding: np.ndarray
    template_embedding: np.ndarray
    visual_noise_scale: float = DEFAULT_VISUAL_NOISE_SCALE
    script: dict | None = None

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise ConfigurationError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.num_layers < 2:
            raise ConfigurationError(f"num_layers must be >= 2, got {self.num_layers}")
        if self.visual_noise_scale < 0:
            raise ConfigurationError(
                f"visual_noise_scale must be >= 0, got {self.visual_noise_scale}"
            )
        self.visual_embedding = _coerce_embedding(self.visual_embedding, "visual_embedding")
        self.query_embedding = _coerce_embedding(self.query_embedding, "query_embedding")
        self.template_embedding = _coerce_embedding(self.template_embedding, "template_embedding")
        if self.query_embedding.size != self.template_embedding.size:
            raise ConfigurationError(
                "template_embedding must match query_embedding's dimension"
            )
        if self.visual_embedding.size != self.query_embedding.size:
            raise ConfigurationError(
                "visual_embedding must match query_embedding's dimension"
            )

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SyntheticScenario":
        try:
            scenario = cls(
                seed=int(obj["seed"]),
                vocab_size=int(obj["vocab_size"]),
                num_layers=int(obj["num_layers"]),
                visual_embedding=obj["visual_embedding"],
                query_embedding=obj["query_embedding"],
                template_embedding=obj["template_embedding"],
                visual_noise_scale=float(
                    obj.get("visual_noise_scale", DEFAULT_VISUAL_NOISE_SCALE)
                ),
                script=None,
            )
        except KeyError as exc:
            raise DataError(f"synthetic scenario is missing field {exc.args[0]!r}") from None
        if obj.get("script") is not None:
            scenario.script = obj["script"]
        return scenario

    def to_dict(self) -> dict:
        out = {
            "type": "synthetic",
            "seed": self.seed,
            "vocab_size": self.vocab_size,
            "num_layers": self.num_layers,
            "visual_embedding": [float(x) for x in self.visual_embedding],
            "query_embedding": [float(x) for x in self.query_embedding],
            "template_embedding": [float(x) for x in self.template_embedding],
            "visual_noise_scale": self.visual_noise_scale,
        }
        if self.script is not None:
            out["script"] = self.script
        return out


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _prefix_features(prefix_tokens: Sequence[int]) -> np.ndarray:
    """A fixed-width, RNG-free summary of the decoded prefix."""
    out = np.zeros(_PREFIX_FEATURES, dtype=np.float64)
    n = len(prefix_tokens)
    if n == 0:
        return out
    toks = np.asarray(prefix_tokens, dtype=np.float64)
    pos = np.arange(n, dtype=np.float64)
    for k in range(_PREFIX_FEATURES):
        out[k] = float(np.mean(np.sin(0.7 * (toks + 1.0) * (k + 1) + 0.3 * pos)))
    return out


def _misalignment(v: np.ndarray, q: np.ndarray) -> float:
    """Half of (1 - cosine similarity); 0 when either vector vanishes.

    This is the synthetic stack's instability coefficient: a query that
    contradicts the visual evidence drives oscillating layer dynamics.
    """
    nv = float(np.linalg.norm(v))
    nq = float(np.linalg.norm(q))
    if nv < _NORM_EPS or nq < _NORM_EPS:
        return 0.0
    cos = float(np.dot(v, q) / (nv * nq))
    return (1.0 - max(-1.0, min(1.0, cos))) / 2.0


class SyntheticBackend:
    """Seeded procedural or scripted logit source for one scenario."""

    def __init__(self, scenario: SyntheticScenario):
        self._scenario = scenario
        self._script = (
            None if scenario.script is None else _parse_script(scenario.script, scenario.vocab_size)
        )
        dim_in = scenario.visual_embedding.size + scenario.query_embedding.size + _PREFIX_FEATURES
        rng = np.random.default_rng(scenario.seed)
        self._w_in = rng.normal(size=(_HIDDEN_DIM, dim_in)) / np.sqrt(dim_in)
        self._w_drift = rng.normal(size=(_HIDDEN_DIM, _HIDDEN_DIM)) / np.sqrt(_HIDDEN_DIM)
        osc = rng.normal(size=_HIDDEN_DIM)
        self._osc_dir = osc / np.linalg.norm(osc)
        self._head = rng.normal(size=(scenario.vocab_size, _HIDDEN_DIM)) / np.sqrt(_HIDDEN_DIM)

    @property
    def vocab_size(self) -> int:
        return self._scenario.vocab_size

    @property
    def num_steps(self) -> int | None:
        return None if self._script is None else len(self._script)

    def layer_universe(self) -> tuple[int, ...]:
        return tuple(range(self._scenario.num_layers))

    def default_sampled_layers(self) -> tuple[int, ...]:
        """The last half of the backbone at stride 2 (at least two layers)."""
        L = self._scenario.num_layers
        picked = list(range(L // 2, L, 2))
        if len(picked) < 2:
            picked = [max(0, L - 2), L - 1]
        return tuple(picked)

    def available_branches(self) -> frozenset[BranchKind]:
        return frozenset(BranchKind)

    def forward(
        self, state: DecodeState, branch: BranchKind, layers: Sequence[int]
    ) -> StepLogits:
        requested = sorted({int(j) for j in layers})
        for j in requested:
            if not 0 <= j < self._scenario.num_layers:
                raise DataError(
                    f"layer {j} outside synthetic backbone of "
                    f"{self._scenario.num_layers} layers"
                )
        if self._script is not None:
            final, rows = self._scripted_rows(state, branch, requested)
        else:
            final, rows = self._procedural_rows(state, branch, requested)
        return StepLogits(branch=branch, final_logits=final, layer_logits=rows, forward_cost=1)

    def _scripted_rows(self, state, branch, requested):
        step_rows = self._script.get(state.step_index)
        if step_rows is None:
            raise DataError(f"scripted scenario has no rows for step {state.step_index}")
        branch_rows = step_rows.get(branch)
        if branch_rows is None:
            raise DataError(
                f"scripted scenario has no rows for branch '{branch.value}' at "
                f"step {state.step_index}"
            )
        rows = {}
        for j in requested:
            if j not in branch_rows["layers"]:
                raise DataError(
                    f"scripted scenario has no row for layer {j} "
                    f"(branch '{branch.value}', step {state.step_index})"
                )
            rows[j] = branch_rows["layers"][j].copy()
        return branch_rows["final"].copy(), rows

    def _procedural_rows(self, state, branch, requested):
        sc = self._scenario
        visual = sc.visual_embedding
        if branch is BranchKind.V0 and sc.visual_noise_scale > 0:
            rng = np.random.default_rng(_derive_seed(sc.seed, state.step_index, "v0-noise"))
            visual = visual + sc.visual_noise_scale * rng.normal(size=visual.shape)
        query = sc.template_embedding if branch is BranchKind.X0 else sc.query_embedding

        feats = np.concatenate([visual, query, _prefix_features(state.prefix_tokens)])
        base = np.tanh(self._w_in @ feats)
        drift = np.tanh(self._w_drift @ base)
        wobble = _misalignment(visual, query)
        L = sc.num_layers

        def row(j: int) -> np.ndarray:
            phase = -1.0 if (j // 2) % 2 else 1.0
            hidden = (
                base
                + ((j + 1) / L) * _DRIFT_SCALE * drift
                + wobble * _OSC_SCALE * phase * self._osc_dir
            )
            return _LOGIT_SCALE * (self._head @ np.tanh(hidden))

        return row(L - 1), {j: row(j) for j in requested}


def make_synthetic(scenario: SyntheticScenario) -> SyntheticBackend:
    """Validate a scenario and wrap it in a backend."""
    return SyntheticBackend(scenario)


class TraceBackend:
    """Replays logits recorded in a trace file; fail-closed on bad files."""

    def __init__(self, header: trace_format.TraceHeader, steps, path):
        self._header = header
        self._steps = steps
        self._path = str(path)

    @property
    def vocab_size(self) -> int:
        return self._header.vocab_size

    @property
    def num_steps(self) -> int:
        return len(self._steps)

    @property
    def path(self) -> str:
        return self._path

    def layer_universe(self) -> tuple[int, ...]:
        return tuple(self._header.layers)

    def default_sampled_layers(self) -> tuple[int, ...]:
        # Whatever the exporter recorded is the sampling universe.
        return tuple(self._header.layers)

    def available_branches(self) -> frozenset[BranchKind]:
        return frozenset(BranchKind(b) for b in self._header.branches_recorded)

    def _widen(self, record: trace_format.BranchRecord, row: np.ndarray) -> np.ndarray:
        if record.stored_ids is None:
            return row.copy()
        out = np.full(self._header.vocab_size, NEG_INF, dtype=np.float64)
        out[record.stored_ids] = row
        return out

    def forward(
        self, state: DecodeState, branch: BranchKind, layers: Sequence[int]
    ) -> StepLogits:
        if not 0 <= state.step_index < len(self._steps):
            raise DataError(
                f"step {state.step_index} not recorded (trace has {len(self._steps)} steps)"
            )
        record = self._steps[state.step_index].branches.get(branch.value)
        if record is None:
            raise DataError(f"branch not recorded: '{branch.value}' at step {state.step_index}")
        rows = {}
        for j in sorted({int(j) for j in layers}):
            if j not in record.layer_rows:
                raise DataError(f"layer not recorded: {j} (trace records {list(self._header.layers)})")
            rows[j] = self._widen(record, record.layer_rows[j])
        return StepLogits(
            branch=branch,
            final_logits=self._widen(record, record.final),
            layer_logits=rows,
            forward_cost=1,
        )


def load_trace(path) -> TraceBackend:
    """Read and integrity-check a trace file, then wrap it in a backend."""
    header, steps = trace_format.read_trace(path)
    return TraceBackend(header, steps, path)
