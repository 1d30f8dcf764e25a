"""Deterministic synthetic dataset generation.

Four families cover the engine's behavioral envelope:

  calm         query embeddings aligned with the visual embedding, so the
               layer trajectory drifts smoothly and no step should trigger
               under the default gate.
  oscillating  query embeddings anti-aligned with the visual embedding,
               driving alternating keyword-distribution flips across the
               sampled layers; every step should trigger.
  prior_bias   scripted two-candidate instances. Half are "biased": the
               full branch narrowly prefers "yes" while the truth is "no",
               the semantic-nullification probe exposes the prior, and the
               sampled layers oscillate so the step triggers and the
               calibration flips it. The other half are truthful "yes"
               instances with flat layer dynamics and null probes.
  mixed        a continuum: the angle between query and visual embeddings
               is uniform in [0, pi], so hesitation (and the gate weight)
               spreads over its whole range. Used for gate calibration and
               cost-model runs.

Generation is deterministic: the same recipe and seed produce a
byte-identical dataset file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .backend import BranchKind, DecodeState, make_synthetic, SyntheticScenario
from .candidates import AggMode, Candidate, CandidateSet, log_probs, score_candidates
from .errors import ConfigurationError, DataError

FAMILIES = ("calm", "oscillating", "prior_bias", "mixed")

_YES_TOKEN = 3
_NO_TOKEN = 5


@dataclass(frozen=True)
class Recipe:
    family: str
    counts: dict
    vocab_size: int = 64
    num_layers: int = 12
    embedding_dim: int = 16
    seed: int = 0
    visual_noise_scale: float = 0.8

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}, expected one of {FAMILIES}")
        if self.vocab_size < 8:
            raise ConfigurationError(f"vocab_size must be >= 8, got {self.vocab_size}")
        if self.num_layers < 4:
            raise ConfigurationError(f"num_layers must be >= 4, got {self.num_layers}")
        if self.embedding_dim < 2:
            raise ConfigurationError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.family == "prior_bias":
            needed = {"biased", "truthful"}
            if set(self.counts) != needed or any(int(self.counts[k]) < 1 for k in needed):
                raise DataError(
                    "prior_bias counts must give positive 'biased' and 'truthful'"
                )
        else:
            if set(self.counts) != {"instances"} or int(self.counts["instances"]) < 1:
                raise DataError("counts must give a positive 'instances'")

    @classmethod
    def from_json_file(cls, path) -> "Recipe":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot read recipe {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"recipe {path} is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Recipe":
        if not isinstance(obj, Mapping) or "family" not in obj or "counts" not in obj:
            raise DataError("recipe must be an object with 'family' and 'counts'")
        kwargs = {k: obj[k] for k in
                  ("vocab_size", "num_layers", "embedding_dim", "seed", "visual_noise_scale")
                  if k in obj}
        return cls(family=str(obj["family"]), counts=dict(obj["counts"]), **kwargs)


def _yes_no_candidates() -> dict:
    return {
        "agg": "log_sum_exp",
        "items": [
            {"label": "yes", "token_ids": [_YES_TOKEN]},
            {"label": "no", "token_ids": [_NO_TOKEN]},
        ],
    }


def _candidate_set() -> CandidateSet:
    return CandidateSet(
        candidates=(
            Candidate("yes", (_YES_TOKEN,)),
            Candidate("no", (_NO_TOKEN,)),
        ),
        agg_mode=AggMode.LOG_SUM_EXP,
    )


def _rounded(values: np.ndarray) -> list[float]:
    # 12 significant digits keep files compact while leaving the dynamics
    # unchanged at the tolerances the engine works to.
    return [float(f"{v:.12g}") for v in values]


def _embeddings_at_angle(rng: np.random.Generator, dim: int, angle: float):
    """Visual and query embeddings separated by the given angle."""
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    u = rng.normal(size=dim)
    u -= (u @ v) * v
    u /= np.linalg.norm(u)
    scale_v = 1.0 + 0.5 * rng.random()
    scale_q = 1.0 + 0.5 * rng.random()
    visual = scale_v * v
    query = scale_q * (math.cos(angle) * v + math.sin(angle) * u)
    return visual, query


def _full_winner(scenario: SyntheticScenario, candidate_set: CandidateSet) -> str:
    backend = make_synthetic(scenario)
    state = DecodeState(scenario_id="gen", query_text="", prefix_tokens=(), step_index=0)
    step = backend.forward(state, BranchKind.FULL, ())
    return score_candidates(log_probs(step.final_logits), candidate_set).argmax_label


def _procedural_instance(recipe: Recipe, rng: np.random.Generator, index: int, angle: float) -> dict:
    visual, query = _embeddings_at_angle(rng, recipe.embedding_dim, angle)
    template = rng.normal(size=recipe.embedding_dim)
    template /= np.linalg.norm(template)
    scenario = SyntheticScenario(
        seed=int(rng.integers(0, 2**31 - 1)),
        vocab_size=recipe.vocab_size,
        num_layers=recipe.num_layers,
        visual_embedding=visual,
        query_embedding=query,
        template_embedding=template,
        visual_noise_scale=recipe.visual_noise_scale,
    )
    truth = _full_winner(scenario, _candidate_set())
    spec = scenario.to_dict()
    for key in ("visual_embedding", "query_embedding", "template_embedding"):
        spec[key] = _rounded(np.asarray(spec[key]))
    return {
        "id": f"{recipe.family}-{index:05d}",
        "question": "Does the described object appear in the image?",
        "candidates": _yes_no_candidates(),
        "ground_truth": truth,
        "positive_label": "yes",
        "scenario": spec,
    }


def _default_layer_set(num_layers: int) -> list[int]:
    picked = list(range(num_layers // 2, num_layers, 2))
    if len(picked) < 2:
        picked = [max(0, num_layers - 2), num_layers - 1]
    return picked


def _logits_for(vocab: int, yes_p: float, no_p: float) -> np.ndarray:
    """Final logits whose log-softmax hits the requested yes/no log-probs.

    The remaining mass spreads uniformly over the filler tokens, so the
    vector already sums to probability one and logits equal log-probs.
    """
    rest = 1.0 - yes_p - no_p
    if rest <= 0:
        raise ConfigurationError("yes/no probabilities must leave filler mass")
    filler = math.log(rest / (vocab - 2))
    row = np.full(vocab, filler, dtype=np.float64)
    row[_YES_TOKEN] = math.log(yes_p)
    row[_NO_TOKEN] = math.log(no_p)
    return row


def _swap_yes_no(row: np.ndarray) -> np.ndarray:
    out = row.copy()
    out[_YES_TOKEN], out[_NO_TOKEN] = row[_NO_TOKEN], row[_YES_TOKEN]
    return out


def _script_entry(full_final, layer_rows, v0_final, x0_final) -> dict:
    return {
        "steps": [
            {
                "full": {
                    "final": _rounded(full_final),
                    "layers": {str(j): _rounded(row) for j, row in layer_rows.items()},
                },
                "v0": {"final": _rounded(v0_final), "layers": {}},
                "x0": {"final": _rounded(x0_final), "layers": {}},
            }
        ]
    }


def _scripted_scenario(recipe: Recipe, script: dict) -> dict:
    zeros = [0.0, 0.0]
    return {
        "type": "synthetic",
        "seed": 0,
        "vocab_size": recipe.vocab_size,
        "num_layers": recipe.num_layers,
        "visual_embedding": zeros,
        "query_embedding": zeros,
        "template_embedding": zeros,
        "visual_noise_scale": 0.0,
        "script": script,
    }


def _biased_instance(recipe: Recipe, rng: np.random.Generator, index: int) -> dict:
    """Full branch narrowly prefers "yes"; the truth is "no".

    The x0 probe prefers "yes" even harder, exposing the margin as prior
    rather than grounding. Sampled layers alternate between the final
    distribution and its yes/no swap, which makes the step trigger.
    """
    margin_yes = 0.60 + 0.05 * rng.random()
    gap = 0.20 + 0.05 * rng.random()
    full_final = _logits_for(
        recipe.vocab_size, math.exp(-margin_yes), math.exp(-margin_yes - gap)
    )
    x0_yes = 0.30 + 0.05 * rng.random()
    x0_no = 1.40 + 0.10 * rng.random()
    x0_final = _logits_for(recipe.vocab_size, math.exp(-x0_yes), math.exp(-x0_no))
    layers = _default_layer_set(recipe.num_layers)
    layer_rows = {
        j: (full_final if i % 2 == 0 else _swap_yes_no(full_final))
        for i, j in enumerate(layers)
    }
    script = _script_entry(full_final, layer_rows, full_final, x0_final)
    return {
        "id": f"bias-{index:05d}",
        "question": "Is the queried object actually present?",
        "candidates": _yes_no_candidates(),
        "ground_truth": "no",
        "positive_label": "yes",
        "scenario": _scripted_scenario(recipe, script),
    }


def _truthful_instance(recipe: Recipe, rng: np.random.Generator, index: int) -> dict:
    """Clear "yes" with flat layer dynamics and probes equal to the full branch."""
    yes_p = 0.70 + 0.10 * rng.random()
    no_p = 0.08 + 0.04 * rng.random()
    full_final = _logits_for(recipe.vocab_size, yes_p, no_p)
    layers = _default_layer_set(recipe.num_layers)
    layer_rows = {j: full_final for j in layers}
    script = _script_entry(full_final, layer_rows, full_final, full_final)
    return {
        "id": f"truthful-{index:05d}",
        "question": "Is the queried object actually present?",
        "candidates": _yes_no_candidates(),
        "ground_truth": "yes",
        "positive_label": "yes",
        "scenario": _scripted_scenario(recipe, script),
    }


def generate(recipe: Recipe, out_path, seed: int | None = None) -> int:
    """Write the dataset as JSONL; returns the instance count."""
    rng = np.random.default_rng(recipe.seed if seed is None else seed)
    rows: list[dict] = []
    if recipe.family == "prior_bias":
        for i in range(int(recipe.counts["biased"])):
            rows.append(_biased_instance(recipe, rng, i))
        for i in range(int(recipe.counts["truthful"])):
            rows.append(_truthful_instance(recipe, rng, i))
    else:
        n = int(recipe.counts["instances"])
        for i in range(n):
            if recipe.family == "calm":
                angle = 0.0
            elif recipe.family == "oscillating":
                angle = math.pi
            else:
                angle = rng.random() * math.pi
            rows.append(_procedural_instance(recipe, rng, i, angle))
    with open(out_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    return len(rows)
