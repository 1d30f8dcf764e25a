"""Task datasets: JSONL parsing and per-instance backend resolution.

A dataset is one JSON object per line:

  {"id": "...", "question": "...",
   "candidates": {"agg": "log_sum_exp", "items": [{"label": "yes",
                  "token_ids": [3]}, ...]},
   "ground_truth": "yes",
   "positive_label": "yes",            # optional, used for F1
   "scenario": {"type": "synthetic", ...} | {"type": "trace",
                "path": "...", "step": 0}}

A run-level backend override ("synthetic:<scenario.json>" or
"trace:<path>") replaces per-instance scenarios: every instance then
decodes against that one backend, trace instances at their declared step
(or their position in the file when none is declared).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

from .backend import (
    Backend,
    DecodeState,
    SyntheticScenario,
    load_trace,
    make_synthetic,
)
from .candidates import CandidateSet, parse_candidate_set
from .config import HarnessConfig
from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class TaskInstance:
    id: str
    question: str
    candidates: CandidateSet
    ground_truth: str
    scenario: dict | None = None
    positive_label: str | None = None

    def __post_init__(self) -> None:
        if self.ground_truth not in self.candidates.labels:
            raise DataError(
                f"instance '{self.id}': ground truth '{self.ground_truth}' is not a "
                f"candidate label"
            )
        if self.positive_label is not None and self.positive_label not in self.candidates.labels:
            raise DataError(
                f"instance '{self.id}': positive label '{self.positive_label}' is not a "
                f"candidate label"
            )


def parse_instance(obj: Mapping, where: str) -> TaskInstance:
    if not isinstance(obj, Mapping):
        raise DataError(f"{where}: instance must be a JSON object")
    for key in ("id", "question", "candidates", "ground_truth"):
        if key not in obj:
            raise DataError(f"{where}: instance is missing field '{key}'")
    scenario = obj.get("scenario")
    if scenario is not None and not isinstance(scenario, Mapping):
        raise DataError(f"{where}: scenario must be an object")
    try:
        return TaskInstance(
            id=str(obj["id"]),
            question=str(obj["question"]),
            candidates=parse_candidate_set(obj["candidates"]),
            ground_truth=str(obj["ground_truth"]),
            scenario=dict(scenario) if scenario is not None else None,
            positive_label=(
                str(obj["positive_label"]) if obj.get("positive_label") is not None else None
            ),
        )
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def load_dataset(path) -> list[TaskInstance]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    instances: list[TaskInstance] = []
    seen_ids: set[str] = set()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{path}:{number}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: not valid JSON: {exc}") from None
        inst = parse_instance(obj, where)
        if inst.id in seen_ids:
            raise DataError(f"{where}: duplicate instance id '{inst.id}'")
        seen_ids.add(inst.id)
        instances.append(inst)
    if not instances:
        raise DataError(f"dataset {path} holds no instances")
    return instances


class BackendResolver:
    """Maps instances to backends, honoring a run-level override.

    Trace backends are cached by path; synthetic scenarios are built per
    instance (they are cheap and usually unique).
    """

    def __init__(self, config: HarnessConfig, override: str | None = None, base_dir=None):
        self._config = config
        self._base_dir = base_dir
        self._trace_cache: dict[str, Backend] = {}
        self._override_backend: Backend | None = None
        self._override_kind: str | None = None
        if override is not None:
            kind, _, arg = override.partition(":")
            if kind not in ("synthetic", "trace") or not arg:
                raise ConfigurationError(
                    f"backend override must look like 'synthetic:<scenario.json>' or "
                    f"'trace:<path>', got {override!r}"
                )
            self._override_kind = kind
            if kind == "trace":
                self._override_backend = self._trace(arg)
            else:
                try:
                    with open(arg, "r", encoding="utf-8") as fh:
                        obj = json.load(fh)
                except OSError as exc:
                    raise DataError(f"cannot read scenario {arg}: {exc}") from None
                except json.JSONDecodeError as exc:
                    raise DataError(f"scenario {arg} is not valid JSON: {exc}") from None
                self._override_backend = make_synthetic(self._scenario_from(obj))

    def _resolve_path(self, path: str) -> str:
        import os

        if self._base_dir is not None and not os.path.isabs(path):
            return os.path.join(self._base_dir, path)
        return path

    def _trace(self, path: str) -> Backend:
        resolved = self._resolve_path(path)
        if resolved not in self._trace_cache:
            self._trace_cache[resolved] = load_trace(resolved)
        return self._trace_cache[resolved]

    def _scenario_from(self, obj: Mapping) -> SyntheticScenario:
        scenario = SyntheticScenario.from_dict(obj)
        override = self._config.backend.visual_noise_scale
        if override is not None and scenario.script is None:
            scenario.visual_noise_scale = override
        return scenario

    def resolve(self, instance: TaskInstance, position: int) -> tuple[Backend, int]:
        """Return (backend, step_index) for one instance.

        ``position`` is the instance's 0-based place in the dataset, used
        as the replay step when a trace override is active and the
        instance does not declare one.
        """
        if self._override_backend is not None:
            if self._override_kind == "synthetic":
                return self._override_backend, 0
            if instance.scenario is None:
                return self._override_backend, position
            return self._override_backend, int(instance.scenario.get("step", position))
        scenario = instance.scenario
        if scenario is None:
            raise DataError(
                f"instance '{instance.id}' has no scenario and no backend override is active"
            )
        kind = scenario.get("type")
        if kind == "synthetic":
            return make_synthetic(self._scenario_from(scenario)), 0
        if kind == "trace":
            if "path" not in scenario:
                raise DataError(f"instance '{instance.id}': trace scenario needs a 'path'")
            return self._trace(str(scenario["path"])), int(scenario.get("step", 0))
        raise DataError(f"instance '{instance.id}': unknown scenario type {kind!r}")


def replay_state(instance_id: str, question: str, step: int) -> DecodeState:
    """A decode state for step ``step`` of a recorded or scripted sequence.

    Traces do not record the token history, so the prefix is a placeholder
    of the right length; backends that replay by step index ignore it.
    """
    return DecodeState(
        scenario_id=instance_id,
        query_text=question,
        prefix_tokens=tuple([0] * step),
        step_index=step,
    )
