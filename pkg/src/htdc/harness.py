"""Evaluation harness: runs, sweeps, reports and the cost model.

The harness decodes each dataset instance once, aggregates task metrics
(accuracy, F1) together with the cost model (trigger rate, mean forward
passes, flip rate) and emits report.json, report.md and per_instance.csv.
The mean forward-pass count is also re-derived from the trigger rate; the
two must agree exactly, a run-level invariant that is checked on every
run.

Reports are deterministic: the fingerprint hashes the full report except
wall-clock timing, so two runs over the same config, dataset and backend
produce identical fingerprints.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import GateMode
from .config import HarnessConfig
from .datasets import BackendResolver, TaskInstance, load_dataset, replay_state
from .calibration import decode_step
from .errors import ConfigurationError, DataError, EngineError, InvariantViolation

SWEEP_AXES = (
    "gate_mode_static_vs_dynamic",
    "sigma_noise",
    "layer_depth_k",
    "lambda",
    "epsilon",
    "w_min",
)

_COST_LAW_TOL = 1e-12


@dataclass(frozen=True)
class InstanceResult:
    id: str
    chosen: str
    truth: str
    triggered: bool
    flipped: bool
    forward_passes: int
    gate_weight: float
    hesitation_score: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def correct(self) -> bool:
        return self.ok and self.chosen == self.truth


@dataclass
class RunReport:
    config: dict
    dataset_path: str
    backend_spec: str | None
    results: list[InstanceResult]
    accuracy: float
    f1: float
    positive_label: str | None
    trigger_rate: float
    n_fwd: float
    flip_rate: float
    wall_ms_per_step_mean: float
    wall_ms_per_step_p95: float
    n_instances: int
    n_errors: int
    fingerprint: str = field(default="")

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "config": self.config,
            "dataset_path": self.dataset_path,
            "backend_spec": self.backend_spec,
            "metrics": {
                "accuracy": self.accuracy,
                "f1": self.f1,
                "positive_label": self.positive_label,
                "trigger_rate": self.trigger_rate,
                "n_fwd": self.n_fwd,
                "flip_rate": self.flip_rate,
                "n_instances": self.n_instances,
                "n_errors": self.n_errors,
            },
            "per_instance": [
                {
                    "id": r.id,
                    "chosen": r.chosen,
                    "truth": r.truth,
                    "triggered": r.triggered,
                    "flipped": r.flipped,
                    "forward_passes": r.forward_passes,
                    "w_t": r.gate_weight,
                    "hes": r.hesitation_score,
                    "error": r.error,
                }
                for r in self.results
            ],
        }
        if include_timing:
            out["timing"] = {
                "wall_ms_per_step_mean": self.wall_ms_per_step_mean,
                "wall_ms_per_step_p95": self.wall_ms_per_step_p95,
            }
        if self.fingerprint:
            out["fingerprint"] = self.fingerprint
        return out


def _canonical_bytes(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _fingerprint(report: RunReport) -> str:
    # Timing is excluded on purpose: it is the one nondeterministic field.
    return hashlib.sha256(_canonical_bytes(report.to_dict(include_timing=False))).hexdigest()


def _f1(results: list[InstanceResult], positive: str) -> float:
    tp = sum(1 for r in results if r.ok and r.chosen == positive and r.truth == positive)
    fp = sum(1 for r in results if r.ok and r.chosen == positive and r.truth != positive)
    fn = sum(1 for r in results if r.ok and r.chosen != positive and r.truth == positive)
    denom = 2 * tp + fp + fn
    return (2 * tp / denom) if denom else 0.0


def _resolve_positive_label(config: HarnessConfig, instances: list[TaskInstance]) -> str | None:
    if config.run.positive_label is not None:
        return config.run.positive_label
    first = instances[0]
    if first.positive_label is not None:
        return first.positive_label
    return first.candidates.labels[0]


def run_evaluation(
    config: HarnessConfig,
    dataset_path,
    backend_spec: str | None = None,
    out_dir=None,
) -> RunReport:
    """Decode every instance of a dataset and aggregate the report."""
    instances = load_dataset(dataset_path)
    resolver = BackendResolver(
        config, override=backend_spec, base_dir=os.path.dirname(str(dataset_path)) or None
    )
    positive = _resolve_positive_label(config, instances)

    results: list[InstanceResult] = []
    wall: list[float] = []
    for position, inst in enumerate(instances):
        try:
            backend, step_index = resolver.resolve(inst, position)
            engine_cfg = config.engine_config(backend)
            state = replay_state(inst.id, inst.question, step_index)
            started = time.perf_counter()
            step = decode_step(state, backend, inst.candidates, engine_cfg)
            wall.append(time.perf_counter() - started)
            results.append(
                InstanceResult(
                    id=inst.id,
                    chosen=step.chosen_label,
                    truth=inst.ground_truth,
                    triggered=step.triggered,
                    flipped=step.flipped,
                    forward_passes=step.forward_passes,
                    gate_weight=step.hesitation.gate_weight,
                    hesitation_score=step.hesitation.hes,
                )
            )
        except DataError as exc:
            results.append(
                InstanceResult(
                    id=inst.id,
                    chosen="",
                    truth=inst.ground_truth,
                    triggered=False,
                    flipped=False,
                    forward_passes=0,
                    gate_weight=0.0,
                    hesitation_score=0.0,
                    error=str(exc),
                )
            )

    ok = [r for r in results if r.ok]
    n_ok = len(ok)
    accuracy = (sum(1 for r in ok if r.correct) / n_ok) if n_ok else 0.0
    trigger_rate = (sum(1 for r in ok if r.triggered) / n_ok) if n_ok else 0.0
    flip_rate = (sum(1 for r in ok if r.flipped) / n_ok) if n_ok else 0.0
    n_fwd = (sum(r.forward_passes for r in ok) / n_ok) if n_ok else 0.0
    expected = 1.0 + 2.0 * trigger_rate
    if n_ok and abs(n_fwd - expected) > _COST_LAW_TOL:
        raise InvariantViolation(
            f"cost law violated: mean forward passes {n_fwd!r} but trigger rate "
            f"{trigger_rate!r} implies {expected!r}"
        )

    wall_ms = [1000.0 * w for w in wall]
    report = RunReport(
        config=config.to_dict(),
        dataset_path=str(dataset_path),
        backend_spec=backend_spec,
        results=results,
        accuracy=accuracy,
        f1=_f1(results, positive) if positive else 0.0,
        positive_label=positive,
        trigger_rate=trigger_rate,
        n_fwd=n_fwd,
        flip_rate=flip_rate,
        wall_ms_per_step_mean=float(np.mean(wall_ms)) if wall_ms else 0.0,
        wall_ms_per_step_p95=float(np.percentile(wall_ms, 95)) if wall_ms else 0.0,
        n_instances=len(results),
        n_errors=len(results) - n_ok,
    )
    report.fingerprint = _fingerprint(report)
    if out_dir is not None:
        write_artifacts(report, out_dir)
    return report


def _report_markdown(report: RunReport) -> str:
    lines = [
        "# Run report",
        "",
        f"Dataset: `{report.dataset_path}`",
        f"Backend override: `{report.backend_spec or '(per-instance scenarios)'}`",
        f"Fingerprint: `{report.fingerprint}`",
        "",
        "| metric | value |",
        "| --- | --- |",
        f"| instances | {report.n_instances} |",
        f"| errors | {report.n_errors} |",
        f"| accuracy | {report.accuracy:.4f} |",
        f"| f1 ({report.positive_label}) | {report.f1:.4f} |",
        f"| trigger rate | {report.trigger_rate:.4f} |",
        f"| n_fwd | {report.n_fwd:.4f} |",
        f"| flip rate | {report.flip_rate:.4f} |",
        f"| wall ms/step (mean) | {report.wall_ms_per_step_mean:.3f} |",
        f"| wall ms/step (p95) | {report.wall_ms_per_step_p95:.3f} |",
        "",
    ]
    return "\n".join(lines)


def write_artifacts(report: RunReport, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as fh:
        fh.write(_report_markdown(report))
    with open(os.path.join(out_dir, "per_instance.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "chosen", "truth", "triggered", "flipped", "forward_passes", "w_t", "hes"]
        )
        for r in report.results:
            writer.writerow(
                [
                    r.id,
                    r.chosen,
                    r.truth,
                    int(r.triggered),
                    int(r.flipped),
                    r.forward_passes,
                    f"{r.gate_weight:.17g}",
                    f"{r.hesitation_score:.17g}",
                ]
            )


def apply_sweep_axis(config: HarnessConfig, axis: str, value) -> HarnessConfig:
    """One sweep point: a config with a single knob moved."""
    if axis == "gate_mode_static_vs_dynamic":
        if value not in ("static", "dynamic"):
            raise ConfigurationError(
                f"gate_mode axis values must be 'static' or 'dynamic', got {value!r}"
            )
        mode = GateMode.STATIC if value == "static" else GateMode.HARD_THEN_SOFT
        return replace(config, calibration=replace(config.calibration, gate_mode=mode))
    if axis == "sigma_noise":
        return replace(config, backend=replace(config.backend, visual_noise_scale=float(value)))
    if axis == "layer_depth_k":
        return replace(
            config,
            hesitation=replace(
                config.hesitation, sampled_layers=None, layer_depth=int(value)
            ),
        )
    if axis == "lambda":
        return replace(
            config,
            calibration=replace(
                config.calibration,
                visual_coeff=float(value),
                semantic_coeff=float(value),
            ),
        )
    if axis == "epsilon":
        return replace(
            config, calibration=replace(config.calibration, hysteresis_margin=float(value))
        )
    if axis == "w_min":
        return replace(
            config, hesitation=replace(config.hesitation, min_gate_weight=float(value))
        )
    raise ConfigurationError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")


def run_sweep(
    config: HarnessConfig,
    dataset_path,
    axis: str,
    values,
    backend_spec: str | None = None,
    out_dir=None,
) -> list[tuple[object, RunReport]]:
    """One full run per axis value, everything else held fixed."""
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    points: list[tuple[object, RunReport]] = []
    for value in values:
        point_cfg = apply_sweep_axis(config, axis, value)
        point_dir = None
        if out_dir is not None:
            point_dir = os.path.join(out_dir, f"{axis}={value}")
        report = run_evaluation(point_cfg, dataset_path, backend_spec, point_dir)
        points.append((value, report))
    if out_dir is not None:
        _write_sweep_summary(axis, points, out_dir)
    return points


def _write_sweep_summary(axis, points, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    summary = {
        "axis": axis,
        "points": [
            {
                "value": value,
                "accuracy": rep.accuracy,
                "f1": rep.f1,
                "trigger_rate": rep.trigger_rate,
                "n_fwd": rep.n_fwd,
                "flip_rate": rep.flip_rate,
                "fingerprint": rep.fingerprint,
            }
            for value, rep in points
        ],
    }
    with open(os.path.join(out_dir, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    lines = [
        f"# Sweep over `{axis}`",
        "",
        "| value | accuracy | f1 | trigger rate | n_fwd | flip rate |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for value, rep in points:
        lines.append(
            f"| {value} | {rep.accuracy:.4f} | {rep.f1:.4f} | {rep.trigger_rate:.4f} "
            f"| {rep.n_fwd:.4f} | {rep.flip_rate:.4f} |"
        )
    lines.append("")
    with open(os.path.join(out_dir, "sweep.md"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
