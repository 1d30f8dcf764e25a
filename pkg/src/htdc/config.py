"""Harness-level configuration: JSON loading, defaults, backend resolution.

The stored config mirrors the engine's knobs but allows the sampled-layer
set to stay unresolved; it is derived per backend right before decoding.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Mapping

from .backend import Backend
from .calibration import CalibrationParams, EngineConfig, GateMode, HysteresisMode
from .errors import ConfigurationError, DataError
from .hesitation import HesitationConfig


@dataclass(frozen=True)
class BackendSettings:
    """Run-wide backend overrides; None defers to each scenario."""

    visual_noise_scale: float | None = None

    def __post_init__(self) -> None:
        if self.visual_noise_scale is not None and self.visual_noise_scale < 0:
            raise ConfigurationError(
                f"visual_noise_scale must be >= 0, got {self.visual_noise_scale}"
            )


@dataclass(frozen=True)
class RunSettings:
    seed: int | None = None
    positive_label: str | None = None


@dataclass(frozen=True)
class HarnessConfig:
    hesitation: HesitationConfig = HesitationConfig()
    calibration: CalibrationParams = CalibrationParams()
    backend: BackendSettings = BackendSettings()
    run: RunSettings = RunSettings()

    def to_dict(self) -> dict:
        out = {
            "hesitation": asdict(self.hesitation),
            "calibration": {
                "visual_coeff": self.calibration.visual_coeff,
                "semantic_coeff": self.calibration.semantic_coeff,
                "plausibility_top_k": self.calibration.plausibility_top_k,
                "hysteresis_margin": self.calibration.hysteresis_margin,
                "gate_mode": self.calibration.gate_mode.value,
                "hysteresis_mode": self.calibration.hysteresis_mode.value,
            },
            "backend": asdict(self.backend),
            "run": asdict(self.run),
        }
        hes = out["hesitation"]
        if hes["sampled_layers"] is not None:
            hes["sampled_layers"] = list(hes["sampled_layers"])
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "HarnessConfig":
        if not isinstance(obj, Mapping):
            raise ConfigurationError("config must be a JSON object")
        known = {"hesitation", "calibration", "backend", "run"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")

        def section(name: str) -> dict:
            part = obj.get(name, {})
            if not isinstance(part, Mapping):
                raise ConfigurationError(f"config section '{name}' must be an object")
            return dict(part)

        hes = section("hesitation")
        if hes.get("sampled_layers") is not None:
            hes["sampled_layers"] = tuple(hes["sampled_layers"])
        try:
            return cls(
                hesitation=HesitationConfig(**hes),
                calibration=CalibrationParams(**section("calibration")),
                backend=BackendSettings(**section("backend")),
                run=RunSettings(**section("run")),
            )
        except TypeError as exc:
            raise ConfigurationError(f"bad config field: {exc}") from None

    @classmethod
    def from_json_file(cls, path) -> "HarnessConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_axis(self, **kwargs) -> "HarnessConfig":
        return replace(self, **kwargs)

    def resolve_layers(self, backend: Backend) -> tuple[int, ...]:
        """Pick the concrete sampled-layer set for one backend."""
        hcfg = self.hesitation
        if hcfg.sampled_layers is not None:
            universe = set(backend.layer_universe())
            missing = [j for j in hcfg.sampled_layers if j not in universe]
            if missing:
                raise DataError(
                    f"configured sampled_layers {list(hcfg.sampled_layers)} include "
                    f"layer(s) {missing} the backend does not expose"
                )
            return hcfg.sampled_layers
        if hcfg.layer_depth is not None:
            universe = sorted(backend.layer_universe())
            if hcfg.layer_depth > len(universe):
                raise ConfigurationError(
                    f"layer_depth {hcfg.layer_depth} exceeds the backend's "
                    f"{len(universe)} available layers"
                )
            picked = universe[::-1][:: 2][: hcfg.layer_depth]
            if len(picked) < hcfg.layer_depth:
                # Not enough headroom at stride 2; fall back to the densest
                # suffix of the requested depth.
                picked = universe[-hcfg.layer_depth :]
                return tuple(picked)
            return tuple(sorted(picked))
        return backend.default_sampled_layers()

    def engine_config(self, backend: Backend) -> EngineConfig:
        layers = self.resolve_layers(backend)
        return EngineConfig(
            hesitation=self.hesitation.resolved(layers),
            calibration=self.calibration,
        )


def default_config() -> HarnessConfig:
    return HarnessConfig()


__all__ = [
    "BackendSettings",
    "RunSettings",
    "HarnessConfig",
    "default_config",
    "EngineConfig",
    "GateMode",
    "HysteresisMode",
]
