"""Pipeline hyperparameters.

Every stage reads its own section, so stages can also be driven
independently. All sections validate on construction.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _require(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(name, message)


@dataclass(frozen=True)
class IngestParams:
    erosion_radius: int = 3
    max_range: float = 80.0
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 10

    def __post_init__(self):
        _require(self.erosion_radius >= 0, "ingest.erosion_radius", "must be >= 0")
        _require(self.max_range > 0, "ingest.max_range", "must be > 0")
        _require(self.dbscan_eps > 0, "ingest.dbscan_eps", "must be > 0")
        _require(self.dbscan_min_pts >= 1, "ingest.dbscan_min_pts", "must be >= 1")


@dataclass(frozen=True)
class RegisterParams:
    min_similarity: float = 0.8
    iterations: int = 100_000
    fitness_radius: float = 0.1
    fitness_threshold: float = 0.5
    max_points: int = 5000
    # early exit once this probability of an all-inlier sample is reached
    confidence: float = 0.999
    batch_size: int = 256

    def __post_init__(self):
        _require(-1.0 <= self.min_similarity <= 1.0, "register.min_similarity", "must be in [-1, 1]")
        _require(self.iterations >= 1, "register.iterations", "must be >= 1")
        _require(self.fitness_radius > 0, "register.fitness_radius", "must be > 0")
        _require(0.0 <= self.fitness_threshold <= 1.0, "register.fitness_threshold", "must be in [0, 1]")
        _require(self.max_points >= 3, "register.max_points", "must be >= 3")
        _require(0.0 < self.confidence <= 1.0, "register.confidence", "must be in (0, 1]")
        _require(self.batch_size >= 1, "register.batch_size", "must be >= 1")


@dataclass(frozen=True)
class SmoothParams:
    rotation_sigma: float = 0.1
    translation_sigma: float = 0.2
    huber_threshold: float = 1.0
    outlier_threshold: float = 1.345
    speed_walk: float = 0.5
    curvature_walk: float = 1e-5
    roll_pitch_sigma: float = 0.4
    curvature_sigma: float = 0.01
    first_pass_iters: int = 10
    max_iters: int = 10
    static_displacement: float = 1.0

    def __post_init__(self):
        for name in (
            "rotation_sigma",
            "translation_sigma",
            "huber_threshold",
            "outlier_threshold",
            "speed_walk",
            "curvature_walk",
            "roll_pitch_sigma",
            "curvature_sigma",
        ):
            _require(getattr(self, name) > 0, f"smooth.{name}", "must be > 0")
        _require(self.first_pass_iters >= 1, "smooth.first_pass_iters", "must be >= 1")
        _require(self.max_iters >= 1, "smooth.max_iters", "must be >= 1")
        _require(self.static_displacement >= 0, "smooth.static_displacement", "must be >= 0")


@dataclass(frozen=True)
class EvalParams:
    thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 3.0, 5.0, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        _require(len(self.thresholds) > 0, "eval.thresholds", "must not be empty")
        _require(all(t > 0 for t in self.thresholds), "eval.thresholds", "must all be > 0")


@dataclass(frozen=True)
class PipelineConfig:
    ingest: IngestParams = field(default_factory=IngestParams)
    register: RegisterParams = field(default_factory=RegisterParams)
    smooth: SmoothParams = field(default_factory=SmoothParams)
    eval: EvalParams = field(default_factory=EvalParams)
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: dict[str, str]) -> PipelineConfig:
        """Apply ``{"section.field": "value"}`` overrides, parsing values by field type."""
        sections = {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self) if f.name != "seed"}
        seed = self.seed
        for key, raw in overrides.items():
            if key == "seed":
                seed = _parse(int, key, raw)
                continue
            section, _, name = key.partition(".")
            if section not in sections or name not in sections[section]:
                raise ConfigError(key, "unknown configuration field")
            current = sections[section][name]
            sections[section][name] = _parse(type(current), key, raw)
        try:
            return PipelineConfig(
                ingest=IngestParams(**sections["ingest"]),
                register=RegisterParams(**sections["register"]),
                smooth=SmoothParams(**sections["smooth"]),
                eval=EvalParams(**sections["eval"]),
                seed=seed,
            )
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from exc


def _parse(kind: type, key: str, raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if kind is tuple:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from exc
    return raw
