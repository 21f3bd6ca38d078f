"""Scenario configuration: a JSON document with strict keys.

Paths inside a config file are resolved relative to that file. The cameras
and the scene may instead be given inline as generator specs, for example
``{"ring": {"n": 4}}`` or ``{"generator": "occlusion", "seed": 3}``.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from edgepose.errors import ConfigError

_DEFAULTS: dict[str, Any] = {
    "name": "scenario",
    "cameras": {"ring": {"n": 4}},
    "scene": {"generator": "walker", "duration_s": 10.0},
    "topology": None,
    "observation": {},
    "heatmap": {},
    "sensor": {},
    "fusion": {"alpha": 0.15, "beta": 0.75},
    "feedback": True,
    "latency": {"fixed_ms": 2.0, "jitter_ms": 1.0, "loss": 0.0},
    "transport": "loopback",
    "sync": {},
    "backend": {},
    "metrics": {},
    "seed": 0,
    "duration_s": None,
    "out": None,
}

_SECTION_KEYS = {
    "observation": {"blob_sigma", "peak_jitter_sigma", "confidence_range", "false_negative_rate",
                    "clock_offset_us", "clock_drift_ppm"},
    "heatmap": {"width", "height", "stride", "confidence_threshold", "contribution_ratio"},
    "sensor": {"staleness_ms", "min_iou", "feedback_amplitude", "feedback_cov_floor", "peak_from_unclamped"},
    "fusion": {"alpha", "beta"},
    "latency": {"fixed_ms", "jitter_ms", "loss"},
    "sync": {"window_ms", "max_wait_ms"},
    "backend": {"processing_ms", "epipolar_threshold_px", "track_gate_m", "track_expiry"},
    "metrics": {"jdr_threshold_px", "head_fallback_px"},
}

_GENERATORS = {"walker", "occlusion", "multi"}


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    cameras: Any = field(default_factory=lambda: copy.deepcopy(_DEFAULTS["cameras"]))
    scene: Any = field(default_factory=lambda: copy.deepcopy(_DEFAULTS["scene"]))
    topology: str | None = None
    observation: dict = field(default_factory=dict)
    heatmap: dict = field(default_factory=dict)
    sensor: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=lambda: {"alpha": 0.15, "beta": 0.75})
    feedback: bool = True
    latency: dict = field(default_factory=lambda: dict(_DEFAULTS["latency"]))
    transport: str = "loopback"
    sync: dict = field(default_factory=dict)
    backend: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    seed: int = 0
    duration_s: float | None = None
    out: str | None = None
    base_dir: Path = field(default_factory=Path.cwd, repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for section, keys in _SECTION_KEYS.items():
            value = getattr(self, section)
            if not isinstance(value, dict):
                raise ConfigError(f"{section} must be an object")
            unknown = set(value) - keys
            if unknown:
                raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
        a = self.fusion.get("alpha", 0.15)
        b = self.fusion.get("beta", 0.75)
        if not (a >= 0 and b >= 0 and a + b < 1):
            raise ConfigError(f"fusion gains need alpha, beta >= 0 and alpha + beta < 1 (got {a}, {b})")
        if self.transport not in ("loopback", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.duration_s is not None and not self.duration_s > 0:
            raise ConfigError("duration_s must be positive")
        if not isinstance(self.feedback, bool):
            raise ConfigError("feedback must be true or false")
        for key in ("cameras", "scene", "topology"):
            value = getattr(self, key)
            if isinstance(value, str):
                if not self.resolve(value).is_file():
                    raise ConfigError(f"{key} file not found: {value}")
        if isinstance(self.cameras, dict) and set(self.cameras) != {"ring"}:
            raise ConfigError("inline cameras must be {\"ring\": {...}}")
        if isinstance(self.scene, dict) and self.scene.get("generator") not in _GENERATORS:
            raise ConfigError(f"scene generator must be one of {sorted(_GENERATORS)}")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in _DEFAULTS}

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ScenarioConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(_DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: copy.deepcopy(v) for k, v in doc.items()}
        return cls(**kw, base_dir=Path(base_dir) if base_dir is not None else Path.cwd())

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from None
        return cls.from_dict(doc, path.parent)
