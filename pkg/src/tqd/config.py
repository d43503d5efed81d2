"""Run configuration: flat ``section.key = value`` text files.

Every key has a default, unknown keys are rejected, and values are typed by
their default.  ``#`` starts a comment.  Example::

    tracker.paradigm = ADA
    denoising.mode = temporal
    denoising.lambda_center = 1.0
    eval.seeds = 0,1
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .denoising import DenoisingConfigError, DenoisingGroupSpec
from .sim import ScenarioConfig
from .tracker import TrackerConfig, TrackerConfigError
from .training import DenoisingSettings, LossWeights, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted key."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key


DEFAULTS: dict[str, Any] = {
    "scenario.arena": 50.0,
    "scenario.n_objects_init": 8,
    "scenario.birth_rate": 0.16,
    "scenario.death_prob": 0.02,
    "scenario.dt": 0.5,
    "scenario.n_frames": 40,
    "scenario.accel_noise": 0.5,
    "scenario.obs_pos_noise": 0.3,
    "scenario.miss_prob": 0.1,
    "scenario.clutter_rate": 2.0,
    "scenario.max_speed": 8.0,
    "tracker.paradigm": "ADA",
    "tracker.decoder_layers": 2,
    "tracker.feature_dim": 32,
    "tracker.n_det_queries": 32,
    "tracker.tau_birth": 0.6,
    "tracker.tau_out": 0.4,
    "tracker.max_miss": 3,
    "tracker.assoc_gate": 0.5,
    "tracker.birth_nms": 1.0,
    "tracker.n_freq": 6,
    "denoising.mode": "temporal",
    "denoising.strategy": "hybrid",
    "denoising.n_groups": 5,
    "denoising.lambda_center": 1.0,
    "denoising.sigma_velo": 4.0,
    "denoising.sigma_query": 0.1,
    "denoising.alpha_fp": 0.1,
    "denoising.alpha_drop": 0.0,
    "denoising.query_init": "track",
    "denoising.dn_assoc_loss": True,
    "training.steps": 2000,
    "training.snippet_length": 3,
    "training.seed": 0,
    "training.data_seed": 0,
    "training.n_train_scenes": 64,
    "training.lambda_dn": 1.0,
    "training.w_box": 1.0,
    "training.w_cls": 1.0,
    "training.w_assoc": 1.0,
    "training.lr": 1e-3,
    "training.adopt_gate": 2.0,
    "eval.threshold": 2.0,
    "eval.seeds": (0,),
    "eval.n_eval_scenes": 16,
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(key: str, text: str) -> Any:
    if key not in DEFAULTS:
        raise ConfigError(key, "unknown key")
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            vals = tuple(int(v) for v in text.split(",") if v.strip())
            if not vals:
                raise ValueError("expected at least one integer")
            return vals
        return text
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_assignments(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = parse_value(key, value)
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self) -> None:
        self.validate()

    # construction

    @classmethod
    def from_overrides(cls, overrides: dict[str, Any]) -> "RunConfig":
        values = dict(DEFAULTS)
        for k, v in overrides.items():
            if k not in DEFAULTS:
                raise ConfigError(k, "unknown key")
            values[k] = parse_value(k, v) if isinstance(v, str) else v
        return cls(values)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls.from_overrides(parse_assignments(text, source))

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), str(path))

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        merged = dict(self.values)
        for k, v in overrides.items():
            if k not in DEFAULTS:
                raise ConfigError(k, "unknown key")
            merged[k] = parse_value(k, v) if isinstance(v, str) else v
        return RunConfig(merged)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    # typed views

    def _section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def scenario(self) -> ScenarioConfig:
        return ScenarioConfig(**self._section("scenario"))

    def tracker(self) -> TrackerConfig:
        t = self._section("tracker")
        return TrackerConfig(arena=self["scenario.arena"], dt=self["scenario.dt"], **t)

    @property
    def denoising_mode(self) -> str:
        """Effective mode: zero groups means denoising is off."""
        return "off" if self["denoising.n_groups"] == 0 else self["denoising.mode"]

    def denoising(self) -> DenoisingSettings:
        v = self._section("denoising")
        base = DenoisingGroupSpec(v["lambda_center"], v["sigma_velo"], v["sigma_query"], v["alpha_fp"],
                                  v["alpha_drop"], "temporal")
        mode = self.denoising_mode
        return DenoisingSettings(mode, v["strategy"], max(1, v["n_groups"]) if mode == "off" else v["n_groups"],
                                 base, v["query_init"], v["dn_assoc_loss"])

    def training(self) -> TrainConfig:
        t = self._section("training")
        weights = LossWeights(t["lambda_dn"], t["w_box"], t["w_cls"], t["w_assoc"])
        return TrainConfig(t["steps"], t["snippet_length"], t["seed"], t["lr"], weights, self.denoising(),
                           t["adopt_gate"])

    def validate(self) -> None:
        for key in self.values:
            if key not in DEFAULTS:
                raise ConfigError(key, "unknown key")
        checks = (("scenario", self.scenario), ("tracker", self.tracker),
                  ("denoising", self.denoising), ("training", self.training))
        for section, build in checks:
            try:
                build()
            except (ValueError, TypeError, DenoisingConfigError, TrackerConfigError) as exc:
                raise ConfigError(_guess_key(section, str(exc)), str(exc)) from None
        if self["denoising.mode"] not in ("static", "temporal", "off"):
            raise ConfigError("denoising.mode", f"unknown mode {self['denoising.mode']!r}")
        if self["denoising.n_groups"] < 0:
            raise ConfigError("denoising.n_groups", "must be >= 0")
        if self["eval.threshold"] <= 0:
            raise ConfigError("eval.threshold", "must be positive")
        for key in ("training.n_train_scenes", "eval.n_eval_scenes"):
            if self[key] < 1:
                raise ConfigError(key, "must be >= 1")
        if any(s < 0 for s in self["eval.seeds"]):
            raise ConfigError("eval.seeds", "seeds must be >= 0")
        if self["training.seed"] < 0 or self["training.data_seed"] < 0:
            raise ConfigError("training.seed", "seeds must be >= 0")

    # identity

    def effective(self) -> dict[str, Any]:
        """Values with settings that cannot matter reset to their defaults.

        With denoising off, every other denoising key and the denoising loss
        weight are irrelevant; two configs that differ only there run the
        same experiment.
        """
        v = dict(self.values)
        if self.denoising_mode == "off":
            for k in DEFAULTS:
                if k.startswith("denoising."):
                    v[k] = DEFAULTS[k]
            v["denoising.mode"] = "off"
            v["denoising.n_groups"] = 0
            v["training.lambda_dn"] = DEFAULTS["training.lambda_dn"]
        return v

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.values.items()))

    def content_hash(self) -> str:
        text = "".join(f"{k}={format_value(v)}\n" for k, v in sorted(self.effective().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _guess_key(section: str, message: str) -> str:
    for key in DEFAULTS:
        if key.startswith(section + ".") and key.split(".", 1)[1] in message:
            return key
    if section == "denoising" and ("grouping" in message or "group" in message):
        return "denoising.n_groups"
    return section
