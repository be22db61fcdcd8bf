"""One run configuration document covering data, model, training and evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict

from gridmix.data import RansacConfig, ScenarioConfig
from gridmix.metrics import FIRST_STEP
from gridmix.network import ModelConfig, OptimizerConfig
from gridmix.staticmap import DEFAULT_EXTENT, MapConfig, make_grid


class ConfigError(ValueError):
    pass


@dataclass
class MetricSettings:
    k: int = 3
    first_step: int = FIRST_STEP
    literal_fde: bool = False


@dataclass
class NmsSettings:
    alpha: float = 2.0
    iou_threshold: float = 0.1


@dataclass
class PathSettings:
    dataset: str = "data"
    checkpoint: str = "checkpoint.npz"


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    nms: NmsSettings = field(default_factory=NmsSettings)
    paths: PathSettings = field(default_factory=PathSettings)
    extent: tuple = DEFAULT_EXTENT
    gamma: float = 0.0

    @property
    def map_config(self) -> MapConfig:
        """Raster geometry implied by the extent and the model's raster size."""
        x0, x1, y0, y1 = self.extent
        if abs((x1 - x0) - (y1 - y0)) > 1e-9:
            raise ConfigError(f"extent {self.extent} must be square")
        return MapConfig(tuple(self.extent), (x1 - x0) / self.model.raster_size)

    @property
    def grid(self):
        return make_grid(self.extent, self.model.grid_n)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, scenario=replace(self.scenario, seed=seed), model=replace(self.model, seed=seed))

    def validate(self) -> None:
        self.scenario.validate()
        self.model.validate()
        if self.metrics.k < 1 or self.metrics.first_step < 1:
            raise ConfigError("metrics.k and metrics.first_step must be >= 1")
        if not 0.0 <= self.nms.iou_threshold < 1.0 or self.nms.alpha <= 0:
            raise ConfigError("nms needs alpha > 0 and iou_threshold in [0, 1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.optimizer.learning_rate <= 0 or self.optimizer.batch_size < 1 or self.optimizer.epochs < 0:
            raise ConfigError("optimizer needs learning_rate > 0, batch_size >= 1, epochs >= 0")
        self.map_config.shape

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, doc: Dict[str, Any], where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a table, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    base = cls()
    kwargs = {}
    for name, value in doc.items():
        default = getattr(base, name)
        key = f"{where}.{name}" if where else name
        kwargs[name] = _build(type(default), value, key) if is_dataclass(default) else _coerce(value, default)
    return replace(base, **kwargs)


def from_dict(doc: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig; missing keys keep their defaults, unknown keys are an error."""
    return _build(RunConfig, doc, "")


def load_config(path) -> RunConfig:
    """Read a JSON document, or TOML where the interpreter ships tomllib."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            raise ConfigError(f"{p}: TOML configs need Python 3.11+, use JSON instead") from None
        doc = tomllib.loads(text)
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: line {e.lineno}: {e.msg}") from None
    return from_dict(doc)


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply `section.key=value` strings; values parse as JSON, falling back to plain strings."""
    doc = cfg.to_dict()
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[parts[-1]] = value
    return from_dict(doc)
