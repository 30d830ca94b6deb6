"""Pipeline configuration: file loading, environment overrides and the config hash."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from extraction import VotingConfig
from ingest import DEFAULT_STOPWORDS
from llm_gateway import ProviderConfig

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = "huntsmith_out"

# Per-stage sampling temperatures.
DEFAULT_TEMPERATURES: Dict[str, float] = {
    "vision": 1.0,
    "explicit": 0.0,
    "implicit": 0.9,
    "ttp": 0.5,
    "generator": 0.7,
    "optimizer": 0.5,
    "selector": 0.5,
    "remover": 0.5,
    "ioc": 0.5,
}


@dataclass(frozen=True)
class StageToggles:
    vision: bool = True
    api_extractor: bool = True  # explicit/implicit extraction and TTP mapping
    optimizer: bool = True


VARIANTS: Dict[StageToggles, str] = {
    StageToggles(): "full",
    StageToggles(vision=False): "no-vision",
    StageToggles(api_extractor=False): "no-api-extractor",
    StageToggles(optimizer=False): "no-optimizer",
}


@dataclass
class PipelineConfig:
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    voting: VotingConfig = field(default_factory=VotingConfig)
    toggles: StageToggles = field(default_factory=StageToggles)
    temperatures: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TEMPERATURES))
    stopwords: Tuple[str, ...] = DEFAULT_STOPWORDS
    content_selectors: Dict[str, str] = field(default_factory=dict)
    output_dir: str = DEFAULT_OUTPUT_DIR
    run_date: Optional[dt.date] = None
    seed: Optional[int] = None
    inline_remote_images: bool = False
    acceptance: Dict[str, Dict[str, float]] = field(default_factory=dict)
    database_url: Optional[str] = None
    record_history: bool = True

    def __post_init__(self):
        unknown = set(self.temperatures) - set(DEFAULT_TEMPERATURES)
        if unknown:
            raise ValueError(f"temperatures: unknown stage(s) {', '.join(sorted(unknown))}")
        self.temperatures = {**DEFAULT_TEMPERATURES, **{k: float(v) for k, v in self.temperatures.items()}}
        for stage, value in self.temperatures.items():
            if not 0 <= value <= 2:
                raise ValueError(f"temperatures.{stage} must be within [0, 2]: {value}")
        self.stopwords = tuple(self.stopwords)
        if isinstance(self.run_date, str):
            try:
                self.run_date = dt.date.fromisoformat(self.run_date)
            except ValueError as exc:
                raise ValueError(f"run_date is not an ISO date: {self.run_date!r}") from exc

    def variant_name(self) -> str:
        return VARIANTS.get(self.toggles, "custom")

    def to_dict(self) -> Dict[str, Any]:
        """Effective settings that shape the output (no output dir, no database)."""
        data = asdict(self)
        data.pop("output_dir")
        data.pop("database_url")
        data.pop("record_history")
        data["stopwords"] = list(self.stopwords)
        data["run_date"] = self.run_date.isoformat() if self.run_date else None
        return data

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(data: Mapping[str, Any], name: str, cls) -> Any:
    values = data.get(name) or {}
    if not isinstance(values, Mapping):
        raise ValueError(f"{name} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ValueError(f"{name}: unknown field(s) {', '.join(sorted(unknown))}")
    return cls(**values)


def config_from_dict(data: Mapping[str, Any]) -> PipelineConfig:
    allowed = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    kwargs = {key: value for key, value in data.items() if key not in ("provider", "voting", "toggles")}
    return PipelineConfig(
        provider=_section(data, "provider", ProviderConfig),
        voting=_section(data, "voting", VotingConfig),
        toggles=_section(data, "toggles", StageToggles),
        **kwargs,
    )


def apply_env_overrides(config: PipelineConfig, env: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    env = os.environ if env is None else env
    provider_updates: Dict[str, Any] = {}
    if env.get("HUNTSMITH_PROVIDER"):
        provider_updates["kind"] = env["HUNTSMITH_PROVIDER"]
    if env.get("HUNTSMITH_MODEL"):
        provider_updates["model_name"] = env["HUNTSMITH_MODEL"]
    if env.get("HUNTSMITH_ENDPOINT"):
        provider_updates["endpoint_url"] = env["HUNTSMITH_ENDPOINT"]
    if env.get("HUNTSMITH_MAX_CONCURRENCY"):
        try:
            provider_updates["max_concurrent_requests"] = int(env["HUNTSMITH_MAX_CONCURRENCY"])
        except ValueError as exc:
            raise ValueError(f"HUNTSMITH_MAX_CONCURRENCY must be an integer: {env['HUNTSMITH_MAX_CONCURRENCY']!r}") from exc
    updates: Dict[str, Any] = {}
    if provider_updates:
        updates["provider"] = replace(config.provider, **provider_updates)
        logger.info(f"Provider overrides from environment: {sorted(provider_updates)}")
    if env.get("HUNTSMITH_OUTPUT_DIR"):
        updates["output_dir"] = env["HUNTSMITH_OUTPUT_DIR"]
    if env.get("DATABASE_URL"):
        updates["database_url"] = env["DATABASE_URL"]
    return replace(config, **updates) if updates else config


def load_config(path: Optional[Union[str, Path]] = None, env: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """Defaults, then the YAML/JSON file, then environment overrides."""
    data: Mapping[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ValueError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ValueError(f"config {path} must be a mapping")
        logger.info(f"Loaded config from {path}")
    return apply_env_overrides(config_from_dict(data), env)
