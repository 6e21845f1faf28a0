# =====================================================
# Run settings (config file, AIGVE_ environment overrides, CLI flags)
# and the run manifest written before any side effect
# =====================================================

# Loading modules
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Mapping, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from aspect_report import DEFAULT_BOUNDS, ScoreBounds

from frame_io import DEFAULT_DECODER_TEMPLATE
from frame_sampling import SamplerConfig
from model_gateway import EndpointConfig, template_checksums
from refinement_loop import Clock, RefineConfig, utc_timestamp

logger = logging.getLogger(__name__)

TOOL_VERSION = "1.0.0"
ENV_PREFIX = "AIGVE_"
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    pass


class EndpointSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    evaluator: EndpointConfig | None = None
    generator: EndpointConfig | None = None
    revisor: EndpointConfig | None = None
    validator: EndpointConfig | None = None
    judge: EndpointConfig | None = None


class BoundsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    low: float = DEFAULT_BOUNDS.low
    high: float = DEFAULT_BOUNDS.high

    @model_validator(mode="after")
    def _ordered(self):
        if not self.low < self.high:
            raise ValueError(f"low {self.low:g} must be below high {self.high:g}")
        return self

    def score_bounds(self) -> ScoreBounds:
        return ScoreBounds(self.low, self.high)


class RefineSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_iterations: int = Field(4, ge=1)
    stop_threshold: float = 4.0
    selection_threshold: float = 3.0
    inclusive_stop: bool = False


class RunSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sampler: SamplerConfig = SamplerConfig()
    endpoints: EndpointSection = EndpointSection()
    refine: RefineSection = RefineSection()
    bounds: BoundsSection = BoundsSection()
    seed: int = 0
    fixed_timestamp: str | None = None
    parallel: int = Field(1, ge=1)
    decoder: str = DEFAULT_DECODER_TEMPLATE

    def endpoint(self, role: str) -> EndpointConfig:
        config = getattr(self.endpoints, role)
        if config is None:
            raise ConfigError(f"endpoint '{role}' is not configured (endpoints.{role} in the config file)")
        return config

    def refine_config(self) -> RefineConfig:
        try:
            return RefineConfig(**self.refine.model_dump(), sampler=self.sampler, parallel=self.parallel,
                                decoder_template=self.decoder, bounds=self.score_bounds())
        except ValidationError as err:
            raise ConfigError(_describe(err)) from err

    def score_bounds(self) -> ScoreBounds:
        return self.bounds.score_bounds()

    def clock(self) -> Clock:
        if self.fixed_timestamp is not None:
            fixed = self.fixed_timestamp
            return lambda: fixed
        return utc_timestamp


def _describe(err: ValidationError) -> str:
    first = err.errors()[0]
    location = ".".join(str(part) for part in first["loc"])
    return f"invalid setting {location}: {first['msg']}"


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def environment_overrides(environ: Mapping[str, str]) -> dict:
    """AIGVE_SAMPLER__THETA=0.1 -> {"sampler": {"theta": "0.1"}}; values stay strings for pydantic to coerce."""
    nested: dict = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        path = [part.lower() for part in name[len(ENV_PREFIX):].split("__") if part]
        if not path:
            continue
        node = nested
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name} conflicts with another AIGVE_ variable")
        node[path[-1]] = value
    return nested


def _prune(values: Mapping[str, Any]) -> dict:
    pruned = {}
    for key, value in values.items():
        if isinstance(value, Mapping):
            value = _prune(value)
            if value:
                pruned[key] = value
        elif value is not None:
            pruned[key] = value
    return pruned


def load_settings(config_path: Path | str | None = None, environ: Mapping[str, str] | None = None,
                  overrides: Mapping[str, Any] | None = None) -> RunSettings:
    """
    Resolves the run settings.

    Inputs:
    config_path: optional JSON config file
    environ: environment (defaults to os.environ), AIGVE_<SECTION>__<KEY> variables apply
    overrides: nested values from command-line flags; None entries are ignored

    Precedence is flags > environment > file > defaults.
    """
    layers: dict = {}
    if config_path is not None:
        path = Path(config_path)
        try:
            layers = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as err:
            raise ConfigError(f"config file not found: {path}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON at line {err.lineno}: {err.msg}") from err
        if not isinstance(layers, dict):
            raise ConfigError(f"{path}: the config must be a JSON object")
    layers = deep_merge(layers, environment_overrides(os.environ if environ is None else environ))
    layers = deep_merge(layers, _prune(overrides or {}))
    try:
        return RunSettings.model_validate(layers)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from err


# ---------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------
class RunManifest(BaseModel):
    tool_version: str = TOOL_VERSION
    command: str
    config: dict
    template_checksums: dict[str, str]
    input_digest: str
    seed: int
    started_at: str
    finished_at: str | None = None

    def write(self, out_dir: Path | str) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def input_digest(paths: Sequence[Path | str]) -> str:
    """SHA-256 over the named inputs; directories contribute every file in sorted order."""
    digest = hashlib.sha256()
    for path in map(Path, paths):
        files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
        for file in files:
            digest.update(file.name.encode("utf-8"))
            if file.is_file():
                digest.update(file.read_bytes())
    return digest.hexdigest()


def start_manifest(command: str, settings: RunSettings, inputs: Sequence[Path | str], out_dir: Path | str,
                   extra: Mapping[str, Any] | None = None) -> RunManifest:
    config = settings.model_dump(mode="json")
    if extra:
        config["arguments"] = dict(extra)
    manifest = RunManifest(command=command, config=config, template_checksums=template_checksums(),
                           input_digest=input_digest(inputs), seed=settings.seed, started_at=settings.clock()())
    manifest.write(out_dir)
    logger.debug("Manifest written to %s", Path(out_dir) / MANIFEST_NAME)
    return manifest


def finish_manifest(manifest: RunManifest, settings: RunSettings, out_dir: Path | str) -> RunManifest:
    finished = manifest.model_copy(update={"finished_at": settings.clock()()})
    finished.write(out_dir)
    return finished
