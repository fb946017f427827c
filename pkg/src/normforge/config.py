"""Configuration file loading with NORMFORGE_* environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .corpus import ChunkingConfig
from .gateway import EndpointConfig
from .reward import ContrastiveConfig, RewardWeights
from .universe import RetrievalConfig

ENDPOINT_ROLES = ("extractor", "judge", "embedder")


class ConfigError(ValueError):
    pass


@dataclass
class ServiceSettings:
    host: str = "127.0.0.1"
    port: int = 8710
    diagnostics_window: int = 256


@dataclass
class AppConfig:
    manifest: Optional[Path] = None
    workdir: Path = Path("normforge_out")
    prompts_dir: Optional[Path] = None
    seed: int = 0
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    service: ServiceSettings = field(default_factory=ServiceSettings)
    audit_log: Optional[Path] = None

    # Conventional workdir layout.
    @property
    def chunks_dir(self) -> Path:
        return self.workdir / "chunks"

    @property
    def records_dir(self) -> Path:
        return self.workdir / "records"

    @property
    def universes_dir(self) -> Path:
        return self.workdir / "universes"

    @property
    def dataset_dir(self) -> Path:
        return self.workdir / "dataset"

    @property
    def reports_dir(self) -> Path:
        return self.workdir / "reports"

    def endpoint(self, role: str) -> EndpointConfig:
        if role not in self.endpoints:
            raise ConfigError(
                f"no endpoint configured for role '{role}' "
                f"(set endpoints.{role} in the config file or "
                f"NORMFORGE_{role.upper()}_BASE_URL / _MODEL)"
            )
        return self.endpoints[role]


def _endpoint_from_payload(role: str, payload: dict) -> EndpointConfig:
    prefix = f"NORMFORGE_{role.upper()}_"
    merged = dict(payload)
    env_map = {
        "BASE_URL": ("base_url", str),
        "MODEL": ("model_name", str),
        "API_KEY": ("api_key", str),
        "TIMEOUT": ("timeout", float),
        "MAX_RETRIES": ("max_retries", int),
        "TEMPERATURE": ("temperature", float),
    }
    for env_name, (key, cast) in env_map.items():
        value = os.environ.get(prefix + env_name)
        if value is not None:
            merged[key] = cast(value)
    if "base_url" not in merged or "model_name" not in merged:
        raise ConfigError(
            f"endpoint '{role}' needs base_url and model_name "
            f"(config file or {prefix}BASE_URL / {prefix}MODEL)"
        )
    return EndpointConfig(**merged)


def load_config(path: Optional[Path | str] = None) -> AppConfig:
    """Load a YAML/JSON config file and apply environment overrides.

    Every value is optional except that commands needing an endpoint will fail
    with a named role when it is not configured anywhere.
    """
    payload: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML/JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ConfigError("config file must contain a mapping")

    cfg = AppConfig()
    manifest = os.environ.get("NORMFORGE_MANIFEST") or payload.get("manifest")
    if manifest:
        cfg.manifest = Path(manifest)
    workdir = os.environ.get("NORMFORGE_WORKDIR") or payload.get("workdir")
    if workdir:
        cfg.workdir = Path(workdir)
    prompts_dir = os.environ.get("NORMFORGE_PROMPTS_DIR") or payload.get("prompts_dir")
    if prompts_dir:
        cfg.prompts_dir = Path(prompts_dir)
    seed = os.environ.get("NORMFORGE_SEED") or payload.get("seed")
    if seed is not None:
        cfg.seed = int(seed)

    if "chunking" in payload:
        cfg.chunking = ChunkingConfig(**payload["chunking"])
    if "retrieval" in payload:
        cfg.retrieval = RetrievalConfig(**payload["retrieval"])
    if "contrastive" in payload:
        section = dict(payload["contrastive"])
        if "lambda" in section:
            section["lam"] = section.pop("lambda")
        cfg.contrastive = ContrastiveConfig(**section)
    if "weights" in payload:
        cfg.weights = RewardWeights.from_mapping(payload["weights"])
    if "service" in payload:
        cfg.service = ServiceSettings(**payload["service"])

    for role in ENDPOINT_ROLES:
        section = payload.get("endpoints", {}).get(role, {})
        prefix = f"NORMFORGE_{role.upper()}_"
        if section or (prefix + "BASE_URL") in os.environ:
            cfg.endpoints[role] = _endpoint_from_payload(role, section)

    audit = os.environ.get("NORMFORGE_AUDIT_LOG") or payload.get("audit_log")
    if audit:
        cfg.audit_log = Path(audit)
    return cfg
