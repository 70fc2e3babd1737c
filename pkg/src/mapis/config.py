"""Engine configuration: one versioned JSON document, validated at startup."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from . import _canonical
from .errors import ConfigError, MapisError
from .rules import ThresholdConfig, load_threshold_config
from .workflow import UncertainPolicy

ENGINE_FORMAT = "mapis.engine/1"
BACKEND_KINDS = ("rule", "remote", "replay", "record")


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "rule"
    cassette: str | None = None
    model: str | None = None
    api_base: str | None = None
    timeout: float = 120.0
    max_retries: int = 2
    max_in_flight: int = 4

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cassette": self.cassette, "model": self.model, "api_base": self.api_base,
                "timeout": self.timeout, "max_retries": self.max_retries, "max_in_flight": self.max_in_flight}


@dataclass(frozen=True)
class EngineConfig:
    """Everything a CLI run or the service needs besides the patient data.

    Relative paths resolve against ``base_dir`` (the config file's folder).
    API keys are never stored here; they come from the environment.
    """

    thresholds: str | None = None
    kg: str | None = None
    backend: BackendSettings = field(default_factory=BackendSettings)
    policy: UncertainPolicy = UncertainPolicy.DEFAULT
    k: int = 5
    min_score: float = 0.0
    parallelism: int = 1
    host: str = "127.0.0.1"
    port: int = 8080
    store: str = "sessions"
    base_dir: str = "."

    def __post_init__(self):
        problems = []
        try:
            object.__setattr__(self, "policy", UncertainPolicy(self.policy))
        except ValueError:
            problems.append(f"policy must be one of {', '.join(p.value for p in UncertainPolicy)}")
        if self.backend.kind not in BACKEND_KINDS:
            problems.append(f"backend.kind must be one of {', '.join(BACKEND_KINDS)}")
        if self.backend.kind in ("replay", "record") and not self.backend.cassette:
            problems.append(f"backend.kind {self.backend.kind!r} needs backend.cassette")
        if not isinstance(self.k, int) or self.k < 1:
            problems.append("retrieval.k must be a positive integer")
        if not -1.0 <= self.min_score <= 1.0:
            problems.append("retrieval.min_score must lie in [-1, 1]")
        if not isinstance(self.parallelism, int) or self.parallelism < 1:
            problems.append("parallelism must be a positive integer")
        if not isinstance(self.port, int) or not 0 <= self.port <= 65535:
            problems.append("service.port must be 0..65535")
        if problems:
            raise ConfigError("; ".join(problems))

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    # -- (de)serialization ------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": ENGINE_FORMAT,
            "thresholds": self.thresholds,
            "kg": self.kg,
            "backend": self.backend.to_dict(),
            "policy": self.policy.value,
            "retrieval": {"k": self.k, "min_score": self.min_score},
            "parallelism": self.parallelism,
            "service": {"host": self.host, "port": self.port, "store": self.store},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | Path = ".") -> "EngineConfig":
        if not isinstance(data, Mapping) or data.get("format") != ENGINE_FORMAT:
            raise ConfigError(f"engine config format must be {ENGINE_FORMAT!r}")
        known = {"format", "thresholds", "kg", "backend", "policy", "retrieval", "parallelism", "service"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"engine config has unknown keys: {', '.join(unknown)}")
        try:
            backend = BackendSettings(**dict(data.get("backend") or {}))
            retrieval = dict(data.get("retrieval") or {})
            service = dict(data.get("service") or {})
            return cls(
                thresholds=data.get("thresholds"), kg=data.get("kg"), backend=backend,
                policy=data.get("policy", "default"),
                k=retrieval.pop("k", 5), min_score=float(retrieval.pop("min_score", 0.0)),
                parallelism=data.get("parallelism", 1),
                host=service.pop("host", "127.0.0.1"), port=service.pop("port", 8080),
                store=service.pop("store", "sessions"), base_dir=str(base_dir),
                **_leftovers(retrieval, "retrieval"), **_leftovers(service, "service"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid engine config: {exc}") from None

    @classmethod
    def load(cls, path) -> "EngineConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read engine config {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(data, path.parent)

    def config_hash(self, thresholds: ThresholdConfig | None = None) -> str:
        """Hash of the settings plus the threshold values actually in force."""
        thresholds = thresholds or self.load_thresholds()
        return _canonical.content_hash({"engine": self.to_dict(), "thresholds": thresholds.to_dict()})

    # -- loading referenced artifacts -------------------------------------

    def load_thresholds(self) -> ThresholdConfig:
        path = self.resolve(self.thresholds)
        return ThresholdConfig() if path is None else load_threshold_config(path)

    def load_kg(self):
        from .kg import KnowledgeGraph

        path = self.resolve(self.kg)
        if path is None:
            return None
        if not path.is_file():
            raise ConfigError(f"knowledge graph {path} does not exist")
        try:
            return KnowledgeGraph.load(path)
        except (ValueError, KeyError, TypeError, MapisError) as exc:
            raise ConfigError(f"knowledge graph {path} is invalid: {exc}") from None

    def build_backend(self, transport=None):
        from .agents import RecordingBackend, ReplayBackend, RuleOracleBackend
        from .agents.remote import RemoteBackend

        b = self.backend
        if b.kind == "rule":
            return RuleOracleBackend()
        if b.kind == "replay":
            return ReplayBackend(self.resolve(b.cassette))
        remote = RemoteBackend(b.model, b.api_base, timeout=b.timeout, max_retries=b.max_retries,
                               max_in_flight=b.max_in_flight, transport=transport)
        if b.kind == "record":
            return RecordingBackend(remote, self.resolve(b.cassette))
        return remote

    def validate(self) -> "LoadedEngine":
        """Load every referenced file now so a bad config fails before any work starts."""
        thresholds = self.load_thresholds()
        kg = self.load_kg()
        backend = self.build_backend()
        return LoadedEngine(self, thresholds, kg, backend, self.config_hash(thresholds))


def _leftovers(extra: dict, section: str) -> dict:
    if extra:
        raise ConfigError(f"unknown {section} keys: {', '.join(sorted(extra))}")
    return {}


@dataclass
class LoadedEngine:
    config: EngineConfig
    thresholds: ThresholdConfig
    kg: Any
    backend: Any
    config_hash: str

    def embedder(self):
        from .workflow import _default_embedder

        return _default_embedder(self.kg)


__all__ = ["BACKEND_KINDS", "ENGINE_FORMAT", "BackendSettings", "EngineConfig", "LoadedEngine"]
