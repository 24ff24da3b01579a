"""Configuration file (YAML or JSON) and construction of the runtime components.

Example::

    embedder:    {kind: test-ngram, dimension: 256}
    backends:    {mock: true}
    augmenter:   {kind: rule}
    retrieval:   {k: 4, filter: logistic, filter_weights_path: filter.json, threshold: 0.5}
    persistence: {memory_snapshot_path: memory.jsonl}
    server:      {listen_address: "127.0.0.1:8080"}

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .augmenter import AugmentationCache, Augmenter, load_templates
from .backends import EndpointSpec, HttpCompletionBackend, MockAlignedBackend, MockBaseBackend
from .embedding import HttpEmbedder, NgramEmbedder
from .errors import ConfigError, NotTrainedError
from .memory import Memory
from .retrieval import DEFAULT_K, DEFAULT_THRESHOLD, ExternalScorer, FilterModel, RelevanceFilter, TrainConfig, accept_all, reject_all
from .router import EditingSystem

FILTER_KINDS = ("logistic", "accept_all", "reject_all", "external")


@dataclass(frozen=True)
class EmbedderConfig:
    kind: str = "test-ngram"
    endpoint: str | None = None
    model: str | None = None
    dimension: int = 256


@dataclass(frozen=True)
class BackendsConfig:
    mock: bool = True
    base: EndpointSpec | None = None
    aligned: EndpointSpec | None = None


@dataclass(frozen=True)
class AugmenterConfig:
    kind: str = "rule"
    endpoint: EndpointSpec | None = None
    templates_dir: Path | None = None
    cache_path: Path | None = None


@dataclass(frozen=True)
class RetrievalConfig:
    k: int = DEFAULT_K
    filter: str = "logistic"
    filter_weights_path: Path | None = None
    threshold: float = DEFAULT_THRESHOLD
    scorer_url: str | None = None


@dataclass(frozen=True)
class PersistenceConfig:
    memory_snapshot_path: Path | None = None


@dataclass(frozen=True)
class ServerConfig:
    listen_address: str = "127.0.0.1:8080"

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        try:
            return host or "127.0.0.1", int(port)
        except ValueError as exc:
            raise ConfigError(f"bad listen_address {self.listen_address!r}") from exc


@dataclass(frozen=True)
class Config:
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    augmenter: AugmenterConfig = field(default_factory=AugmenterConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    persistence: PersistenceConfig = field(default_factory=PersistenceConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.retrieval.k < 1:
            raise ConfigError("retrieval.k must be >= 1")
        if not 0.0 < self.retrieval.threshold < 1.0:
            raise ConfigError("retrieval.threshold must lie in (0, 1)")
        if self.retrieval.filter not in FILTER_KINDS:
            raise ConfigError(f"retrieval.filter must be one of {FILTER_KINDS}")
        if self.retrieval.filter == "external" and not self.retrieval.scorer_url:
            raise ConfigError("retrieval.filter 'external' needs retrieval.scorer_url")
        if self.embedder.dimension <= 0:
            raise ConfigError("embedder.dimension must be positive")
        if self.embedder.kind not in ("test-ngram", "http"):
            raise ConfigError("embedder.kind must be 'test-ngram' or 'http'")
        if self.embedder.kind == "http" and not (self.embedder.endpoint and self.embedder.model):
            raise ConfigError("http embedder needs endpoint and model")
        if self.backends.mock:
            if self.backends.base or self.backends.aligned or self.augmenter.endpoint:
                raise ConfigError("backends.mock forbids real endpoints")
        elif not (self.backends.base and self.backends.aligned):
            raise ConfigError("non-mock mode needs backends.base and backends.aligned")
        if self.augmenter.kind not in ("rule", "llm"):
            raise ConfigError("augmenter.kind must be 'rule' or 'llm'")
        if self.augmenter.kind == "llm" and self.augmenter.endpoint is None:
            raise ConfigError("llm augmenter needs augmenter.endpoint")


def _build(cls, raw: Any, section: str, root: Path | None = None, paths: tuple[str, ...] = ()):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
    values = dict(raw)
    for key in paths:
        if values.get(key) is not None:
            p = Path(values[key])
            values[key] = p if p.is_absolute() or root is None else root / p
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad section {section!r}: {exc}") from exc


def _endpoint(raw: Any, section: str) -> EndpointSpec | None:
    if raw is None:
        return None
    spec = _build(EndpointSpec, raw, section)
    if not spec.base_url or not spec.model:
        raise ConfigError(f"{section} needs base_url and model")
    return spec


def config_from_dict(data: Mapping[str, Any] | None, root: Path | None = None) -> Config:
    data = dict(data or {})
    allowed = {f.name for f in fields(Config)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    backends = dict(data.get("backends") or {})
    base = _endpoint(backends.pop("base", None), "backends.base")
    aligned = _endpoint(backends.pop("aligned", None), "backends.aligned")
    backends_cfg = _build(BackendsConfig, backends, "backends")
    augmenter = dict(data.get("augmenter") or {})
    aug_endpoint = _endpoint(augmenter.pop("endpoint", None), "augmenter.endpoint")
    augmenter_cfg = _build(AugmenterConfig, augmenter, "augmenter", root, ("templates_dir", "cache_path"))
    try:
        return Config(
            embedder=_build(EmbedderConfig, data.get("embedder"), "embedder"),
            backends=BackendsConfig(backends_cfg.mock, base, aligned),
            augmenter=AugmenterConfig(augmenter_cfg.kind, aug_endpoint, augmenter_cfg.templates_dir, augmenter_cfg.cache_path),
            retrieval=_build(RetrievalConfig, data.get("retrieval"), "retrieval", root, ("filter_weights_path",)),
            persistence=_build(PersistenceConfig, data.get("persistence"), "persistence", root, ("memory_snapshot_path",)),
            server=_build(ServerConfig, data.get("server"), "server"),
            training=_build(TrainConfig, data.get("training"), "training"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML/JSON: {exc}") from exc
    return config_from_dict(data, root=path.parent)


# --- component construction ---------------------------------------------------


def build_embedder(config: Config):
    cfg = config.embedder
    if cfg.kind == "test-ngram":
        return NgramEmbedder(cfg.dimension)
    return HttpEmbedder(cfg.endpoint, cfg.model, cfg.dimension)


def build_backends(config: Config):
    if config.backends.mock:
        return MockBaseBackend(), MockAlignedBackend()
    return (
        HttpCompletionBackend("base", config.backends.base),
        HttpCompletionBackend("aligned", config.backends.aligned),
    )


def build_augmenter(config: Config) -> Augmenter:
    cfg = config.augmenter
    if cfg.kind == "rule":
        return Augmenter()
    cache = None
    if cfg.cache_path is not None:
        cache = AugmentationCache.load(cfg.cache_path) if cfg.cache_path.exists() else AugmentationCache()
    templates = load_templates(cfg.templates_dir) if cfg.templates_dir else None
    return Augmenter(HttpCompletionBackend("augmenter", cfg.endpoint), templates, cache)


def build_filter(config: Config, dimension: int) -> RelevanceFilter:
    cfg = config.retrieval
    if cfg.filter == "accept_all":
        return accept_all()
    if cfg.filter == "reject_all":
        return reject_all()
    if cfg.filter == "external":
        return ExternalScorer(cfg.scorer_url, cfg.threshold)
    if cfg.filter_weights_path is None or not cfg.filter_weights_path.exists():
        raise NotTrainedError("no trained filter: set retrieval.filter_weights_path (see `train-filter`)")
    model = FilterModel.load(cfg.filter_weights_path)
    if model.dimension != dimension:
        raise NotTrainedError(f"filter was trained for dimension {model.dimension}, embedder has {dimension}")
    return model.with_threshold(cfg.threshold)


class UntrainedFilter:
    """Placeholder that fails only when a score is actually needed."""

    threshold = DEFAULT_THRESHOLD

    def __init__(self, reason: str) -> None:
        self.reason = reason

    def score(self, query, query_embedding, entry) -> float:
        raise NotTrainedError(self.reason)


def load_memory(config: Config, embedder) -> Memory:
    path = config.persistence.memory_snapshot_path
    if path is not None and path.exists():
        return Memory.load(path, embedder)
    return Memory.for_embedder(embedder)


def build_system(config: Config, memory: Memory | None = None, strict_filter: bool = True) -> EditingSystem:
    embedder = build_embedder(config)
    try:
        filter_model = build_filter(config, embedder.dimension)
    except NotTrainedError as exc:
        if strict_filter:
            raise
        filter_model = UntrainedFilter(exc.message)
    base, aligned = build_backends(config)
    return EditingSystem(
        embedder=embedder,
        filter_model=filter_model,
        base=base,
        aligned=aligned,
        augmenter=build_augmenter(config),
        k=config.retrieval.k,
        memory=memory if memory is not None else load_memory(config, embedder),
    )
