"""Run configuration: an INI file with strict key checking, plus the gateway
factory. Unknown sections or keys are errors; silently ignoring a typo like
`ef_serach` costs an afternoon."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .gateway import HttpGateway, LlmGateway, MockGateway

_WEIGHT_POLICIES = ("affinity", "distance")
_BACKENDS = ("weighted_leiden", "label_propagation")
_MODES = ("mock", "http")


@dataclass(frozen=True)
class RunConfig:
    # [run]
    seed: int = 0
    workers: int = 10
    # [corpus]
    corpus_path: str = ""
    chunk_size: int = 1200
    chunk_overlap: int = 100
    # [gateway]
    gateway_mode: str = "mock"
    endpoint: str = ""
    chat_model: str = ""
    embed_model: str = ""
    api_key_env: str = "STRATARAG_API_KEY"
    concurrency: int = 10
    token_budget: int = 0  # 0 means unlimited
    embed_dim: int = 64
    fixtures: str = ""
    retries: int = 3
    backoff_base: float = 1.0
    # [cluster]
    max_layers: int = 3
    min_nodes: int = 10
    knn_k: int = 0  # 0 means derive from average degree
    similarity_floor: float = 0.0
    weight_policy: str = "affinity"
    cluster_backend: str = "weighted_leiden"
    resolution: float = 1.0
    # [index]
    m: int = 32
    ef_construction: int = 100
    ef_search: int = 100
    # [query]
    k: int = 5
    query_token_budget: int = 8000
    response_format: str = "Multiple paragraphs of plain text."

    def validate(self) -> "RunConfig":
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("corpus.chunk_size must be >= 1")
        if not 0 <= self.chunk_overlap < self.chunk_size:
            raise ConfigError("corpus.overlap must satisfy 0 <= overlap < chunk_size")
        if self.gateway_mode not in _MODES:
            raise ConfigError(f"gateway.mode must be one of {_MODES}")
        if self.gateway_mode == "http" and not self.endpoint:
            raise ConfigError("gateway.endpoint is required in http mode")
        if self.concurrency < 1:
            raise ConfigError("gateway.concurrency must be >= 1")
        if self.token_budget < 0:
            raise ConfigError("gateway.token_budget must be >= 0")
        if self.embed_dim < 4:
            raise ConfigError("gateway.embed_dim must be >= 4")
        if self.retries < 0:
            raise ConfigError("gateway.retries must be >= 0")
        if self.backoff_base < 0.0:
            raise ConfigError("gateway.backoff_base must be >= 0")
        if self.max_layers < 1:
            raise ConfigError("cluster.max_layers must be >= 1")
        if self.min_nodes < 2:
            raise ConfigError("cluster.min_nodes must be >= 2")
        if self.knn_k < 0:
            raise ConfigError("cluster.knn_k must be >= 0")
        if not -1.0 <= self.similarity_floor <= 1.0:
            raise ConfigError("cluster.similarity_floor must lie in [-1, 1]")
        if self.weight_policy not in _WEIGHT_POLICIES:
            raise ConfigError(f"cluster.weight_policy must be one of {_WEIGHT_POLICIES}")
        if self.cluster_backend not in _BACKENDS:
            raise ConfigError(f"cluster.backend must be one of {_BACKENDS}")
        if self.resolution <= 0.0:
            raise ConfigError("cluster.resolution must be > 0")
        if self.m < 2:
            raise ConfigError("index.m must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ConfigError("index ef values must be >= 1")
        if self.k < 1:
            raise ConfigError("query.k must be >= 1")
        if self.query_token_budget < 1:
            raise ConfigError("query.token_budget must be >= 1")
        return self


# section -> {ini key: (attribute, converter)}
_SCHEMA: dict[str, dict[str, tuple[str, type]]] = {
    "run": {"seed": ("seed", int), "workers": ("workers", int)},
    "corpus": {
        "path": ("corpus_path", str),
        "chunk_size": ("chunk_size", int),
        "overlap": ("chunk_overlap", int),
    },
    "gateway": {
        "mode": ("gateway_mode", str),
        "endpoint": ("endpoint", str),
        "chat_model": ("chat_model", str),
        "embed_model": ("embed_model", str),
        "api_key_env": ("api_key_env", str),
        "concurrency": ("concurrency", int),
        "token_budget": ("token_budget", int),
        "embed_dim": ("embed_dim", int),
        "fixtures": ("fixtures", str),
        "retries": ("retries", int),
        "backoff_base": ("backoff_base", float),
    },
    "cluster": {
        "max_layers": ("max_layers", int),
        "min_nodes": ("min_nodes", int),
        "knn_k": ("knn_k", int),
        "similarity_floor": ("similarity_floor", float),
        "weight_policy": ("weight_policy", str),
        "backend": ("cluster_backend", str),
        "resolution": ("resolution", float),
    },
    "index": {
        "m": ("m", int),
        "ef_construction": ("ef_construction", int),
        "ef_search": ("ef_search", int),
    },
    "query": {
        "k": ("k", int),
        "token_budget": ("query_token_budget", int),
        "response_format": ("response_format", str),
    },
}


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults when path is None; otherwise parse and validate the INI."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    values: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            attr, conv = _SCHEMA[section][key]
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigError(
                    f"bad value for {section}.{key}: {raw!r} ({exc})"
                ) from exc
    return RunConfig(**values).validate()


def apply_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Override attributes with non-None values (CLI flags win over the file)."""
    known = {f.name for f in fields(RunConfig)}
    changes = {}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config attribute {key!r}")
        if value is not None:
            changes[key] = value
    if not changes:
        return config
    return replace(config, **changes).validate()


def make_gateway(config: RunConfig) -> LlmGateway:
    budget = config.token_budget or None
    if config.gateway_mode == "mock":
        if config.fixtures:
            return MockGateway.from_fixture_file(
                config.fixtures,
                seed=config.seed,
                embed_dim=config.embed_dim,
                concurrency=config.concurrency,
                token_budget=budget,
            )
        return MockGateway(
            seed=config.seed,
            embed_dim=config.embed_dim,
            concurrency=config.concurrency,
            token_budget=budget,
        )
    api_key = os.environ.get(config.api_key_env, "")
    return HttpGateway(
        endpoint=config.endpoint,
        chat_model=config.chat_model,
        embed_model=config.embed_model,
        api_key=api_key,
        concurrency=config.concurrency,
        token_budget=budget,
        retries=config.retries,
        backoff_base=config.backoff_base,
    )
