"""Run configuration: one YAML file, secrets only from the environment.

Relative paths are resolved against the directory holding the config file.
See README.md for the full schema.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .causal import DEFAULT_DELTA, DEFAULT_MAX_DEPTH, DEFAULT_PATH_LIMIT, DEFAULT_TOP_N
from .composer import DEFAULT_BUDGET, QueryConfig
from .embedder import HashingEncoder, RemoteEncoder
from .gateway import API_KEY_ENV, BackendHandle, Gateway, HttpBackend, ScriptedBackend
from .graph import StageLabel, make_stages
from .prompts_tree import DEFAULT_M


class ConfigError(ValueError):
    pass


@dataclass
class RoleConfig:
    backend: str
    model: str
    temperature: float = 0.0
    max_output_tokens: int = 512


@dataclass
class RunConfig:
    base_dir: Path
    stages: list[StageLabel]
    backends: dict[str, dict]
    roles: dict[str, RoleConfig]
    agents: dict[str, RoleConfig]
    encoder: dict = field(default_factory=lambda: {"kind": "hashing", "dim": 256})
    delta: float = DEFAULT_DELTA
    top_n: int = DEFAULT_TOP_N
    max_depth: int = DEFAULT_MAX_DEPTH
    path_limit: int | None = DEFAULT_PATH_LIMIT
    keyword_mode: str = "heuristic"
    m: int = DEFAULT_M
    budget: int = DEFAULT_BUDGET
    max_rounds: int = 5
    tacit: bool = True
    lenient: bool = False
    workers: int = 1
    token_ceiling: int | None = None
    rates: dict[str, tuple[float, float]] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)

    def path(self, key: str) -> Path:
        try:
            return self.paths[key]
        except KeyError:
            raise ConfigError(f"paths.{key} is not set") from None

    def query_config(self, skip_stages=()) -> QueryConfig:
        unknown = sorted(set(skip_stages) - {s.id for s in self.stages})
        if unknown:
            raise ConfigError(f"unknown stage(s) in --skip-stages: {', '.join(unknown)}")
        return QueryConfig(
            delta=self.delta, top_n=self.top_n, max_depth=self.max_depth, path_limit=self.path_limit,
            budget=self.budget, keyword_mode=self.keyword_mode, skip_stages=tuple(skip_stages),
        )


def _role(name: str, raw: Any) -> RoleConfig:
    if not isinstance(raw, Mapping) or "backend" not in raw or "model" not in raw:
        raise ConfigError(f"role {name!r} needs 'backend' and 'model'")
    try:
        role = RoleConfig(
            backend=str(raw["backend"]),
            model=str(raw["model"]),
            temperature=float(raw.get("temperature", 0.0)),
            max_output_tokens=int(raw.get("max_output_tokens", 512)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"role {name!r}: {exc}") from None
    if not 0.0 <= role.temperature <= 1.0:
        raise ConfigError(f"role {name!r}: temperature must be in [0, 1]")
    if role.max_output_tokens < 1:
        raise ConfigError(f"role {name!r}: max_output_tokens must be >= 1")
    return role


def _section(raw: Mapping, key: str) -> Mapping:
    value = raw.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"'{key}' must be a mapping")
    return value


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    base = path.resolve().parent

    stage_ids = raw.get("stages")
    if not isinstance(stage_ids, list) or not stage_ids:
        raise ConfigError("'stages' must be a non-empty list of stage ids")
    try:
        stages = make_stages([str(s) for s in stage_ids])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    backends = {str(k): dict(v) for k, v in _section(raw, "backends").items()}
    for name, spec in backends.items():
        if spec.get("kind") not in ("scripted", "http"):
            raise ConfigError(f"backend {name!r}: kind must be 'scripted' or 'http'")
        if spec["kind"] == "scripted" and "script" not in spec:
            raise ConfigError(f"backend {name!r}: scripted backend needs 'script'")
        if spec["kind"] == "http" and "base_url" not in spec:
            raise ConfigError(f"backend {name!r}: http backend needs 'base_url'")
        if any(k in spec for k in ("api_key", "token", "secret")):
            raise ConfigError(f"backend {name!r}: credentials belong in ${API_KEY_ENV}, not the config")

    roles_raw = dict(_section(raw, "roles"))
    agents_raw = roles_raw.pop("agents", None) or {}
    roles = {name: _role(name, spec) for name, spec in roles_raw.items()}
    agents = {str(sid): _role(f"agents.{sid}", spec) for sid, spec in agents_raw.items()}
    missing = [s.id for s in stages if s.id not in agents]
    if missing:
        raise ConfigError(f"no agent entry for stage(s): {', '.join(missing)}")
    extra = sorted(set(agents) - {s.id for s in stages})
    if extra:
        raise ConfigError(f"agent entries for unknown stage(s): {', '.join(extra)}")
    for name, role in list(roles.items()) + [(f"agents.{k}", v) for k, v in agents.items()]:
        if role.backend not in backends:
            raise ConfigError(f"role {name!r} refers to undefined backend {role.backend!r}")

    retrieval = _section(raw, "retrieval")
    tree = _section(raw, "tree")
    compose = _section(raw, "compose")
    build = _section(raw, "build")
    gateway = _section(raw, "gateway")
    try:
        cfg = RunConfig(
            base_dir=base,
            stages=stages,
            backends=backends,
            roles=roles,
            agents=agents,
            encoder=dict(_section(raw, "encoder")) or {"kind": "hashing", "dim": 256},
            delta=float(retrieval.get("delta", DEFAULT_DELTA)),
            top_n=int(retrieval.get("top_n", DEFAULT_TOP_N)),
            max_depth=int(retrieval.get("max_depth", DEFAULT_MAX_DEPTH)),
            path_limit=None if retrieval.get("path_limit", DEFAULT_PATH_LIMIT) is None
            else int(retrieval.get("path_limit", DEFAULT_PATH_LIMIT)),
            keyword_mode=str(retrieval.get("keyword_mode", "heuristic")),
            m=int(tree.get("m", DEFAULT_M)),
            budget=int(compose.get("budget", DEFAULT_BUDGET)),
            max_rounds=int(build.get("max_rounds", 5)),
            tacit=bool(build.get("tacit", True)),
            lenient=bool(build.get("lenient", False)),
            workers=int(build.get("workers", 1)),
            token_ceiling=None if gateway.get("token_ceiling") is None else int(gateway["token_ceiling"]),
            rates={
                str(model): (float(r.get("input", 0.0)), float(r.get("output", 0.0)))
                for model, r in (gateway.get("rates") or {}).items()
            },
            paths={str(k): (base / str(v)) for k, v in _section(raw, "paths").items() if v is not None},
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid numeric setting: {exc}") from None
    _check_ranges(cfg)
    return cfg


def _check_ranges(cfg: RunConfig) -> None:
    checks = [
        (-1.0 <= cfg.delta <= 1.0, "retrieval.delta must be in [-1, 1]"),
        (cfg.top_n >= 1, "retrieval.top_n must be >= 1"),
        (cfg.max_depth >= 2, "retrieval.max_depth must be >= 2"),
        (cfg.path_limit is None or cfg.path_limit >= 1, "retrieval.path_limit must be >= 1"),
        (cfg.keyword_mode in ("heuristic", "llm"), "retrieval.keyword_mode must be heuristic or llm"),
        (cfg.m >= 1, "tree.m must be >= 1"),
        (cfg.budget >= 1, "compose.budget must be >= 1"),
        (cfg.max_rounds >= 1, "build.max_rounds must be >= 1"),
        (cfg.workers >= 1, "build.workers must be >= 1"),
        (cfg.token_ceiling is None or cfg.token_ceiling >= 1, "gateway.token_ceiling must be >= 1"),
        (cfg.encoder.get("kind") in ("hashing", "remote"), "encoder.kind must be hashing or remote"),
        (all(a >= 0 and b >= 0 for a, b in cfg.rates.values()), "gateway.rates must be non-negative"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
    if cfg.keyword_mode == "llm" and "keywords" not in cfg.roles:
        raise ConfigError("keyword_mode llm needs a roles.keywords entry")


class Runtime:
    """Backends, handles and the encoder instantiated from a config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.gateway = Gateway(cfg.rates, cfg.token_ceiling)
        self._backends: dict[str, object] = {}

    def backend(self, name: str):
        if name not in self._backends:
            spec = self.cfg.backends[name]
            if spec["kind"] == "scripted":
                script = self.cfg.base_dir / str(spec["script"])
                if not script.exists():
                    raise FileNotFoundError(f"script fixture not found: {script}")
                self._backends[name] = ScriptedBackend.from_jsonl(script)
            else:
                self._backends[name] = HttpBackend(
                    str(spec["base_url"]),
                    retry_limit=int(spec.get("retry_limit", 2)),
                    backoff_s=float(spec.get("backoff_s", 0.5)),
                    timeout_s=float(spec.get("timeout_s", 60.0)),
                )
        return self._backends[name]

    def _handle(self, role: RoleConfig) -> BackendHandle:
        return BackendHandle(self.gateway, self.backend(role.backend), role.model,
                             role.temperature, role.max_output_tokens)

    def role(self, name: str, required: bool = True) -> BackendHandle | None:
        role = self.cfg.roles.get(name)
        if role is None:
            if required:
                raise ConfigError(f"roles.{name} is not configured")
            return None
        return self._handle(role)

    def agents(self) -> dict[str, BackendHandle]:
        return {sid: self._handle(role) for sid, role in self.cfg.agents.items()}

    def encoder(self):
        spec = self.cfg.encoder
        if spec.get("kind", "hashing") == "hashing":
            return HashingEncoder(int(spec.get("dim", 256)))
        if "url" not in spec or "model" not in spec:
            raise ConfigError("remote encoder needs 'url' and 'model'")
        return RemoteEncoder(str(spec["url"]), str(spec["model"]), api_key=os.environ.get(API_KEY_ENV) or None)
