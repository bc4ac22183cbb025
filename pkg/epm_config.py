#!/usr/bin/env python3
"""
================================================================================
    EPM BENCH - CONFIGURATION & LOGGING
================================================================================

    Precedence: CLI flags (--set section.key=value) > config.yaml > defaults.

    API keys are never read from the file. Each endpoint names the
    environment variable holding its key (auth_env_var); a .env file in
    the working directory is loaded at startup via python-dotenv.
================================================================================
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import yaml
from colorama import Fore, Style
from colorama import init as colorama_init
from dotenv import load_dotenv

from epm_core import GateConfig
from epm_errors import ConfigError
from epm_metrics import MetricsConfig

DEFAULT_CONFIG_PATH = "config.yaml"

DEFAULT_DOMAINS = [
    "Values & Beliefs",
    "Physical & Mental Health",
    "Daily Life Circumstances",
    "Interpersonal Relations",
    "Study & Career",
    "Family & Intimacy",
]


# =============================================================================
# SECTIONS
# =============================================================================

@dataclass
class RunConfig:
    seed: int = 20260101
    t_max: int = 20
    k: int = 1
    parallelism: int = 4
    store_root: str = "runs"
    run_id: str = ""
    corpus_dir: str = "corpus"
    frozen_time: Optional[str] = None
    turn_retries: int = 1

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError(f"run.t_max must be >= 1, got {self.t_max}")
        if self.k < 1 or self.k > self.t_max:
            raise ConfigError(f"run.k must be in [1, t_max], got {self.k}")
        if self.parallelism < 1:
            raise ConfigError(f"run.parallelism must be >= 1, got {self.parallelism}")
        if self.frozen_time:
            try:
                datetime.fromisoformat(self.frozen_time)
            except ValueError as e:
                raise ConfigError(f"run.frozen_time is not ISO-8601: {self.frozen_time}") from e


@dataclass
class StatsConfig:
    n_resamples: int = 10000
    seed: int = 7
    tie_tol: float = 1e-9
    confidence: float = 0.95

    def __post_init__(self):
        if self.n_resamples < 1:
            raise ConfigError("stats.n_resamples must be >= 1")
        if self.tie_tol < 0:
            raise ConfigError("stats.tie_tol must be >= 0")
        if not 0 < self.confidence < 1:
            raise ConfigError("stats.confidence must be in (0, 1)")


@dataclass
class ScenarioConfig:
    band_mu: float = 32.32
    band_sigma: float = 4.52
    domains: List[str] = field(default_factory=lambda: list(DEFAULT_DOMAINS))
    min_chars: int = 40
    max_chars: int = 20000
    banned_terms: List[str] = field(default_factory=list)
    sample_restarts: int = 200
    filter_keywords: List[str] = field(default_factory=lambda: [
        "self-harm", "suicide", "address:", "phone:", "id number"])

    def __post_init__(self):
        if not self.band_sigma > 0:
            raise ConfigError("scenario.band_sigma must be > 0")
        if len(self.domains) != 6:
            raise ConfigError(f"scenario.domains must name six life domains, got {len(self.domains)}")


@dataclass
class EndpointConfig:
    base_url: str = "https://api.openai.com/v1"
    auth_env_var: str = "OPENAI_API_KEY"
    timeout_s: float = 60.0
    max_retries: int = 3
    backoff_base: float = 1.0
    rate_limit: int = 60        # requests per minute, shared by all callers

    def __post_init__(self):
        if self.max_retries < 0:
            raise ConfigError("endpoints.*.max_retries must be >= 0")
        if self.rate_limit < 1:
            raise ConfigError("endpoints.*.rate_limit must be >= 1")
        if self.timeout_s <= 0:
            raise ConfigError("endpoints.*.timeout_s must be > 0")


@dataclass
class BackendConfig:
    """One role backend or one evaluated model"""
    name: str = ""
    backend: str = "scripted"       # scripted | chat
    endpoint: str = "default"
    model: str = ""
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 1024
    program: List[Any] = field(default_factory=list)
    rule: Optional[str] = "cycle"   # None | cycle | random
    iedr_rule: Optional[str] = None
    lookup: Dict[str, Any] = field(default_factory=dict)
    persona_lookup: Dict[str, Dict[str, Any]] = field(default_factory=dict)   # judge: "P=Low" -> {reply: levels}
    seed: Optional[int] = None
    max_repairs: int = 2

    def __post_init__(self):
        if self.backend not in ("scripted", "chat"):
            raise ConfigError(f"backend must be 'scripted' or 'chat', got {self.backend!r}")
        if self.rule not in (None, "cycle", "random"):
            raise ConfigError(f"rule must be null, 'cycle' or 'random', got {self.rule!r}")
        if self.max_repairs < 0:
            raise ConfigError("max_repairs must be >= 0")


@dataclass
class LoggingConfig:
    level: str = "INFO"
    log_dir: str = "logs"
    to_file: bool = False
    color: bool = True
    progress: bool = True


@dataclass
class BenchConfig:
    run: RunConfig = field(default_factory=RunConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    roles: Dict[str, BackendConfig] = field(default_factory=dict)
    models: List[BackendConfig] = field(default_factory=list)
    endpoints: Dict[str, EndpointConfig] = field(default_factory=lambda: {"default": EndpointConfig()})
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    def role(self, name: str) -> BackendConfig:
        if name not in self.roles:
            raise ConfigError(f"roles.{name} is not configured")
        return self.roles[name]

    def endpoint(self, name: str) -> EndpointConfig:
        if name not in self.endpoints:
            raise ConfigError(f"endpoint {name!r} is not configured")
        return self.endpoints[name]

    def to_record(self) -> Dict[str, Any]:
        """Config echo for run manifests"""
        return asdict(self)


ROLE_NAMES = ("user", "judge", "director")


# =============================================================================
# LOADING
# =============================================================================

def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if is_dataclass(data):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    if "api_key" in data:
        raise ConfigError(f"{where}.api_key: keys are read from the environment only (auth_env_var)")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def _set_path(raw: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        if isinstance(node, list):
            node = node[int(part)]
            continue
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
    if isinstance(node, list):
        node[int(parts[-1])] = value
    else:
        node[parts[-1]] = value


def parse_override(text: str):
    """'section.key=value' -> ('section.key', parsed value)"""
    if "=" not in text:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if not key or "." not in key:
        raise ConfigError(f"override key must be dotted (section.key), got {key!r}")
    return key, yaml.safe_load(value) if value.strip() else ""


def backend_from_dict(data: Dict[str, Any], where: str = "backend") -> BackendConfig:
    """Standalone backend block (e.g. the judge section of a pair manifest)"""
    return _build(BackendConfig, data, where)


def config_from_dict(raw: Dict[str, Any]) -> BenchConfig:
    raw = raw or {}
    known = {f.name for f in fields(BenchConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")

    roles = {}
    for name, data in (raw.get("roles") or {}).items():
        if name not in ROLE_NAMES:
            raise ConfigError(f"unknown role {name!r} (expected one of {', '.join(ROLE_NAMES)})")
        spec = _build(BackendConfig, data, f"roles.{name}")
        spec.name = spec.name or name
        roles[name] = spec

    models = []
    for i, data in enumerate(raw.get("models") or []):
        spec = _build(BackendConfig, data, f"models[{i}]")
        if not spec.name:
            raise ConfigError(f"models[{i}] needs a name")
        models.append(spec)
    names = [m.name for m in models]
    if len(names) != len(set(names)):
        raise ConfigError("model names must be unique")

    endpoints = {name: _build(EndpointConfig, data, f"endpoints.{name}")
                 for name, data in (raw.get("endpoints") or {}).items()}
    if not endpoints:
        endpoints = {"default": EndpointConfig()}

    return BenchConfig(
        run=_build(RunConfig, raw.get("run"), "run"),
        gate=_build(GateConfig, raw.get("gate"), "gate"),
        metrics=_build(MetricsConfig, raw.get("metrics"), "metrics"),
        stats=_build(StatsConfig, raw.get("stats"), "stats"),
        scenario=_build(ScenarioConfig, raw.get("scenario"), "scenario"),
        roles=roles,
        models=models,
        endpoints=endpoints,
        logging=_build(LoggingConfig, raw.get("logging"), "logging"),
    )


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> BenchConfig:
    """Load configuration from yaml, environment and flag overrides"""
    load_dotenv()

    path = path or os.getenv("EPM_CONFIG") or DEFAULT_CONFIG_PATH
    raw: Dict[str, Any] = {}
    if os.path.exists(path):
        with open(path, "r") as f:
            try:
                raw = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
    elif path != DEFAULT_CONFIG_PATH:
        raise ConfigError(f"config file not found: {path}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")

    # Environment sits between the file and flags
    if os.getenv("EPM_LOG_LEVEL"):
        _set_path(raw, "logging.level", os.getenv("EPM_LOG_LEVEL"))
    if os.getenv("EPM_STORE_ROOT"):
        _set_path(raw, "run.store_root", os.getenv("EPM_STORE_ROOT"))

    for text in overrides:
        key, value = parse_override(text)
        try:
            _set_path(raw, key, value)
        except (IndexError, ValueError, TypeError, AttributeError) as e:
            raise ConfigError(f"cannot apply override {text!r}: {e}") from e

    return config_from_dict(raw)


# =============================================================================
# LOGGING
# =============================================================================

class ColorFormatter(logging.Formatter):
    COLORS = {
        logging.DEBUG: Style.DIM,
        logging.INFO: "",
        logging.WARNING: Fore.YELLOW,
        logging.ERROR: Fore.RED,
        logging.CRITICAL: Fore.RED + Style.BRIGHT,
    }

    def format(self, record: logging.LogRecord) -> str:
        text = super().format(record)
        color = self.COLORS.get(record.levelno, "")
        return f"{color}{text}{Style.RESET_ALL}" if color else text


def setup_logging(cfg: Optional[LoggingConfig] = None) -> logging.Logger:
    """Console handler (+ optional daily file) on the EpmBench logger"""
    cfg = cfg or LoggingConfig()
    logger = logging.getLogger("EpmBench")
    level = getattr(logging, str(cfg.level).upper(), None)
    if not isinstance(level, int):
        raise ConfigError(f"logging.level is not a level name: {cfg.level}")
    logger.setLevel(logging.DEBUG if cfg.to_file else level)

    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    fmt = '%(asctime)s | %(levelname)s | %(message)s'
    datefmt = '%H:%M:%S'

    ch = logging.StreamHandler()
    ch.setLevel(level)
    if cfg.color:
        colorama_init()
        ch.setFormatter(ColorFormatter(fmt, datefmt=datefmt))
    else:
        ch.setFormatter(logging.Formatter(fmt, datefmt=datefmt))
    logger.addHandler(ch)

    if cfg.to_file:
        os.makedirs(cfg.log_dir, exist_ok=True)
        fh = logging.FileHandler(os.path.join(cfg.log_dir, f"epm_{datetime.now().strftime('%Y%m%d')}.log"))
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(logging.Formatter(fmt, datefmt=datefmt))
        logger.addHandler(fh)

    return logger
