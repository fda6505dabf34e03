# retrieval_xattn/config/settings.py
#
# Run configuration, layered: dataclass defaults -> packaged defaults.yaml ->
# the user's JSON document -> command-line overrides. Unknown keys at any
# level are rejected by their dotted path.

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import yaml

from ..errors import ConfigError, ConfigParseError, ConfigValidationError, StorageError
from ..model import ModelConfig
from ..training import PRESETS, TrainingRegime

logger = logging.getLogger(__name__)

DEFAULTS_PATH = os.path.join(os.path.dirname(__file__), "defaults.yaml")

# leaf types: int, float, str, ints (list of int); a trailing "?" allows null
SCHEMA: dict[str, Any] = {
    "model": {
        "d_model": "int", "n_heads": "int", "n_enc_layers": "int", "n_dec_layers": "int",
        "d_ff": "int", "vocab_size": "int", "window": "int", "seed": "int", "init_std": "float",
    },
    "regime": {
        "preset": "str", "variant": "str", "validation_mode": "str",
        "train_truncation_limit": "int?", "max_epochs": "int", "patience": "int",
        "lr": "float", "beta1": "float", "beta2": "float",
    },
    "task": {"kind": "str", "n": "int?", "m": "int", "count": "int", "seed": "int"},
    "paths": {"corpus": "str?", "validation": "str?", "checkpoint": "str?", "report_dir": "str?"},
    "bench": {"lengths": "ints?", "repetitions": "int", "output_tokens": "int?"},
    "analysis": {"n_bins": "int"},
    "k": "int?",
    "provider": "str",
    "workers": "int",
}

PROVIDERS = ("full", "retrieval", "naive", "random", "memtrans")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "needle_copy"
    n: int | None = None  # None: 8 x window
    m: int = 8
    count: int = 50
    seed: int = 0

    def length(self, window: int) -> int:
        return self.n if self.n is not None else 8 * window


@dataclass(frozen=True)
class PathsConfig:
    corpus: str | None = None
    validation: str | None = None
    checkpoint: str | None = None
    report_dir: str | None = "reports"


@dataclass(frozen=True)
class BenchConfig:
    lengths: tuple[int, ...] | None = None  # None: 1, 2, 4, 8, 16 x window
    repetitions: int = 5
    output_tokens: int | None = None

    def resolved_lengths(self, window: int) -> tuple[int, ...]:
        return self.lengths if self.lengths is not None else tuple(m * window for m in (1, 2, 4, 8, 16))


@dataclass(frozen=True)
class AnalysisConfig:
    n_bins: int = 10


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    preset: str = "retrieval"
    regime: TrainingRegime = field(default_factory=lambda: PRESETS["retrieval"])
    task: TaskSpec = field(default_factory=TaskSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    k: int | None = None
    provider: str = "retrieval"
    workers: int = 1

    @property
    def retrieval_k(self) -> int:
        return self.k if self.k is not None else self.model.window

    def to_dict(self) -> dict:
        r = self.regime
        bench = asdict(self.bench)
        if bench["lengths"] is not None:
            bench["lengths"] = list(bench["lengths"])
        return {
            "model": self.model.to_dict(),
            "regime": {
                "preset": self.preset,
                "variant": r.variant,
                "validation_mode": r.validation_mode,
                "train_truncation_limit": r.train_truncation_limit,
                "max_epochs": r.max_epochs,
                "patience": r.patience,
                "lr": r.lr,
                "beta1": r.beta1,
                "beta2": r.beta2,
            },
            "task": asdict(self.task),
            "paths": asdict(self.paths),
            "bench": bench,
            "analysis": asdict(self.analysis),
            "k": self.k,
            "provider": self.provider,
            "workers": self.workers,
        }


# ---------- schema ----------

def _check_leaf(value, kind: str, path: str):
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigValidationError(f"{path} must not be null")
    is_int = isinstance(value, int) and not isinstance(value, bool)
    if kind == "int" and is_int:
        return value
    if kind == "float" and (is_int or isinstance(value, float)) and not isinstance(value, bool):
        return float(value)
    if kind == "str" and isinstance(value, str):
        return value
    if kind == "ints" and isinstance(value, list) and all(
        isinstance(v, int) and not isinstance(v, bool) for v in value
    ):
        return tuple(value)
    expected = {"int": "an integer", "float": "a number", "str": "a string", "ints": "a list of integers"}[kind]
    raise ConfigValidationError(f"{path} must be {expected}, got {value!r}")


def _check(data: dict, schema: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown configuration key {path!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigValidationError(f"{path} must be an object")
            out[key] = _check(value, spec, f"{path}.")
        else:
            out[key] = _check_leaf(value, spec, path)
    return out


def _merge(base: dict, over: dict) -> dict:
    merged = dict(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


# ---------- building ----------

def _validate_provider(provider: str, model: ModelConfig) -> None:
    name, _, arg = provider.partition(":")
    if name not in PROVIDERS:
        raise ConfigValidationError(f"provider must be one of {', '.join(PROVIDERS)} (memtrans:LAYER), got {provider!r}")
    if name == "memtrans":
        if not arg.isdigit() or not int(arg) < model.n_dec_layers:
            raise ConfigValidationError(
                f"provider {provider!r} needs a decoder layer in [0, {model.n_dec_layers})"
            )
    elif arg:
        raise ConfigValidationError(f"provider {name} takes no argument, got {provider!r}")


def _validate(cfg: RunConfig) -> RunConfig:
    m, t, b = cfg.model, cfg.task, cfg.bench
    if cfg.k is not None and cfg.k < 1:
        raise ConfigValidationError(f"k must be >= 1, got {cfg.k}")
    if cfg.workers < 1:
        raise ConfigValidationError(f"workers must be >= 1, got {cfg.workers}")
    _validate_provider(cfg.provider, m)

    if t.kind != "needle_copy":
        raise ConfigValidationError(f"task.kind must be 'needle_copy', got {t.kind!r}")
    n = t.length(m.window)
    if n < m.window:
        raise ConfigValidationError(f"task.n ({n}) must be >= model.window ({m.window})")
    if t.m < 1 or 4 * t.m > n:
        raise ConfigValidationError(f"task.m must be in [1, n/4] for n={n}, got {t.m}")
    if t.m + 2 > m.window:
        raise ConfigValidationError(f"task.m ({t.m}) plus BOS/EOS must fit model.window ({m.window})")
    if t.count < 1:
        raise ConfigValidationError(f"task.count must be >= 1, got {t.count}")

    if b.repetitions < 3:
        raise ConfigValidationError(f"bench.repetitions must be >= 3, got {b.repetitions}")
    lengths = b.resolved_lengths(m.window)
    if not lengths or lengths[0] < 1 or any(y <= x for x, y in zip(lengths, lengths[1:])):
        raise ConfigValidationError(f"bench.lengths must be positive and strictly increasing, got {list(lengths)}")
    if b.output_tokens is not None and not 1 <= b.output_tokens <= m.window - 1:
        raise ConfigValidationError(f"bench.output_tokens must be in [1, {m.window - 1}]")
    if cfg.analysis.n_bins < 1:
        raise ConfigValidationError(f"analysis.n_bins must be >= 1, got {cfg.analysis.n_bins}")
    return cfg


def _build(data: dict) -> RunConfig:
    model = ModelConfig(**data.get("model", {}))
    regime_data = dict(data.get("regime", {}))
    preset = regime_data.pop("preset", "retrieval")
    if preset not in PRESETS:
        raise ConfigValidationError(f"regime.preset must be one of {', '.join(PRESETS)}, got {preset!r}")
    regime = replace(PRESETS[preset], name=preset, k=data.get("k"), **regime_data)
    return _validate(RunConfig(
        model=model,
        preset=preset,
        regime=regime,
        task=TaskSpec(**data.get("task", {})),
        paths=PathsConfig(**data.get("paths", {})),
        bench=BenchConfig(**data.get("bench", {})),
        analysis=AnalysisConfig(**data.get("analysis", {})),
        k=data.get("k"),
        provider=data.get("provider", "retrieval"),
        workers=data.get("workers", 1),
    ))


# ---------- entry points ----------

def load_defaults(path: str | None = None) -> dict:
    """Packaged defaults.yaml, checked against the schema."""
    path = path or DEFAULTS_PATH
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read defaults {path}: {exc}")
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigParseError(
            f"malformed defaults {path}",
            line=mark.line + 1 if mark else None,
            column=mark.column + 1 if mark else None,
        )
    if not isinstance(data, dict):
        raise ConfigError(f"defaults {path} must be a mapping")
    return _check(data, SCHEMA)


def parse_config(text: str, defaults: dict | None = None) -> RunConfig:
    """Strictly parse a JSON config document over the defaults."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"malformed JSON: {exc.msg}", line=exc.lineno, column=exc.colno)
    if not isinstance(data, dict):
        raise ConfigParseError("config document must be a JSON object", line=1, column=1)
    user = _check(data, SCHEMA)
    base = load_defaults() if defaults is None else _check(defaults, SCHEMA)
    return _build(_merge(base, user))


def load_config(path: str | None, defaults: dict | None = None) -> RunConfig:
    if path is None:
        return parse_config("{}", defaults)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}")
    cfg = parse_config(text, defaults)
    logger.debug("loaded config from %s", path)
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def with_overrides(
    cfg: RunConfig,
    *,
    seed: int | None = None,
    k: int | None = None,
    provider: str | None = None,
    report_dir: str | None = None,
    workers: int | None = None,
    preset: str | None = None,
) -> RunConfig:
    """Apply command-line flags on top of a parsed config."""
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigValidationError(f"unknown regime preset {preset!r}")
        r = cfg.regime
        regime = replace(
            PRESETS[preset], name=preset, train_truncation_limit=r.train_truncation_limit,
            max_epochs=r.max_epochs, patience=r.patience, lr=r.lr, beta1=r.beta1, beta2=r.beta2, k=r.k,
        )
        cfg = replace(cfg, preset=preset, regime=regime)
    if seed is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=seed))
    if k is not None:
        cfg = replace(cfg, k=k, regime=replace(cfg.regime, k=k))
    if provider is not None:
        cfg = replace(cfg, provider=provider)
    if report_dir is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, report_dir=report_dir))
    if workers is not None:
        cfg = replace(cfg, workers=workers)
    return _validate(cfg)
