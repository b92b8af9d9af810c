"""Experiment configuration: JSON text parsed into typed sections.

Unknown keys and wrongly typed values are rejected with the line they occur
on. All randomness derives from one root seed split into named streams.
"""
from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DataSpec
from .evaluation import STRATEGIES
from .federation import FLConfig
from .hypergrad import HypergradConfig

STREAMS = ("data", "init", "pretrain", "meta_init", "sampling", "finetune", "clustering")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    hidden: list = field(default_factory=lambda: [32, 32])
    batch_norm: bool = True
    input_bn: bool = False


@dataclass(frozen=True)
class PretrainSpec:
    rounds: int = 60
    lr: float = 0.1
    local_epochs: int = 5
    fraction: float = 1.0
    batch_size: int = 32
    exact_stats: bool = True


@dataclass(frozen=True)
class MetaTrainSpec:
    rounds: int = 100
    fraction: float = 0.2
    epochs: int = 15
    batch_size: int = 32
    meta_iters: int = 1


@dataclass(frozen=True)
class EvalSpec:
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    repeats: int = 3
    base_lr: float = 0.05
    epochs: int = 15


@dataclass(frozen=True)
class AnalysisSpec:
    distance_cap: float = 50.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    metatrain: MetaTrainSpec = field(default_factory=MetaTrainSpec)
    hypergrad: HypergradConfig = field(default_factory=HypergradConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)

    def stream_seed(self, name: str) -> int:
        """Seed of a named random stream, derived from the root seed."""
        if name not in STREAMS:
            raise KeyError(name)
        ss = np.random.SeedSequence([self.seed, STREAMS.index(name)])
        return int(ss.generate_state(1, dtype=np.uint32)[0])

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.stream_seed(name))

    def fl_config(self, workers: int = 1) -> FLConfig:
        m = self.metatrain
        return FLConfig(rounds=m.rounds, fraction=m.fraction, epochs=m.epochs,
                        batch_size=m.batch_size, meta_iters=m.meta_iters,
                        seed=self.stream_seed("sampling"), workers=workers,
                        hypergrad=self.hypergrad)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


def _line_of(text: str, path: tuple) -> int | None:
    """Line of the last key in ``path``, searching after each parent key."""
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _fail(text, path, msg):
    line = _line_of(text, path) if text is not None else None
    where = ".".join(str(p) for p in path) or "<root>"
    prefix = f"line {line}: " if line else ""
    raise ConfigError(f"{prefix}{where}: {msg}")


def _check_value(value, default, text, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        _fail(text, path, f"expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(cls, obj, text, path):
    if not isinstance(obj, dict):
        _fail(text, path, "expected an object")
    known = {f.name: f for f in fields(cls)}
    template = cls()
    kwargs = {}
    for key, value in obj.items():
        if key not in known:
            _fail(text, path + (key,), f"unknown key (allowed: {', '.join(known)})")
        default = getattr(template, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, text, path + (key,))
        else:
            kwargs[key] = _check_value(value, default, text, path + (key,))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        _fail(text, path, str(exc))


def _validate(cfg: ExperimentConfig, text):
    bad = [s for s in cfg.eval.strategies if s not in STRATEGIES]
    if bad:
        _fail(text, ("eval", "strategies"), f"unknown strategies {bad}")
    if not cfg.model.hidden or any(not isinstance(h, int) or h < 1 for h in cfg.model.hidden):
        _fail(text, ("model", "hidden"), "layer widths must be positive integers")
    if cfg.pretrain.rounds < 1:
        _fail(text, ("pretrain", "rounds"), "pretraining needs at least one round")
    if cfg.eval.repeats < 1:
        _fail(text, ("eval", "repeats"), "need at least one repeat")
    if cfg.data.clients_per_domain < 1 or cfg.data.n_domains < 1:
        _fail(text, ("data",), "need at least one domain and one client per domain")
    try:
        cfg.fl_config()
    except ValueError as exc:
        _fail(text, ("metatrain",), str(exc))


def parse_config(text: str) -> ExperimentConfig:
    """Parse a config file, or the ``config`` section of a run manifest."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: {exc.msg}") from None
    if isinstance(obj, dict) and set(obj) >= {"config", "seeds"}:
        obj = obj["config"]
    cfg = _build(ExperimentConfig, obj, text, ())
    _validate(cfg, text)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
