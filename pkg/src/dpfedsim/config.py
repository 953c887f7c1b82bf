"""Run configuration: a single JSON document, strictly validated.

Unknown keys are errors, every default is reported, and the fully
resolved configuration is echoed into the run output so that feeding the
echo back through the validator reproduces the run bit for bit.  Sweep
grids ride along in the same document under flat dotted keys
(``sweep.quantiles`` and friends).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

from .calibration import CalibrationError, default_sigma_b, derive_update_noise
from .data import ClientDataset, generate_synthetic_task, ingest_csv
from .models import LossKind, ModelKind, ModelSpec
from .quantile import QuantileConfig, UpdateRule

logger = logging.getLogger(__name__)

_MISSING = object()

SWEEP_PREFIX = "sweep."

DEFAULT_SERVER_LR_MULTIPLIERS = (1.0, 10**0.25, 10**0.5, 10**0.75, 10.0)
DEFAULT_SWEEP_QUANTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
DEFAULT_NOISE_MULTIPLIERS = (0.0, 0.01, 0.03, 0.1)
DISCOVERED_CLIP_COUNT = 5


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class SyntheticTask:
    num_users: int
    examples_per_user: tuple[int, int] = (10, 30)
    spread: float = 1.0
    task: str = "regression"
    num_classes: int = 2
    input_dim: int = 10
    target_noise: float = 0.1
    batch_size: int = 10


@dataclass(frozen=True)
class CsvTask:
    path: str
    user_column: str = "user"
    target_column: str = "target"
    batch_size: int = 10


@dataclass(frozen=True)
class RunConfig:
    task: SyntheticTask | CsvTask
    model: ModelSpec
    rounds: int
    sample_prob: float
    population: int | None = None
    client_lr: float = 0.1
    server_lr: float = 1.0
    momentum: float = 0.9
    epochs: int = 1
    clip_mode: str = "adaptive"
    clip_value: float = 0.1
    clip_quantile: float = 0.5
    clip_lr: float = 0.2
    clip_rule: str = "geometric"
    noise_multiplier: float = 0.0
    sigma_b: float | None = None
    shifted_bits: bool = True
    master_seed: int = 0
    data_seed: int | None = None
    eval_fraction: float = 0.1
    eval_period: int = 10
    client_workers: int = 1
    output_dir: str | None = None


@dataclass(frozen=True)
class SweepSpec:
    base: RunConfig
    server_lr_multipliers: tuple[float, ...] = DEFAULT_SERVER_LR_MULTIPLIERS
    quantiles: tuple[float, ...] = DEFAULT_SWEEP_QUANTILES
    fixed_clips: tuple[float, ...] = ()
    noise_multipliers: tuple[float, ...] = DEFAULT_NOISE_MULTIPLIERS
    discover_fixed_clips: bool = False


def _coerce(label: str, value, kind: str, allow_none: bool = False):
    if value is None:
        if allow_none:
            return None
        raise ConfigError(f"{label}: must not be null")
    if kind == "bool":
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{label}: expected a boolean, got {value!r}")
    if isinstance(value, bool):
        raise ConfigError(f"{label}: expected {kind}, got a boolean")
    if kind == "int":
        if isinstance(value, int):
            return value
        raise ConfigError(f"{label}: expected an integer, got {value!r}")
    if kind == "number":
        if isinstance(value, (int, float)):
            return float(value)
        raise ConfigError(f"{label}: expected a number, got {value!r}")
    if kind == "str":
        if isinstance(value, str):
            return value
        raise ConfigError(f"{label}: expected a string, got {value!r}")
    if kind == "list":
        if isinstance(value, list):
            return value
        raise ConfigError(f"{label}: expected a list, got {value!r}")
    if kind == "dict":
        if isinstance(value, dict):
            return value
        raise ConfigError(f"{label}: expected an object, got {value!r}")
    raise AssertionError(f"unknown kind {kind}")


class _Fields:
    """Pop-and-check access to one JSON object; leftovers are errors."""

    def __init__(self, raw, path: str = ""):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path or 'config'}: expected a JSON object")
        self._raw = dict(raw)
        self._path = path
        self.defaulted: list[str] = []

    def _label(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def take(self, key: str, kind: str, default=_MISSING, allow_none: bool = False):
        if key not in self._raw:
            if default is _MISSING:
                raise ConfigError(f"missing required key {self._label(key)!r}")
            self.defaulted.append(self._label(key))
            return default
        return _coerce(self._label(key), self._raw.pop(key), kind, allow_none=allow_none)

    def finish(self) -> None:
        if self._raw:
            key = sorted(self._raw)[0]
            raise ConfigError(f"unknown key {self._label(key)!r}")


def _require(condition: bool, label: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{label}: {message}")


def _parse_task(raw) -> SyntheticTask | CsvTask:
    fields = _Fields(raw, "task")
    kind = fields.take("kind", "str")
    if kind == "synthetic":
        num_users = fields.take("num_users", "int")
        pair = fields.take("examples_per_user", "list", default=[10, 30])
        if len(pair) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in pair):
            raise ConfigError("task.examples_per_user: expected a pair of integers")
        task = SyntheticTask(
            num_users=num_users,
            examples_per_user=(pair[0], pair[1]),
            spread=fields.take("spread", "number", default=1.0),
            task=fields.take("task", "str", default="regression"),
            num_classes=fields.take("num_classes", "int", default=2),
            input_dim=fields.take("input_dim", "int", default=10),
            target_noise=fields.take("target_noise", "number", default=0.1),
            batch_size=fields.take("batch_size", "int", default=10),
        )
        fields.finish()
        _require(task.num_users >= 1, "task.num_users", "must be at least 1")
        _require(1 <= task.examples_per_user[0] <= task.examples_per_user[1],
                 "task.examples_per_user", "must satisfy 1 <= lo <= hi")
        _require(task.spread >= 1.0, "task.spread", "must be at least 1")
        _require(task.task in ("regression", "classification"), "task.task",
                 "must be 'regression' or 'classification'")
        _require(task.num_classes >= 2, "task.num_classes", "must be at least 2")
        _require(task.input_dim >= 1, "task.input_dim", "must be at least 1")
        _require(task.target_noise >= 0.0, "task.target_noise", "must be nonnegative")
        _require(task.batch_size >= 1, "task.batch_size", "must be at least 1")
        return task
    if kind == "csv":
        task = CsvTask(
            path=fields.take("path", "str"),
            user_column=fields.take("user_column", "str", default="user"),
            target_column=fields.take("target_column", "str", default="target"),
            batch_size=fields.take("batch_size", "int", default=10),
        )
        fields.finish()
        _require(task.batch_size >= 1, "task.batch_size", "must be at least 1")
        return task
    raise ConfigError(f"task.kind: expected 'synthetic' or 'csv', got {kind!r}")


def _parse_model(raw) -> ModelSpec:
    fields = _Fields(raw, "model")
    kind_name = fields.take("kind", "str")
    try:
        kind = ModelKind(kind_name)
    except ValueError:
        raise ConfigError(
            f"model.kind: expected one of {[k.value for k in ModelKind]}, got {kind_name!r}"
        ) from None
    loss_name = fields.take("loss", "str", default=None, allow_none=True)
    loss = None
    if loss_name is not None:
        try:
            loss = LossKind(loss_name)
        except ValueError:
            raise ConfigError(
                f"model.loss: expected one of {[k.value for k in LossKind]}, got {loss_name!r}"
            ) from None
    kwargs = dict(
        kind=kind,
        input_dim=fields.take("input_dim", "int"),
        output_dim=fields.take("output_dim", "int", default=1),
        hidden_dim=fields.take("hidden_dim", "int", default=16),
    )
    if loss is not None:
        kwargs["loss"] = loss
    fields.finish()
    try:
        return ModelSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def _parse_clip(raw) -> dict:
    fields = _Fields(raw, "clip")
    mode = fields.take("mode", "str", default="adaptive")
    if mode == "fixed":
        value = fields.take("value", "number")
        fields.finish()
        _require(value > 0.0, "clip.value", "must be positive")
        out = dict(clip_mode="fixed", clip_value=value)
    elif mode == "adaptive":
        out = dict(
            clip_mode="adaptive",
            clip_value=fields.take("initial", "number", default=0.1),
            clip_quantile=fields.take("quantile", "number", default=0.5),
            clip_lr=fields.take("lr", "number", default=0.2),
            clip_rule=fields.take("rule", "str", default="geometric"),
        )
        fields.finish()
        _require(
            math.isfinite(out["clip_value"]) and out["clip_value"] > 0.0,
            "clip.initial", "must be positive and finite",
        )
        _require(0.0 <= out["clip_quantile"] <= 1.0, "clip.quantile", "must lie in [0, 1]")
        _require(out["clip_lr"] > 0.0, "clip.lr", "must be positive")
        _require(out["clip_rule"] in ("geometric", "linear"), "clip.rule",
                 "must be 'geometric' or 'linear'")
    else:
        raise ConfigError(f"clip.mode: expected 'fixed' or 'adaptive', got {mode!r}")
    out["_defaulted"] = fields.defaulted
    return out


def validate_config(raw) -> RunConfig:
    """Parse and fully default a run config, rejecting anything dubious."""
    fields = _Fields(raw)
    task = _parse_task(fields.take("task", "dict"))
    model = _parse_model(fields.take("model", "dict"))
    clip = _parse_clip(fields.take("clip", "dict", default={}))
    defaulted_in_clip = clip.pop("_defaulted")
    config = RunConfig(
        task=task,
        model=model,
        rounds=fields.take("rounds", "int"),
        sample_prob=fields.take("sample_prob", "number"),
        population=fields.take("population", "int", default=None, allow_none=True),
        client_lr=fields.take("client_lr", "number", default=0.1),
        server_lr=fields.take("server_lr", "number", default=1.0),
        momentum=fields.take("momentum", "number", default=0.9),
        epochs=fields.take("epochs", "int", default=1),
        noise_multiplier=fields.take("noise_multiplier", "number", default=0.0),
        sigma_b=fields.take("sigma_b", "number", default=None, allow_none=True),
        shifted_bits=fields.take("shifted_bits", "bool", default=True),
        master_seed=fields.take("master_seed", "int", default=0),
        data_seed=fields.take("data_seed", "int", default=None, allow_none=True),
        eval_fraction=fields.take("eval_fraction", "number", default=0.1),
        eval_period=fields.take("eval_period", "int", default=10),
        client_workers=fields.take("client_workers", "int", default=1),
        output_dir=fields.take("output_dir", "str", default=None, allow_none=True),
        **clip,
    )
    fields.finish()

    _require(config.rounds >= 0, "rounds", "must be nonnegative")
    _require(0.0 < config.sample_prob <= 1.0, "sample_prob", "must lie in (0, 1]")
    _require(config.population is None or config.population >= 1, "population",
             "must be at least 1")
    _require(config.client_lr > 0.0, "client_lr", "must be positive")
    _require(config.server_lr > 0.0, "server_lr", "must be positive")
    _require(0.0 <= config.momentum < 1.0, "momentum", "must lie in [0, 1)")
    _require(config.epochs >= 1, "epochs", "must be at least 1")
    _require(config.noise_multiplier >= 0.0, "noise_multiplier", "must be nonnegative")
    _require(config.sigma_b is None or config.sigma_b >= 0.0, "sigma_b", "must be nonnegative")
    _require(0 <= config.master_seed < 2**64, "master_seed", "must fit in 64 unsigned bits")
    _require(config.data_seed is None or 0 <= config.data_seed < 2**64, "data_seed",
             "must fit in 64 unsigned bits")
    _require(0.0 <= config.eval_fraction < 1.0, "eval_fraction", "must lie in [0, 1)")
    _require(config.eval_period >= 1, "eval_period", "must be at least 1")
    _require(config.client_workers >= 1, "client_workers", "must be at least 1")
    if config.clip_mode == "fixed" and config.sigma_b is not None:
        raise ConfigError("sigma_b: only meaningful with adaptive clipping (no count query "
                          "is issued in fixed mode)")
    if isinstance(task, SyntheticTask):
        if config.population is not None and config.population != task.num_users:
            raise ConfigError("population: does not match task.num_users")
        if config.model.input_dim != task.input_dim:
            raise ConfigError("model.input_dim: does not match task.input_dim")

    # Reject infeasible noise splits as early as the population is known.
    known_n = task.num_users if isinstance(task, SyntheticTask) else config.population
    if config.clip_mode == "adaptive" and config.noise_multiplier > 0 and known_n is not None:
        sigma_b = config.sigma_b
        if sigma_b is None:
            sigma_b = default_sigma_b(config.sample_prob, known_n)
        try:
            derive_update_noise(config.noise_multiplier, sigma_b, config.shifted_bits)
        except CalibrationError as exc:
            raise ConfigError(f"noise_multiplier/sigma_b: {exc}") from None

    defaulted = fields.defaulted + defaulted_in_clip
    if defaulted:
        logger.info("config defaults applied: %s", ", ".join(sorted(defaulted)))
    return config


def quantile_config(config: RunConfig) -> QuantileConfig:
    if config.clip_mode != "adaptive":
        raise ValueError("quantile tracking is only defined for adaptive clipping")
    return QuantileConfig(
        gamma=config.clip_quantile,
        eta=config.clip_lr,
        c0=config.clip_value,
        rule=UpdateRule(config.clip_rule),
    )


def resolved_data_seed(config: RunConfig) -> int:
    """Seed for data generation and model init; defaults to the master seed.

    Sweeps set it explicitly so every cell trains on the same dataset
    while owning its own sampling and noise streams.
    """
    return config.master_seed if config.data_seed is None else config.data_seed


def build_clients(config: RunConfig) -> list[ClientDataset]:
    task = config.task
    if isinstance(task, SyntheticTask):
        return generate_synthetic_task(
            seed=resolved_data_seed(config),
            num_users=task.num_users,
            examples_per_user=task.examples_per_user,
            spread=task.spread,
            input_dim=task.input_dim,
            task=task.task,
            num_classes=task.num_classes,
            target_noise=task.target_noise,
            batch_size=task.batch_size,
        )
    return ingest_csv(
        task.path,
        user_column=task.user_column,
        target_column=task.target_column,
        batch_size=task.batch_size,
    )


def to_raw(config: RunConfig, resolved_sigma_b: float | None = None) -> dict:
    """Fully-defaulted JSON form; feeding it back through
    :func:`validate_config` reproduces the same run."""
    task = config.task
    if isinstance(task, SyntheticTask):
        task_raw = {
            "kind": "synthetic",
            "num_users": task.num_users,
            "examples_per_user": list(task.examples_per_user),
            "spread": task.spread,
            "task": task.task,
            "num_classes": task.num_classes,
            "input_dim": task.input_dim,
            "target_noise": task.target_noise,
            "batch_size": task.batch_size,
        }
    else:
        task_raw = {
            "kind": "csv",
            "path": task.path,
            "user_column": task.user_column,
            "target_column": task.target_column,
            "batch_size": task.batch_size,
        }
    if config.clip_mode == "fixed":
        clip_raw = {"mode": "fixed", "value": config.clip_value}
        sigma_b = None
    else:
        clip_raw = {
            "mode": "adaptive",
            "initial": config.clip_value,
            "quantile": config.clip_quantile,
            "lr": config.clip_lr,
            "rule": config.clip_rule,
        }
        sigma_b = config.sigma_b if resolved_sigma_b is None else resolved_sigma_b
    return {
        "task": task_raw,
        "model": {
            "kind": config.model.kind.value,
            "input_dim": config.model.input_dim,
            "output_dim": config.model.output_dim,
            "hidden_dim": config.model.hidden_dim,
            "loss": config.model.loss.value,
        },
        "clip": clip_raw,
        "rounds": config.rounds,
        "sample_prob": config.sample_prob,
        "population": config.population,
        "client_lr": config.client_lr,
        "server_lr": config.server_lr,
        "momentum": config.momentum,
        "epochs": config.epochs,
        "noise_multiplier": config.noise_multiplier,
        "sigma_b": sigma_b,
        "shifted_bits": config.shifted_bits,
        "master_seed": config.master_seed,
        "data_seed": config.data_seed,
        "eval_fraction": config.eval_fraction,
        "eval_period": config.eval_period,
        "client_workers": config.client_workers,
        "output_dir": config.output_dir,
    }


def split_sweep_keys(raw) -> tuple[dict, dict]:
    """Separate ``sweep.*`` keys from the base run config keys."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    base = {k: v for k, v in raw.items() if not k.startswith(SWEEP_PREFIX)}
    sweep = {k[len(SWEEP_PREFIX):]: v for k, v in raw.items() if k.startswith(SWEEP_PREFIX)}
    return base, sweep


def parse_sweep(raw) -> SweepSpec:
    """Validate a combined document: base run config plus ``sweep.*`` grids."""
    base_raw, sweep_raw = split_sweep_keys(raw)
    base = validate_config(base_raw)
    fields = _Fields(sweep_raw, "sweep")

    def grid(key: str, default) -> tuple[float, ...]:
        values = fields.take(key, "list", default=list(default))
        out = []
        for i, v in enumerate(values):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"sweep.{key}[{i}]: expected a number, got {v!r}")
            out.append(float(v))
        return tuple(out)

    spec = SweepSpec(
        base=base,
        server_lr_multipliers=grid("server_lr_multipliers", DEFAULT_SERVER_LR_MULTIPLIERS),
        quantiles=grid("quantiles", DEFAULT_SWEEP_QUANTILES),
        fixed_clips=grid("fixed_clips", ()),
        noise_multipliers=grid("noise_multipliers", DEFAULT_NOISE_MULTIPLIERS),
        discover_fixed_clips=fields.take("discover_fixed_clips", "bool", default=False),
    )
    fields.finish()
    _require(all(m > 0 for m in spec.server_lr_multipliers),
             "sweep.server_lr_multipliers", "must all be positive")
    _require(len(spec.server_lr_multipliers) > 0,
             "sweep.server_lr_multipliers", "must be non-empty")
    _require(all(0.0 <= g <= 1.0 for g in spec.quantiles), "sweep.quantiles",
             "must lie in [0, 1]")
    _require(all(c > 0 for c in spec.fixed_clips), "sweep.fixed_clips", "must all be positive")
    _require(all(z >= 0 for z in spec.noise_multipliers), "sweep.noise_multipliers",
             "must all be nonnegative")
    _require(len(spec.noise_multipliers) > 0, "sweep.noise_multipliers", "must be non-empty")
    if not spec.quantiles and not spec.fixed_clips and not spec.discover_fixed_clips:
        raise ConfigError("sweep: no cells (quantiles and fixed_clips both empty)")
    return spec


def load_config(path: str) -> dict:
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
