"""Run configuration.

Configs are written either in a line grammar::

    # comment
    method = itro
    itro.n = 5
    rollout.G = 4

or as YAML with nested sections (``itro: {n: 5}``), which is flattened to the same
dotted keys. Both go through one schema; unknown keys, bad types and invariant
violations raise :class:`ConfigError` naming the key and line.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from rationale_lab.baselines import METHODS as BASELINE_METHODS, BaselineConfig
from rationale_lab.itro import ItroConfig
from rationale_lab.metrics import Decode
from rationale_lab.policy import PolicySpec
from rationale_lab.tasks import TaskFamilySpec

METHODS = ("itro", *BASELINE_METHODS)
OUTPUT_DIR_ENV = "RATIONALE_LAB_OUTPUT_DIR"
MAX_SEED = 2**64 - 1


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches and invariant violations."""

    def __init__(self, key: str, reason: str, line: int | None = None) -> None:
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}{where}: {reason}")
        self.key = key
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    method: str = "itro"
    task: TaskFamilySpec = field(default_factory=TaskFamilySpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    itro: ItroConfig = field(default_factory=ItroConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    eval: Decode = field(default_factory=Decode)
    steps: int = 2000
    batch_size: int = 32
    eval_every: int = 100
    eval_size: int = 64
    seed: int = 7
    workers: int = 1
    output_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}")
        if self.steps < 1:
            raise ConfigError("steps", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        if self.eval_size < 1:
            raise ConfigError("eval_size", "must be >= 1")
        if not 0 <= self.seed <= MAX_SEED:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        if self.itro.t_max != self.task.max_rationale_len:
            raise ConfigError("task.max_rationale_len", "rollout length must match the task family")


def _parse_bool(text: str | bool) -> bool:
    if isinstance(text, bool):
        return text
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _parse_int(text: str | int) -> int:
    if isinstance(text, bool):
        raise ValueError("expected an integer")
    return int(str(text).replace("_", ""))


def _parse_optional_str(text: str) -> str | None:
    text = str(text).strip()
    return None if text.lower() in ("", "none", "null") else text


# dotted key -> (section, field, parser)
SCHEMA: dict[str, tuple[str, str, Callable[[Any], Any]]] = {
    "method": ("", "method", str),
    "seed": ("", "seed", _parse_int),
    "steps": ("", "steps", _parse_int),
    "batch_size": ("", "batch_size", _parse_int),
    "eval_every": ("", "eval_every", _parse_int),
    "eval_size": ("", "eval_size", _parse_int),
    "workers": ("", "workers", _parse_int),
    "output_dir": ("", "output_dir", str),
    "learning_rate": ("itro", "learning_rate", float),
    "task.family": ("task", "family", str),
    "task.base": ("task", "base", _parse_int),
    "task.chain_length": ("task", "chain_length", _parse_int),
    "task.max_rationale_len": ("task", "max_rationale_len", _parse_int),
    "policy.arch": ("policy", "arch", str),
    "policy.init": ("policy", "init", str),
    "policy.noise_scale": ("policy", "noise_scale", float),
    "policy.context_window": ("policy", "context_window", _parse_int),
    "policy.tied": ("policy", "tied", _parse_bool),
    "rollout.G": ("itro", "group_size", _parse_int),
    "rollout.temperature": ("itro", "temperature", float),
    "itro.n": ("itro", "n_candidates", _parse_int),
    "itro.clip_max": ("itro", "clip_max", float),
    "itro.stop_grad_through_w": ("itro", "stop_grad_through_w", _parse_bool),
    "itro.pooling": ("itro", "pooling", str),
    "itro.posterior_sft_coef": ("itro", "posterior_sft_coef", float),
    "baseline.clip_epsilon": ("baseline", "clip_epsilon", float),
    "baseline.kl_beta": ("baseline", "kl_beta", float),
    "baseline.latro_kl_coef": ("baseline", "latro_kl_coef", float),
    "baseline.norm_mode": ("baseline", "norm_mode", str),
    "baseline.norm_constant": ("baseline", "norm_constant", float),
    "baseline.advantage_epsilon": ("baseline", "advantage_epsilon", float),
    "baseline.reference_checkpoint": ("baseline", "reference_checkpoint", _parse_optional_str),
    "eval.decode": ("eval", "mode", str),
    "eval.temperature": ("eval", "temperature", float),
    "eval.k": ("eval", "k", _parse_int),
}

# invariant messages phrased per key, checked before the dataclasses see the values
_BOUNDS: dict[str, tuple[float, str]] = {
    "itro.n": (1, "itro.n must be ≥ 1"),
    "rollout.G": (1, "rollout.G must be ≥ 1"),
    "steps": (1, "steps must be ≥ 1"),
    "batch_size": (1, "batch_size must be ≥ 1"),
    "eval_every": (1, "eval_every must be ≥ 1"),
    "eval.k": (1, "eval.k must be ≥ 1"),
    "workers": (1, "workers must be ≥ 1"),
}


def _split_lines(text: str) -> list[tuple[str, str, int]]:
    items = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, "expected 'key = value'", number)
        key, value = (part.strip() for part in line.split("=", 1))
        items.append((key, value, number))
    return items


def _flatten(mapping: Mapping[str, Any], prefix: str = "") -> list[tuple[str, Any, int | None]]:
    items: list[tuple[str, Any, int | None]] = []
    for key, value in mapping.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            items.extend(_flatten(value, f"{dotted}."))
        else:
            items.append((dotted, value, None))
    return items


def _build(items: list[tuple[str, Any, int | None]]) -> RunConfig:
    sections: dict[str, dict[str, Any]] = {"": {}, "task": {}, "policy": {}, "itro": {}, "baseline": {}, "eval": {}}
    lines: dict[str, int | None] = {}
    for key, value, line in items:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key", line)
        if key in lines:
            raise ConfigError(key, "duplicate key", line)
        lines[key] = line
        section, name, parser = SCHEMA[key]
        try:
            parsed = parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"type mismatch: {exc}", line) from None
        if key in _BOUNDS and parsed < _BOUNDS[key][0]:
            raise ConfigError(key, _BOUNDS[key][1], line)
        sections[section][name] = parsed

    def make(key_prefix: str, factory: Callable[..., Any], **kwargs: Any) -> Any:
        try:
            return factory(**kwargs)
        except ValueError as exc:
            keys = [k for k in lines if k.startswith(key_prefix)]
            raise ConfigError(keys[0] if keys else key_prefix.rstrip("."), str(exc), lines.get(keys[0]) if keys else None) from None

    task = make("task.", TaskFamilySpec, **sections["task"])
    policy = make("policy.", PolicySpec, **sections["policy"])
    itro = make("itro.", ItroConfig, t_max=task.max_rationale_len, **sections["itro"])
    method = sections[""].get("method", "itro")
    baseline_method = method if method in BASELINE_METHODS else "grpo"
    baseline = make("baseline.", BaselineConfig, method=baseline_method, **sections["baseline"])
    decode = make("eval.", Decode, **sections["eval"])
    top = sections[""]
    try:
        return RunConfig(task=task, policy=policy, itro=itro, baseline=baseline, eval=decode, **top)
    except ConfigError as exc:
        raise ConfigError(exc.key, str(exc).split(": ", 1)[1], lines.get(exc.key)) from None


def parse_config(text: str) -> RunConfig:
    """Parse the ``key = value`` grammar into a fully validated :class:`RunConfig`."""
    return _build([(k, v, n) for k, v, n in _split_lines(text)])


def load_config(path: str | os.PathLike[str]) -> RunConfig:
    """Load a config file; ``.yaml``/``.yml`` are read as nested YAML, anything else as the line grammar."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
        if not isinstance(data, Mapping):
            raise ConfigError(str(path), "YAML config must be a mapping")
        return _build(_flatten(data))
    return parse_config(text)


def config_to_dict(config: RunConfig) -> dict[str, Any]:
    """Every schema key with its effective value, dotted keys in schema order."""
    nested = asdict(config)
    out: dict[str, Any] = {}
    for key, (section, name, _) in SCHEMA.items():
        out[key] = nested[name] if section == "" else nested[section][name]
    return out


def format_config(config: RunConfig) -> str:
    """Render ``config`` in the line grammar; :func:`parse_config` reads it back to an equal value."""
    lines = []
    for key, value in config_to_dict(config).items():
        if isinstance(value, bool):
            value = str(value).lower()
        elif value is None:
            value = "none"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def effective_output_dir(config: RunConfig) -> Path:
    """``output_dir`` unless overridden by the ``RATIONALE_LAB_OUTPUT_DIR`` environment variable."""
    return Path(os.environ.get(OUTPUT_DIR_ENV) or config.output_dir)


def with_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Copy of ``config`` with dotted-key overrides applied and revalidated."""
    values = config_to_dict(config)
    for key, value in overrides.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        values[key] = value
    return _build([(k, v, None) for k, v in values.items()])

