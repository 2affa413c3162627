"""Experiment orchestration: run directories, oracle battery, evaluation, inspection and sweeps.

A run directory holds::

    manifest.json           config with every default explicit, versions, seed
    metrics.jsonl           one MetricsRecord per step (deterministic fields only)
    timings.jsonl           {step, wall_ms} per step
    checkpoint_<step>.yaml  at every eval step
    checkpoint_final.yaml
    summary.json
    run.log
"""

from __future__ import annotations

import json
import logging
import math
import os
import platform
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from rationale_lab import __version__
from rationale_lab.baselines import BaselineError
from rationale_lab.checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from rationale_lab.config import ConfigError, RunConfig, config_to_dict, effective_output_dir, with_overrides
from rationale_lab.itro import REFERENCE_LLM_BATCH_SIZE, REFERENCE_LLM_LEARNING_RATE, ItroError, sequence_log_weight, token_log_weights
from rationale_lab.metrics import MetricsRecord, annotate, eval_accuracy, mean_rationale_length
from rationale_lab.oracle import OracleError, conditioned_distribution, enumerate_rationales, fd_grad, kl_true_vs_estimated, marginal, mll_grad_exact, posterior_grad_expect, true_posterior
from rationale_lab.policy import Policy, PolicyError, forward_context, greedy_sequence, init_policy, sample_sequence
from rationale_lab.tasks import MAX_ENUMERABLE, TaskInstance, TaskSpecError, sample_instance
from rationale_lab.training import TrainingReport, eval_instances, train

logger = logging.getLogger(__name__)

RUN_FORMAT_VERSION = 1
DEFAULT_SWEEP_GRID = (1, 2, 5, 10, 20, 40)
GRID_ALIASES = {"n": "itro.n", "G": "rollout.G"}
_ORACLE_STREAM = 6
_TOLERANCES = {
    "posterior_gradient_identity": 1e-10,
    "mass_conservation": 1e-9,
    "gradient_vs_finite_difference": 1e-5,
    "bayes_consistency": 1e-12,
    "weight_factorisation": 1e-9,
    "kl_nonnegative": 0.0,
}

# every domain error the command line turns into exit status 1
DOMAIN_ERRORS = (TaskSpecError, PolicyError, OracleError, ItroError, BaselineError, ConfigError, CheckpointError)

_LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def setup_logging(output_dir: str | os.PathLike[str] | None = None, level: int = logging.INFO) -> logging.Logger:
    """Send package logs to stderr and, when ``output_dir`` is given, to ``output_dir/run.log``.

    Calling it again replaces the handlers installed by the previous call.
    """
    root = logging.getLogger("rationale_lab")
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter(_LOG_FORMAT))
    root.addHandler(stream)
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(Path(output_dir) / "run.log", mode="w")
        file_handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        root.addHandler(file_handler)
    root.propagate = False
    return root


def append_jsonl(path: str | os.PathLike[str], record: dict[str, Any]) -> None:
    """Append one JSON line; each record is written and flushed in a single call."""
    line = json.dumps(record, sort_keys=True, ensure_ascii=True) + "\n"
    with open(path, "a", encoding="utf-8") as f:
        f.write(line)
        f.flush()


def load_metrics(path: str | os.PathLike[str]) -> pd.DataFrame:
    """Read a metrics stream into a DataFrame indexed by step.

    An incomplete trailing line (an interrupted write) is dropped with a warning.
    """
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            if number == len(lines):
                logger.warning("dropping incomplete trailing line %d of %s", number, path)
                break
            raise
    frame = pd.DataFrame.from_records(rows)
    return frame.set_index("step") if "step" in frame else frame


def build_manifest(config: RunConfig) -> dict[str, Any]:
    return {
        "format_version": RUN_FORMAT_VERSION,
        "package": "rationale-lab",
        "version": __version__,
        "method": config.method,
        "seed": config.seed,
        "config": config_to_dict(config),
        # the LLM-scale settings the desk-scale defaults stand in for
        "reference_llm_settings": {"batch_size": REFERENCE_LLM_BATCH_SIZE, "learning_rate": REFERENCE_LLM_LEARNING_RATE},
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=True) + "\n", encoding="utf-8")


def _finite(value: float) -> float | None:
    return value if math.isfinite(value) else None


def execute(config: RunConfig, output_dir: str | os.PathLike[str] | None = None, progress: bool = True) -> TrainingReport:
    """Train ``config`` into its run directory and return the report; domain errors propagate."""
    out = Path(output_dir) if output_dir is not None else effective_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    setup_logging(out, logging.getLogger("rationale_lab").level or logging.INFO)
    metrics_path = out / "metrics.jsonl"
    timings_path = out / "timings.jsonl"
    for stale in (metrics_path, timings_path):
        stale.unlink(missing_ok=True)
    _write_json(out / "manifest.json", build_manifest(config))
    logger.info("run %s (%s, seed %d) -> %s", config.method, config.task.family, config.seed, out)

    def on_record(record: MetricsRecord, policy: Policy) -> None:
        append_jsonl(metrics_path, record.to_dict())
        append_jsonl(timings_path, {"step": record.step, "wall_ms": round(record.wall_ms, 3)})
        if record.accuracy is not None:
            save_checkpoint(policy, out / f"checkpoint_{record.step}.yaml", step=record.step)

    report = train(config, on_record=on_record, progress=progress)
    save_checkpoint(report.policy, out / "checkpoint_final.yaml", step=config.steps)
    _write_json(
        out / "summary.json",
        {
            "method": config.method,
            "seed": config.seed,
            "steps": config.steps,
            "initial_accuracy": report.initial_accuracy,
            "final_accuracy": report.final_accuracy,
            "initial_correct_len": _finite(report.initial_correct_len),
            "final_correct_len": _finite(report.final_correct_len),
            "skipped_steps": report.skipped_steps,
        },
    )
    logger.info("finished: accuracy %.4f -> %.4f, %d skipped steps", report.initial_accuracy, report.final_accuracy, report.skipped_steps)
    return report


def run(config: RunConfig, output_dir: str | os.PathLike[str] | None = None, progress: bool = True) -> int:
    """Exit status of :func:`execute`: 0 on success, 1 with a logged diagnostic on a domain error."""
    try:
        execute(config, output_dir, progress)
    except DOMAIN_ERRORS as exc:
        logger.error("run failed: %s", exc)
        return 1
    return 0


@dataclass(frozen=True)
class IdentityResult:
    identity_name: str
    instances_tested: int
    max_abs_err: float
    tolerance: float
    passed: bool
    underflow_count: int = 0
    min_retained_mass: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["pass"] = out.pop("passed")
        return out


def _oracle_pairs(config: RunConfig, n_pairs: int) -> list[tuple[Policy, TaskInstance]]:
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng([config.seed, _ORACLE_STREAM, i])
        policy = init_policy(config.policy.arch, config.task, "seeded_noise", 1.0, rng, config.policy.context_window, config.policy.tied)
        pairs.append((policy, sample_instance(config.task, rng)))
    return pairs


def _forward_indices(policy: Policy, instance: TaskInstance) -> list[int]:
    """Parameter coordinates that the forward log-marginal of ``instance`` can depend on."""
    if policy.arch != "tabular":
        return list(range(policy.n_params))
    V = policy.vocab_size
    x = instance.x
    states = sorted({s for tokens, s in policy.state_index.items() if tokens[: len(x)] == x and all(policy.vocab.is_digit(t) for t in tokens[len(x) :])})
    return [s * V + j for s in states for j in range(V)]


def _relative_error(exact: np.ndarray, approx: np.ndarray, floor: float = 1e-8) -> float:
    """Largest error over components above ``floor``, relative to the largest of those components."""
    mask = np.abs(exact) > floor
    if not mask.any():
        return float(np.max(np.abs(exact - approx), initial=0.0))
    return float(np.max(np.abs(exact[mask] - approx[mask])) / np.max(np.abs(exact[mask])))


def oracle_identities(config: RunConfig, n_pairs: int = 50) -> list[IdentityResult]:
    """Evaluate the exact identities over ``n_pairs`` seeded (policy, instance) pairs.

    Raises:
        OracleError: If the task's rationale space is too large to enumerate.
    """
    task = config.task
    if task.rationale_space_size > MAX_ENUMERABLE:
        raise OracleError(f"rationale space of {task.rationale_space_size} sequences exceeds {MAX_ENUMERABLE}")
    t_max = task.max_rationale_len
    errors: dict[str, list[float]] = {name: [] for name in _TOLERANCES}
    underflow = 0
    retained: list[float] = []
    for i, (policy, instance) in enumerate(_oracle_pairs(config, n_pairs)):
        context = forward_context(instance)
        rationales = enumerate_rationales(policy, context, t_max, workers=config.workers)
        errors["mass_conservation"].append(abs(rationales.total_mass - 1.0))
        underflow += rationales.underflow_count

        exact = mll_grad_exact(policy, instance, t_max)
        errors["posterior_gradient_identity"].append(float(np.max(np.abs(exact - posterior_grad_expect(policy, instance, t_max)))))

        indices = _forward_indices(policy, instance)
        fd = fd_grad(lambda p: math.log(marginal(p, instance, t_max)), policy, indices=indices)
        errors["gradient_vs_finite_difference"].append(_relative_error(exact[indices], fd[indices]))

        total = marginal(policy, instance, t_max)
        posterior = true_posterior(policy, instance, t_max)
        bayes = [abs(posterior[e.z] * total - e.prob) for e in rationales if e.answer == instance.y]
        bayes.append(abs(math.fsum(posterior.values()) - 1.0))
        errors["bayes_consistency"].append(max(bayes))

        z = sample_sequence(policy, context, 1.0, t_max, np.random.default_rng([config.seed, _ORACLE_STREAM, i, 1]))
        errors["weight_factorisation"].append(abs(sequence_log_weight(policy, instance, z) - math.fsum(token_log_weights(policy, instance, z))))

        kl = kl_true_vs_estimated(policy, instance, t_max)
        retained.append(conditioned_distribution(policy, instance, t_max)[1])
        errors["kl_nonnegative"].append(0.0 if math.isfinite(kl) and kl >= 0 else math.inf)

    results = []
    for name, tolerance in _TOLERANCES.items():
        worst = max(errors[name])
        results.append(
            IdentityResult(
                identity_name=name,
                instances_tested=len(errors[name]),
                max_abs_err=worst,
                tolerance=tolerance,
                passed=worst <= tolerance,
                underflow_count=underflow,
                min_retained_mass=min(retained),
            )
        )
    return results


def oracle_check(config: RunConfig, n_pairs: int = 50, emit: Callable[[str], None] = print) -> int:
    """Print one JSON report per identity; exit 0 iff every identity is within tolerance."""
    results = oracle_identities(config, n_pairs)
    for result in results:
        emit(json.dumps(result.to_dict(), sort_keys=True))
    failed = [r.identity_name for r in results if not r.passed]
    if failed:
        logger.error("oracle identities failed: %s", ", ".join(failed))
        return 1
    return 0


def evaluate(checkpoint: str | os.PathLike[str], config: RunConfig) -> dict[str, Any]:
    """Accuracy and mean sampled rationale length of a checkpoint on the run's eval set."""
    policy = load_checkpoint(checkpoint, expected=config.policy, task=config.task)
    instances = eval_instances(config)
    accuracy = eval_accuracy(policy, instances, config.eval, np.random.default_rng([config.seed, 3, 0]))
    mean_length = mean_rationale_length(policy, instances, config.eval.k, config.eval.temperature, np.random.default_rng([config.seed, 2, 0]))
    return {"accuracy": accuracy, "mean_length": mean_length, "n_instances": len(instances), "decode_mode": config.eval.mode}


def inspect(checkpoint: str | os.PathLike[str], query_seed: int, w_max: float = 200.0) -> list[dict[str, Any]]:
    """Per-token annotations of the greedy rationale for the query drawn from ``query_seed``."""
    policy = load_checkpoint(checkpoint)
    instance = sample_instance(policy.task, np.random.default_rng(query_seed))
    z = greedy_sequence(policy, forward_context(instance), policy.task.max_rationale_len)
    query = policy.vocab.render(instance.x)
    return [{"query": query, "answer": instance.y, **asdict(a)} for a in annotate(policy, instance, z, w_max)]


def parse_grid(text: str) -> tuple[str, list[Any]]:
    """``"n=1,2,5"`` -> ``("itro.n", ["1", "2", "5"])``; values are typed by the config schema."""
    if "=" not in text:
        raise ConfigError("grid", f"expected key=v1,v2,..., got {text!r}")
    key, values = (part.strip() for part in text.split("=", 1))
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise ConfigError("grid", "no values given")
    return GRID_ALIASES.get(key, key), items


def sweep(
    config: RunConfig,
    key: str = "itro.n",
    values: Sequence[Any] = DEFAULT_SWEEP_GRID,
    output_dir: str | os.PathLike[str] | None = None,
    progress: bool = True,
) -> list[dict[str, Any]]:
    """One run per grid value under ``<output_dir>/<key>=<value>``, summarised in ``sweep_summary.jsonl``."""
    base = Path(output_dir) if output_dir is not None else effective_output_dir(config)
    base.mkdir(parents=True, exist_ok=True)
    summary_path = base / "sweep_summary.jsonl"
    summary_path.unlink(missing_ok=True)
    rows = []
    for value in values:
        run_dir = base / f"{key}={value}"
        variant = with_overrides(config, {key: value, "output_dir": str(run_dir)})
        report = execute(variant, run_dir, progress)
        row = {
            "key": key,
            "value": config_to_dict(variant)[key],
            "final_accuracy": report.final_accuracy,
            "initial_accuracy": report.initial_accuracy,
            "final_correct_len": _finite(report.final_correct_len),
            "skipped_steps": report.skipped_steps,
            "run_dir": str(run_dir),
        }
        append_jsonl(summary_path, row)
        rows.append(row)
    setup_logging(base)
    return rows
