"""Policy checkpoints as versioned YAML documents.

Parameters are stored as 17-significant-digit decimal strings, so a save/load round
trip reproduces every float64 bit for bit.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from rationale_lab.policy import Policy, PolicySpec, init_policy, with_params
from rationale_lab.tasks import TaskFamilySpec

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_HEADER_FIELDS = ("format_version", "arch", "task", "context_window", "tied", "n_params", "params")
_TASK_FIELDS = ("family", "base", "chain_length", "max_rationale_len")


class CheckpointError(ValueError):
    """Raised for unreadable, mismatched or incompatible checkpoints."""


def save_checkpoint(policy: Policy, path: str | os.PathLike[str], step: int | None = None) -> Path:
    """Write ``policy`` to ``path``; the file is replaced atomically."""
    path = Path(path)
    doc: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "arch": policy.arch,
        "task": {name: getattr(policy.task, name) for name in _TASK_FIELDS},
        "context_window": policy.context_window,
        "tied": policy.tied,
    }
    if step is not None:
        doc["step"] = step
    doc["n_params"] = policy.n_params
    doc["params"] = [format(float(v), ".17g") for v in policy.params]
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False, default_flow_style=False)
    os.replace(tmp, path)
    return path


def _require(doc: dict[str, Any], name: str) -> Any:
    if name not in doc or doc[name] is None:
        raise CheckpointError(f"malformed checkpoint: missing field {name!r}")
    return doc[name]


def load_checkpoint(
    path: str | os.PathLike[str],
    expected: PolicySpec | None = None,
    task: TaskFamilySpec | None = None,
) -> Policy:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: Checkpoint file.
        expected: Architecture the caller is about to use; a checkpoint of another
            architecture or parameter count is rejected.
        task: Task family the caller runs on; must match the checkpoint's.

    Raises:
        CheckpointError: On version mismatch, a missing field, or a dimension mismatch.
    """
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if not isinstance(doc, dict):
        raise CheckpointError("malformed checkpoint: not a mapping")
    for name in _HEADER_FIELDS:
        _require(doc, name)
    if doc["format_version"] != FORMAT_VERSION:
        raise CheckpointError(f"format_version {doc['format_version']} is not supported (expected {FORMAT_VERSION})")
    task_doc = doc["task"]
    if not isinstance(task_doc, dict):
        raise CheckpointError("malformed checkpoint: task must be a mapping")
    for name in _TASK_FIELDS:
        _require(task_doc, name)
    saved_task = TaskFamilySpec(**{name: task_doc[name] for name in _TASK_FIELDS})
    if task is not None and task != saved_task:
        raise CheckpointError(f"task mismatch: checkpoint was trained on {saved_task}, run uses {task}")

    policy = init_policy(doc["arch"], saved_task, context_window=int(doc["context_window"]), tied=bool(doc["tied"]))
    if expected is not None and (expected.arch, expected.context_window, expected.tied) != (policy.arch, policy.context_window, policy.tied):
        wanted = init_policy(expected.arch, saved_task, context_window=expected.context_window, tied=expected.tied)
        raise CheckpointError(f"dimension mismatch: checkpoint {policy.arch} has {policy.n_params} parameters, run expects {wanted.arch} with {wanted.n_params}")
    raw = doc["params"]
    if int(doc["n_params"]) != policy.n_params or len(raw) != policy.n_params:
        raise CheckpointError(f"dimension mismatch: {policy.arch} policy needs {policy.n_params} parameters, checkpoint declares {doc['n_params']} and holds {len(raw)}")
    try:
        params = np.array([float(v) for v in raw])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    logger.debug("loaded %s checkpoint from %s", policy.arch, path)
    return with_params(policy, params)
