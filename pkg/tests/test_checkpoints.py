from pathlib import Path

import numpy as np
import pytest
import yaml

from rationale_lab.checkpoints import CheckpointError, load_checkpoint, save_checkpoint
from rationale_lab.policy import Policy, PolicySpec
from rationale_lab.tasks import TaskFamilySpec


@pytest.mark.parametrize("fixture", ["noisy_policy", "linear_policy"])
def test_round_trip_is_bit_exact(fixture: str, request: pytest.FixtureRequest, tmp_path: Path) -> None:
    policy: Policy = request.getfixturevalue(fixture)
    path = save_checkpoint(policy, tmp_path / "ckpt.yaml", step=12)
    loaded = load_checkpoint(path, PolicySpec(arch=policy.arch, context_window=policy.context_window), policy.task)
    assert loaded.arch == policy.arch
    assert np.array_equal(loaded.params, policy.params)
    assert loaded.params.tobytes() == policy.params.tobytes()
    assert yaml.safe_load(path.read_text())["step"] == 12
    assert not (tmp_path / "ckpt.yaml.tmp").exists()


def test_truncated_file_names_the_missing_field(noisy_policy: Policy, tmp_path: Path) -> None:
    path = save_checkpoint(noisy_policy, tmp_path / "ckpt.yaml")
    text = path.read_text()
    path.write_text(text[: text.index("n_params:")])
    with pytest.raises(CheckpointError, match="missing field 'n_params'"):
        load_checkpoint(path)


def test_architecture_mismatch(noisy_policy: Policy, tmp_path: Path) -> None:
    path = save_checkpoint(noisy_policy, tmp_path / "ckpt.yaml")
    with pytest.raises(CheckpointError, match="dimension mismatch"):
        load_checkpoint(path, PolicySpec(arch="linear"))


def test_parameter_count_mismatch(noisy_policy: Policy, tmp_path: Path) -> None:
    path = save_checkpoint(noisy_policy, tmp_path / "ckpt.yaml")
    doc = yaml.safe_load(path.read_text())
    doc["params"] = doc["params"][:-1]
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(CheckpointError, match="dimension mismatch"):
        load_checkpoint(path)


def test_unsupported_version(noisy_policy: Policy, tmp_path: Path) -> None:
    path = save_checkpoint(noisy_policy, tmp_path / "ckpt.yaml")
    doc = yaml.safe_load(path.read_text())
    doc["format_version"] = 2
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(CheckpointError, match="format_version 2"):
        load_checkpoint(path)


def test_task_mismatch(noisy_policy: Policy, tmp_path: Path) -> None:
    path = save_checkpoint(noisy_policy, tmp_path / "ckpt.yaml")
    with pytest.raises(CheckpointError, match="task mismatch"):
        load_checkpoint(path, task=TaskFamilySpec(base=2, chain_length=2, max_rationale_len=4))


def test_document_must_be_a_mapping(tmp_path: Path) -> None:
    path = tmp_path / "ckpt.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(CheckpointError, match="not a mapping"):
        load_checkpoint(path)
