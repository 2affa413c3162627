import importlib.util
import json
from pathlib import Path
from types import ModuleType

import pandas as pd
import pytest

from rationale_lab.config import RunConfig

SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "pin_reference.py"


@pytest.fixture(scope="module")
def pin_reference() -> ModuleType:
    spec = importlib.util.spec_from_file_location("pin_reference", SCRIPT)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


@pytest.fixture
def table() -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"method": "itro", "initial_accuracy": 0.0, "final_accuracy": 1.0, "skipped_steps": 0},
            {"method": "sft", "initial_accuracy": 0.0, "final_accuracy": 2 / 3, "skipped_steps": 2},
        ]
    )


def test_write_report_renders_a_markdown_table(pin_reference: ModuleType, table: pd.DataFrame, tmp_path: Path) -> None:
    path = tmp_path / "reports" / "comparison.md"
    pin_reference.write_report(table, RunConfig(), path)
    text = path.read_text()
    assert text.startswith("# Method comparison")
    rows = [line for line in text.splitlines() if line.startswith("|")]
    assert len(rows) == 2 + len(table)
    assert "method" in rows[0] and "final_accuracy" in rows[0]
    assert "0.6667" in rows[3]


def test_write_pins(pin_reference: ModuleType, table: pd.DataFrame, tmp_path: Path) -> None:
    path = tmp_path / "data" / "reference_values.json"
    config = RunConfig()
    pin_reference.write_pins(table, config, path)
    pinned = json.loads(path.read_text())
    assert pinned["seed"] == config.seed
    assert pinned["methods"]["sft"] == {"final_accuracy": pytest.approx(2 / 3), "skipped_steps": 2}
