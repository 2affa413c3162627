#!/usr/bin/env python3
"""
Reference-number runner.

Trains ITRO and the comparison methods on one shared configuration (same task,
seed, step budget and learning rate) and writes a markdown table of the results
to reports/comparison.md.
"""

from __future__ import annotations

import argparse
import json
import os
from pathlib import Path

import pandas as pd

from rationale_lab.config import RunConfig, load_config, with_overrides
from rationale_lab.harness import execute, load_metrics, setup_logging

DEFAULT_METHODS = ("itro", "sft", "grpo", "gpg", "raftpp", "latro")


def run_method(config: RunConfig, method: str, out_dir: Path) -> dict:
    """
    Train one method into ``out_dir/<method>`` and summarise it.

    Args:
        config (RunConfig): Shared configuration.
        method (str): Method to train.
        out_dir (Path): Parent directory of the run directories.

    Returns:
        dict: Initial and final accuracy, mean correct length and the best evaluated accuracy.
    """
    run_dir = out_dir / method
    report = execute(with_overrides(config, {"method": method, "output_dir": str(run_dir)}), run_dir, progress=True)
    metrics = load_metrics(run_dir / "metrics.jsonl")
    evaluated = metrics["accuracy"].dropna() if "accuracy" in metrics else pd.Series(dtype=float)
    return {
        "method": method,
        "initial_accuracy": report.initial_accuracy,
        "final_accuracy": report.final_accuracy,
        "best_accuracy": float(evaluated.max()) if len(evaluated) else report.final_accuracy,
        "initial_correct_len": report.initial_correct_len,
        "final_correct_len": report.final_correct_len,
        "skipped_steps": report.skipped_steps,
    }


def write_report(table: pd.DataFrame, config: RunConfig, path: Path) -> None:
    task = config.task
    lines = [
        "# Method comparison",
        "",
        f"Task `{task.family}` (base {task.base}, chain length {task.chain_length}, max rationale length {task.max_rationale_len}), "
        f"{config.steps} steps of {config.batch_size} queries, learning rate {config.itro.learning_rate}, seed {config.seed}.",
        "",
        table.to_markdown(index=False, floatfmt=".4f"),
        "",
    ]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines))


def write_pins(table: pd.DataFrame, config: RunConfig, path: Path) -> None:
    """Final accuracies per method at the config's seed, read back by the regression test."""
    methods = {row.method: {"final_accuracy": float(row.final_accuracy), "skipped_steps": int(row.skipped_steps)} for row in table.itertuples(index=False)}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"seed": config.seed, "steps": config.steps, "methods": methods}, indent=2, sort_keys=True) + "\n")


def main() -> None:
    """
    Main entry point for the comparison.

    Steps:
    1. Loads the shared configuration (defaults when none is given).
    2. Trains every requested method into its own run directory.
    3. Writes the comparison table and, with --pin, the regression values.
    """
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/itro.yaml")
    ap.add_argument("--methods", default=",".join(DEFAULT_METHODS))
    ap.add_argument("--out-dir", default="runs/compare")
    ap.add_argument("--report", default="reports/comparison.md")
    ap.add_argument("--pin", default=None, help="also write final accuracies as JSON, e.g. tests/data/reference_values.json")
    args = ap.parse_args()

    config = load_config(args.config) if os.path.exists(args.config) else RunConfig()
    out_dir = Path(args.out_dir)
    setup_logging(out_dir)

    rows = [run_method(config, method.strip(), out_dir) for method in args.methods.split(",") if method.strip()]
    table = pd.DataFrame(rows).sort_values("final_accuracy", ascending=False, kind="stable")
    write_report(table, config, Path(args.report))
    if args.pin:
        write_pins(table, config, Path(args.pin))
    print(table.to_string(index=False))


if __name__ == "__main__":
    main()
