#!/usr/bin/env python3
"""
Thin runner for checkouts without an installed console script.

    python scripts/run_lab.py train --config configs/itro.yaml
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from rationale_lab.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
