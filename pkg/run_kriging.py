#!/usr/bin/env python3
"""
funkrig command-line runner.

Usage:
    python run_kriging.py generate --out-dir out --keep-lo 0.4 --keep-hi 1.0
    python run_kriging.py fit --config out/project.cfg
    python run_kriging.py predict --model out/model.json --query queries.csv
"""

import os
import sys

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
