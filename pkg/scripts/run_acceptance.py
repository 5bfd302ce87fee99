#!/usr/bin/env python3
"""Run the acceptance module and print its verdict lines.

    python scripts/run_acceptance.py            # all eight criteria
    python scripts/run_acceptance.py -k "1_ or 8_"
"""
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    cmd = [sys.executable, "-m", "pytest", "-v", str(ROOT / "tests" / "test_acceptance.py"),
           *sys.argv[1:]]
    sys.exit(subprocess.call(cmd, cwd=ROOT))
