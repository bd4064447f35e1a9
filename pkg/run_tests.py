#!/usr/bin/env python
"""Minimal pytest runner setup. Extra arguments go to pytest (e.g. ``-m slow``)."""

import sys
from pathlib import Path

# Add src to path
ROOT = Path(__file__).resolve().parent
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

if __name__ == "__main__":
    try:
        import pytest
    except ImportError:
        print("pytest is not installed. Install it with: pip install -e .[test]")
        sys.exit(1)
    sys.exit(pytest.main(["tests/", "-ra", *sys.argv[1:]]))
