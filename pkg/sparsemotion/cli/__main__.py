#!/usr/bin/env python3
"""
sparse-motion CLI module main entry point.

This allows the CLI to be run as:
    python -m sparsemotion.cli <command>
"""

import os
import sys

# Add the parent directory to the path so we can import sparsemotion modules
sys.path.insert(
    0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
)

from sparsemotion.cli.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
