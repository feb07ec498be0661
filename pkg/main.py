#!/usr/bin/env python3
"""
VICM: varying index coefficient quantile regression.
Main entry point.
"""

import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from batch.commands import run_command


if __name__ == "__main__":
    sys.exit(run_command(sys.argv[1:]))
