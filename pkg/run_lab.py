#!/usr/bin/env python3
"""Run the memory-persistent navigation lab."""

import os
import sys

# Add the current directory to the Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from main import cli  # noqa: E402

if __name__ == '__main__':
    cli()
