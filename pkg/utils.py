"""Utility functions for the memory-persistent navigation lab."""

import subprocess
from pathlib import Path

import numpy as np

__version__ = '1.0.0'


def ensure_directory_exists(path):
    """Ensure a directory exists, creating it if necessary."""
    Path(path).mkdir(parents=True, exist_ok=True)


def make_rng(*parts):
    """Generator seeded from a tuple of integers (seed, scene index, ...)."""
    return np.random.default_rng(np.random.SeedSequence([abs(int(p)) for p in parts]))


def get_version():
    """Package version, suffixed with ``git describe`` output when available."""
    try:
        described = subprocess.run(
            ['git', 'describe', '--always', '--dirty', '--tags'],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5, check=False,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    tag = described.stdout.strip()
    return f"{__version__}+{tag}" if described.returncode == 0 and tag else __version__


def format_mean_std(values):
    """Mean and population stdev of a list, NaN-safe for empty input."""
    if not values:
        return float('nan'), float('nan')
    array = np.asarray(values, dtype=np.float64)
    return float(array.mean()), float(array.std())
