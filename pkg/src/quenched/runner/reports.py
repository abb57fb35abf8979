"""Deterministic report emission.

Reports carry no timestamps, host names or worker counts, so repeated runs
of one scenario produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np
import scipy


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def config_hash(config: dict) -> str:
    canonical = json.dumps(_clean(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_report(out_dir, name: str, payload: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(dumps(payload))
    return path


def manifest(config: dict, subcommand: str, outputs: list[str]) -> dict:
    from .. import __version__

    return {
        "scenario": config.get("name"),
        "scenario_hash": config_hash(config),
        "subcommand": subcommand,
        "outputs": sorted(outputs),
        "versions": {
            "quenched": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
