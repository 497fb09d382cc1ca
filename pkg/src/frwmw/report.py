"""Machine-readable run reports."""

from __future__ import annotations

import json
import math

import numpy as np

SCHEMA_VERSION = "1.0"


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def make_report(command: str, config: dict, results: dict, passed=None) -> dict:
    rep = {"schema_version": SCHEMA_VERSION, "command": command, "config": _plain(config), "results": _plain(results)}
    if passed is not None:
        rep["passed"] = bool(passed)
    return rep


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
