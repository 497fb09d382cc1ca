"""Synthetic benchmark structures (nanometers)."""

from __future__ import annotations

import json

from .geometry import Structure, parse_structure

FAR = 1e5  # "infinite" layer extent; clipped to the world on load


def plate_pair(eps=3.9):
    """Two 100x100 plates, 20 nm apart, in a uniform dielectric."""
    return {
        "units": "nm",
        "background_eps": eps,
        "conductors": [
            {"id": 1, "lo": [0, 0, 0], "hi": [100, 100, 10]},
            {"id": 2, "lo": [0, 0, 30], "hi": [100, 100, 40]},
        ],
        "master": 1,
    }


def layered_stack(eps_low=3.9, eps_high=7.0):
    """Two parallel lines under a crossing line, in a two-layer stack split at z=20."""
    return {
        "units": "nm",
        "background_eps": eps_low,
        "dielectrics": [{"lo": [-FAR, -FAR, 20], "hi": [FAR, FAR, FAR], "eps": eps_high}],
        "conductors": [
            {"id": 1, "lo": [0, 0, 0], "hi": [120, 20, 10]},
            {"id": 2, "lo": [0, 40, 0], "hi": [120, 60, 10]},
            {"id": 3, "lo": [50, -20, 30], "hi": [70, 80, 40]},
        ],
        "master": 1,
    }


def crossing_high_k(eps=3.9, eps_block=22.0):
    """Two crossing lines with a high-k block filling part of the gap at the crossing."""
    return {
        "units": "nm",
        "background_eps": eps,
        "dielectrics": [{"lo": [40, -10, 10], "hi": [80, 30, 30], "eps": eps_block}],
        "conductors": [
            {"id": 1, "lo": [0, 0, 0], "hi": [120, 20, 10]},
            {"id": 2, "lo": [50, -40, 30], "hi": [70, 60, 40]},
        ],
        "master": 1,
    }


def coated_staircase(eps=3.9, eps_coat=7.0, coat=5.0):
    """Three lines stepping up in x and z, each wrapped in a conformal coating."""
    lines = [
        ([0, 0, 0], [20, 100, 10]),
        ([40, 0, 20], [60, 100, 30]),
        ([80, 0, 40], [100, 100, 50]),
    ]
    return {
        "units": "nm",
        "background_eps": eps,
        "dielectrics": [
            {"lo": [lo[0] - coat, lo[1] - coat, lo[2] - coat], "hi": [hi[0] + coat, hi[1] + coat, hi[2] + coat], "eps": eps_coat}
            for lo, hi in lines
        ],
        "conductors": [{"id": i + 1, "lo": lo, "hi": hi} for i, (lo, hi) in enumerate(lines)],
        "master": 2,
    }


BENCHMARKS = {
    "plate_pair": plate_pair,
    "layered_stack": layered_stack,
    "crossing_high_k": crossing_high_k,
    "coated_staircase": coated_staircase,
}


def benchmark(name: str) -> Structure:
    return parse_structure(json.dumps(BENCHMARKS[name]()))
