"""Stochastic finite differences: transitions without solving for the SGF.

A transit is a lattice random walk from the start node; at each interior
node the six neighbours are chosen with probability proportional to their
finite-difference coefficients, and the walk stops on the first boundary
node (a cube-surface panel or, in expanded cubes, a conductor face).  The
exit panel is distributed exactly like the FDM surface Green's function
of the same lattice.

Kernels read permittivity through the compressed cell grid produced by
:func:`frwmw.geometry.compress_cube`, so nothing of size n^3 is built per
transit.  A materialized :class:`DielectricGrid` is passed as the trivial
compression (identity maps).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .geometry import (
    DielectricGrid,
    Structure,
    compress_cube,
    lattice_for_point,
    wall_distance,
)
from .rng import Stream, next_uniform, stream_key
from .sgf import DIRECTIONS, panel_layout, surface_panel

EXIT_PANEL = 0
EXIT_CONDUCTOR = 1
EXIT_CAPPED = 2


@njit(cache=True)
def _alphas(i, j, k, n, maps, ceps, ccond, out):
    ev = ceps[maps[0, i], maps[1, j], maps[2, k]]
    for d in range(6):
        a = i + DIRECTIONS[d, 0]
        b = j + DIRECTIONS[d, 1]
        c = k + DIRECTIONS[d, 2]
        if a < 0 or a >= n or b < 0 or b >= n or c < 0 or c >= n:
            out[d] = 1.0
            continue
        ca, cb, cc = maps[0, a], maps[1, b], maps[2, c]
        if ccond[ca, cb, cc] >= 0:
            out[d] = 1.0
        else:
            e = ceps[ca, cb, cc]
            out[d] = e / (e + ev)


@njit(cache=True)
def lattice_walk(n, maps, ceps, ccond, st, memo_a, memo_gen, gen, use_memo, step_cap, out):
    """Walk from the start node to absorption.

    ``out`` receives (kind, panel-or-conductor index, i, j, k, direction)
    where (i, j, k) is the last interior node.  Returns the step count.
    """
    i = n // 2
    j = n // 2
    k = n // 2
    alpha = np.empty(6)
    steps = 0
    while True:
        if steps >= step_cap:
            out[0] = EXIT_CAPPED
            return steps
        steps += 1
        v = (i * n + j) * n + k
        if use_memo:
            if memo_gen[v] == gen:
                for d in range(6):
                    alpha[d] = memo_a[v, d]
            else:
                _alphas(i, j, k, n, maps, ceps, ccond, alpha)
                for d in range(6):
                    memo_a[v, d] = alpha[d]
                memo_gen[v] = gen
        else:
            _alphas(i, j, k, n, maps, ceps, ccond, alpha)
        total = alpha[0] + alpha[1] + alpha[2] + alpha[3] + alpha[4] + alpha[5]
        u = next_uniform(st) * total
        d = 5
        acc = 0.0
        for q in range(5):
            acc += alpha[q]
            if u < acc:
                d = q
                break
        a = i + DIRECTIONS[d, 0]
        b = j + DIRECTIONS[d, 1]
        c = k + DIRECTIONS[d, 2]
        if a < 0 or a >= n or b < 0 or b >= n or c < 0 or c >= n:
            out[0] = EXIT_PANEL
            out[1] = surface_panel(i, j, k, d, n)
            out[2] = i
            out[3] = j
            out[4] = k
            out[5] = d
            return steps
        cnd = ccond[maps[0, a], maps[1, b], maps[2, c]]
        if cnd >= 0:
            out[0] = EXIT_CONDUCTOR
            out[1] = cnd
            out[2] = i
            out[3] = j
            out[4] = k
            out[5] = d
            return steps
        i = a
        j = b
        k = c


def identity_maps(n):
    return np.tile(np.arange(n, dtype=np.int64), (3, 1))


def _grid_arrays(grid: DielectricGrid):
    n = grid.n
    cond = np.full(grid.eps.shape, -1, dtype=np.int64) if grid.conductor_mask is None else grid.conductor_mask
    return identity_maps(n), grid.eps, cond


@njit(cache=True)
def _sample_many(n, maps, ceps, ccond, seed, first, count, use_memo, step_cap, kinds, targets, steps):
    memo_a = np.empty((n * n * n, 6)) if use_memo else np.empty((1, 6))
    memo_gen = np.full(n * n * n if use_memo else 1, -1, dtype=np.int64)
    st = np.zeros(2, dtype=np.uint64)
    out = np.zeros(6, dtype=np.int64)
    for t in range(count):
        st[0] = stream_key(np.uint64(seed), np.uint64(first + t))
        st[1] = np.uint64(0)
        steps[t] = lattice_walk(n, maps, ceps, ccond, st, memo_a, memo_gen, t, use_memo, step_cap, out)
        kinds[t] = out[0]
        targets[t] = out[1]


def default_step_cap(n):
    return 1000 * n * n


def sample_exits(grid: DielectricGrid, count: int, seed: int = 0, memoize: bool = True, step_cap=None, first: int = 0):
    """Run ``count`` independent transits; transit ``t`` uses stream ``(seed, first + t)``.

    Returns ``(kinds, targets, steps)``; for conductor exits ``targets``
    holds the conductor id from the grid's mask.
    """
    maps, ceps, cond = _grid_arrays(grid)
    kinds = np.empty(count, dtype=np.int64)
    targets = np.empty(count, dtype=np.int64)
    steps = np.empty(count, dtype=np.int64)
    cap = default_step_cap(grid.n) if step_cap is None else int(step_cap)
    _sample_many(grid.n, maps, ceps, cond, np.uint64(seed), first, count, memoize, cap, kinds, targets, steps)
    if np.any(kinds == EXIT_CAPPED):
        raise RuntimeError("micro walk exceeded its step cap; lattice is likely malformed")
    return kinds, targets, steps


def neighbor_weights(grid: DielectricGrid, node) -> np.ndarray:
    """Normalized neighbour probabilities in direction order -x, +x, -y, +y, -z, +z."""
    maps, ceps, cond = _grid_arrays(grid)
    i, j, k = (int(v) for v in node)
    n = grid.n
    if not (0 <= i < n and 0 <= j < n and 0 <= k < n) or cond[i, j, k] >= 0:
        raise ValueError("node must be an interior lattice node")
    alpha = np.empty(6)
    _alphas(i, j, k, n, maps, ceps, cond, alpha)
    return alpha / alpha.sum()


@dataclass(frozen=True)
class Exit:
    kind: str  # "panel" or "conductor"
    point: np.ndarray
    panel: Optional[int] = None
    conductor_id: Optional[int] = None
    steps: int = 0


def _as_stream(rng):
    if isinstance(rng, Stream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return Stream.for_walk(int(rng), 0)
    raise TypeError("rng must be a frwmw.rng.Stream or an integer seed")


def _walk_once(n, maps, ceps, cond, stream, memoize, step_cap):
    out = np.zeros(6, dtype=np.int64)
    if memoize:
        memo_a = np.empty((n ** 3, 6))
        memo_gen = np.full(n ** 3, -1, dtype=np.int64)
    else:
        memo_a = np.empty((1, 6))
        memo_gen = np.full(1, -1, dtype=np.int64)
    steps = lattice_walk(n, maps, ceps, cond, stream.state, memo_a, memo_gen, 0, memoize, step_cap, out)
    if out[0] == EXIT_CAPPED:
        raise RuntimeError(f"micro walk exceeded its step cap of {step_cap}")
    return out, int(steps)


def microwalk_transit(grid: DielectricGrid, rng, memoize: bool = True, step_cap=None) -> Exit:
    if grid.conductor_mask is not None and np.any(grid.conductor_mask >= 0):
        raise ValueError("grid holds conductors; use microwalk_e_transit")
    stream = _as_stream(rng)
    maps, ceps, cond = _grid_arrays(grid)
    cap = default_step_cap(grid.n) if step_cap is None else int(step_cap)
    out, steps = _walk_once(grid.n, maps, ceps, cond, stream, memoize, cap)
    panel = int(out[1])
    point = grid.start_point + panel_layout(grid.n)[panel] * grid.pitch
    return Exit("panel", point, panel=panel, steps=steps)


def expanded_lattice(s: Structure, center, base_half_width, expansion, n):
    """Low corner and pitch of the expanded cube (clipped to the world, never to conductors)."""
    a = s.arrays
    center = np.asarray(center, dtype=np.float64)
    w = min(expansion * base_half_width, wall_distance(center, a.world_lo, a.world_hi))
    return lattice_for_point(center, w, n)


def microwalk_e_transit(
    s: Structure, center, base_half_width: float, expansion: float, n: int, rng, memoize: bool = True, step_cap=None
) -> Exit:
    if expansion < 1:
        raise ValueError("expansion must be >= 1")
    stream = _as_stream(rng)
    a = s.arrays
    lo, h = expanded_lattice(s, center, base_half_width, expansion, n)
    maps, ceps, cond = compress_cube(
        lo, h, n, a.diel_lo, a.diel_hi, a.diel_eps, a.background, a.cond_lo, a.cond_hi, True
    )
    c = n // 2
    if cond[maps[0, c], maps[1, c], maps[2, c]] >= 0:
        raise ValueError("start node is inside a conductor at this resolution; fall back to plain MicroWalk")
    cap = default_step_cap(n) if step_cap is None else int(step_cap)
    out, steps = _walk_once(n, maps, ceps, cond, stream, memoize, cap)
    start = lo + (c + 0.5) * h
    if out[0] == EXIT_PANEL:
        panel = int(out[1])
        return Exit("panel", start + panel_layout(n)[panel] * h, panel=panel, steps=steps)
    node = out[2:5].astype(float) + 0.5 * DIRECTIONS[out[5]]
    point = lo + (node + 0.5) * h
    return Exit("conductor", point, conductor_id=int(a.cond_ids[out[1]]), steps=steps)
