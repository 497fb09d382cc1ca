"""Floating-random-walk capacitance extraction.

One walk: sample a point on the Gaussian surface around the master,
take a weighted first step using a stratified SGF and its gradient
kernel, then hop through conductor-free cubes until the walk lands on a
conductor (or the grounded world wall).  The mean of ``weight *
[landed on k]`` estimates the Maxwell capacitance ``C[master, k]``.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _walk as W
from .geometry import Box, Structure
from .rng import Stream, stream_key
from .sgf import SGFCache, ProfileKey, panel_layout
from .microwalk import default_step_cap

log = logging.getLogger(__name__)

MODES = {"fdm": W.FDM, "mw": W.MW, "mwe": W.MWE, "hybrid-mw": W.HYBRID_MW, "hybrid-mwe": W.HYBRID_MWE}
GROUND = "ground"
THREADS_ENV = "FRWMW_THREADS"


@dataclass(frozen=True)
class Config:
    grid_n: int = 24
    expansion: float = 5.0
    mode: str = "hybrid-mwe"
    rel_std_tol: float = 0.01
    min_walks: int = 4096
    max_walks: int = 2_000_000
    batch: int = 1024
    seed: int = 0
    snap_tol: float = 1e-4
    hop_cap: int = 10_000
    gaussian_gap_fraction: float = 0.5
    world_margin: float = 5.0
    memoize: bool = True
    cache_capacity: Optional[int] = None
    solver: str = "cg"

    def __post_init__(self):
        mode = self.mode.lower().replace("_", "-")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if not 0 < self.rel_std_tol < 1:
            raise ValueError("rel_std_tol must lie in (0, 1)")
        if self.grid_n < 2:
            raise ValueError("grid_n must be >= 2")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")
        if not 0 < self.min_walks <= self.max_walks:
            raise ValueError("need 0 < min_walks <= max_walks")
        if self.batch < 1 or self.hop_cap < 1:
            raise ValueError("batch and hop_cap must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not self.snap_tol > 0:
            raise ValueError("snap_tol must be > 0")

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# Gaussian surface


@dataclass(frozen=True)
class GaussianSurface:
    box: Box
    master_id: int
    inflation: float

    @property
    def area_nm2(self):
        sx, sy, sz = self.box.size
        return 2.0 * (sx * sy + sx * sz + sy * sz)

    @property
    def area(self):
        """Total shell area in m^2."""
        return self.area_nm2 * 1e-18

    @property
    def half_width(self):
        return 0.5 * max(self.box.size)


def _box_gap(a: Box, b: Box) -> float:
    return max(max(b.lo[k] - a.hi[k], a.lo[k] - b.hi[k], 0.0) for k in range(3))


def gaussian_surface(s: Structure, fraction: float = 0.5) -> GaussianSurface:
    """Master box inflated by ``fraction`` of its clearance to other conductors and the wall."""
    if not 0 < fraction < 1:
        raise ValueError("gaussian_gap_fraction must lie in (0, 1)")
    master = s.conductor_box(s.master_id)
    clearance = min(
        min(master.lo[k] - s.world.lo[k], s.world.hi[k] - master.hi[k]) for k in range(3)
    )
    for cid, b in s.conductors:
        if cid == s.master_id:
            continue
        g = _box_gap(master, b)
        if g <= 0:
            raise ValueError(f"master conductor {s.master_id} touches conductor {cid}")
        clearance = min(clearance, g)
    if clearance <= 0:
        raise ValueError("master conductor touches the world boundary")
    d = fraction * clearance
    return GaussianSurface(master.inflate(d), s.master_id, d)


def sample_gaussian(surface: GaussianSurface, rng: Stream):
    """Uniform point on the shell.  Returns (point, (axis, sign), total area in m^2)."""
    p = np.empty(3)
    axis, sign, _ = W._shell_point(np.array(surface.box.lo), np.array(surface.box.hi), rng.state, p)
    return p, (int(axis), int(sign)), surface.area


# --------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class WalkEvent:
    kind: str  # "continue", "terminate" or "ground"
    point: Optional[np.ndarray] = None
    conductor_id: Optional[int] = None


@dataclass
class CapacitanceResult:
    master_id: int
    terminals: list  # conductor ids then "ground"
    values: np.ndarray  # farads
    std_errs: np.ndarray  # farads
    walks: int
    converged: bool
    dispatch_stats: dict
    timings: dict
    cache_stats: dict
    aborted: int = 0
    mean_hops: float = 0.0
    config: dict = field(default_factory=dict)

    def index(self, terminal) -> int:
        return self.terminals.index(terminal)

    def value(self, terminal) -> float:
        return float(self.values[self.index(terminal)])

    def std_err(self, terminal) -> float:
        return float(self.std_errs[self.index(terminal)])

    @property
    def self_capacitance(self) -> float:
        return self.value(self.master_id)

    def couplings(self):
        return {t: float(v) for t, v in zip(self.terminals, self.values) if t != self.master_id}

    def to_dict(self, timings: bool = True) -> dict:
        out = {
            "master": self.master_id,
            "capacitance": [
                {"terminal": t, "value": float(v), "std_err": float(e)}
                for t, v, e in zip(self.terminals, self.values, self.std_errs)
            ],
            "walks": self.walks,
            "converged": self.converged,
            "aborted_walks": self.aborted,
            "mean_hops": self.mean_hops,
            "dispatch_stats": self.dispatch_stats,
            "cache": self.cache_stats,
        }
        if timings:
            out["timings"] = self.timings
        return out


# --------------------------------------------------------------------------
# engine


class _Batch:
    def __init__(self, size, n):
        self.phase = np.zeros(size, dtype=np.int64)
        self.resume = np.zeros(size, dtype=np.int64)
        self.pos = np.zeros((size, 3))
        self.normal = np.zeros((size, 2), dtype=np.int64)
        self.keys = np.zeros(size, dtype=np.uint64)
        self.ctr = np.zeros(size, dtype=np.uint64)
        self.weight = np.zeros(size)
        self.term = np.full(size, -1, dtype=np.int64)
        self.hops = np.zeros(size, dtype=np.int64)
        self.stats = np.zeros((size, W.NSTAT), dtype=np.int64)
        self.req_axis = np.zeros(size, dtype=np.int64)
        self.req_codes = np.zeros((size, n), dtype=np.int64)
        self.retry = np.zeros(size, dtype=np.bool_)


def _thread_count():
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


class Engine:
    """Walk machinery bound to one structure and configuration."""

    def __init__(self, structure: Structure, config: Config = Config(), cache: Optional[SGFCache] = None,
                 threads: Optional[int] = None):
        self.structure = structure
        self.config = config
        n = config.grid_n
        if cache is not None and cache.n != n:
            raise ValueError(f"SGF cache holds n={cache.n}, config needs n={n}")
        self.cache = cache if cache is not None else SGFCache(n, config.cache_capacity, config.solver)
        a = structure.arrays
        self.scene = (a.cond_lo, a.cond_hi, a.diel_lo, a.diel_hi, a.diel_eps, a.background, a.world_lo, a.world_hi)
        self.surface = gaussian_surface(structure, config.gaussian_gap_fraction)
        self.shell_lo = np.array(self.surface.box.lo)
        self.shell_hi = np.array(self.surface.box.hi)
        self.snap = config.snap_tol * self.surface.half_width
        self.layout = np.ascontiguousarray(panel_layout(n))
        self.mode = MODES[config.mode]
        self.step_cap = default_step_cap(n)
        self.threads = threads or _thread_count()
        self._memo = [self._new_memo() for _ in range(self.threads)]
        self._gen = [0] * self.threads
        self.tick = 0

    def _new_memo(self):
        n3 = self.config.grid_n ** 3 if self.config.memoize else 1
        return np.empty((n3, 6)), np.full(n3, -1, dtype=np.int64)

    # driver ----------------------------------------------------------------

    def _advance(self, b: _Batch, todo, single_step, worker=0):
        cfg = self.config
        memo_a, memo_gen = self._memo[worker]
        self._gen[worker] = W.advance(
            todo, b.phase, b.resume, b.pos, b.normal, b.keys, b.ctr, b.weight, b.term, b.hops, b.stats,
            b.req_axis, b.req_codes, b.retry,
            cfg.grid_n, self.mode, float(cfg.expansion), self.scene, self.shell_lo, self.shell_hi,
            self.cache.tables, self.layout, self.snap, cfg.hop_cap, cfg.memoize, self.step_cap, self.tick,
            single_step, memo_a, memo_gen, self._gen[worker],
        )

    def _fill_sgf_requests(self, b: _Batch, waiting):
        n = self.config.grid_n
        for wi in waiting:
            key = ProfileKey(n, int(b.req_axis[wi]), tuple(int(c) for c in b.req_codes[wi]))
            self.cache.get(key)
            b.phase[wi] = b.resume[wi]
            b.retry[wi] = True

    def drive(self, b: _Batch, single_step=False):
        todo = np.flatnonzero(b.phase != W.P_DONE)
        while todo.size:
            self.tick += 1
            if self.threads > 1 and todo.size > 1:
                parts = np.array_split(todo, self.threads)
                with ThreadPoolExecutor(self.threads) as ex:
                    list(ex.map(lambda iw: self._advance(b, iw[1], single_step, iw[0]), enumerate(parts)))
            else:
                self._advance(b, todo, single_step)
            need_sgf = np.flatnonzero(b.phase == W.P_NEED_SGF)
            if need_sgf.size:
                self._fill_sgf_requests(b, need_sgf)
            todo = np.flatnonzero(b.phase != W.P_DONE)
        if self.config.cache_capacity is not None:
            self.cache.touch_from_tables()

    def run_walks(self, first: int, count: int) -> _Batch:
        b = _Batch(count, self.config.grid_n)
        seed = np.uint64(self.config.seed)
        for i in range(count):
            b.keys[i] = stream_key(seed, np.uint64(first + i))
        self.drive(b)
        return b

    # single steps -------------------------------------------------------

    def first_transition(self, point, normal, rng: Stream):
        b = _Batch(1, self.config.grid_n)
        b.phase[0] = W.P_FIRST_GIVEN
        b.pos[0] = np.asarray(point, dtype=np.float64)
        b.normal[0] = normal
        b.keys[0], b.ctr[0] = rng.state[0], rng.state[1]
        self.drive(b, single_step=True)
        rng.state[1] = b.ctr[0]
        if b.stats[0, W.S_ABORTED]:
            raise ValueError("degenerate first cube at this point (half-width below snap tolerance)")
        branch = int(np.argmax(b.stats[0, :4]))
        return b.pos[0].copy(), float(b.weight[0]), FIRST_BRANCHES[branch]

    def transition(self, point, rng: Stream) -> WalkEvent:
        b = _Batch(1, self.config.grid_n)
        b.phase[0] = W.P_WALK
        b.pos[0] = np.asarray(point, dtype=np.float64)
        b.keys[0], b.ctr[0] = rng.state[0], rng.state[1]
        self.drive(b, single_step=True)
        rng.state[1] = b.ctr[0]
        self.last_stats = b.stats[0].copy()
        t = int(b.term[0])
        nc = len(self.structure.conductors)
        if t < 0:
            return WalkEvent("continue", b.pos[0].copy())
        if t == nc:
            return WalkEvent("ground")
        return WalkEvent("terminate", conductor_id=int(self.structure.arrays.cond_ids[t]))


FIRST_BRANCHES = ("stratified", "shrink", "layer_homogenized", "full_homogenized")


def first_transition(s: Structure, point, normal, rng: Stream, config: Config = Config(), engine: Optional[Engine] = None):
    """Weighted first step from a Gaussian-surface point.

    ``normal`` is ``(axis, sign)`` of the shell face.  Returns
    ``(next_point, weight, branch)``; the weight is in farads per unit
    landing potential.
    """
    engine = engine or Engine(s, config)
    return engine.first_transition(point, normal, rng)


def transition(s: Structure, point, rng: Stream, config: Config = Config(), engine: Optional[Engine] = None) -> WalkEvent:
    engine = engine or Engine(s, config)
    return engine.transition(point, rng)


def _dispatch(stats: np.ndarray) -> dict:
    tot = stats.sum(axis=0)
    return {
        "first": {
            "stratified": int(tot[W.S_FIRST_STRAT]),
            "shrink": int(tot[W.S_FIRST_SHRINK]),
            "layer_homogenized": int(tot[W.S_FIRST_LAYER]),
            "full_homogenized": int(tot[W.S_FIRST_FULL]),
        },
        "subsequent": {
            "cached_stratified": int(tot[W.S_CACHED]),
            "microwalk": int(tot[W.S_MW]),
            "microwalk_e": int(tot[W.S_MWE]),
            "fdm": int(tot[W.S_FDM]),
        },
        "microwalk_e_conductor_absorptions": int(tot[W.S_MWE_ABSORBED]),
        "microwalk_e_fallbacks": int(tot[W.S_MWE_FALLBACK]),
        "micro_steps": int(tot[W.S_MICRO_STEPS]),
        "gaussian_resamples": int(tot[W.S_RESAMPLES]),
    }


def extract(s: Structure, config: Config = Config(), cache: Optional[SGFCache] = None, engine: Optional[Engine] = None,
            progress=None) -> CapacitanceResult:
    """Run walks in batches until the self and largest coupling capacitances converge."""
    t_start = time.perf_counter()
    c_start = W.now_cycles()
    engine = engine or Engine(s, config, cache)
    ids = s.conductor_ids
    terminals = ids + [GROUND]
    nt = len(terminals)
    mi = ids.index(s.master_id)
    s1 = np.zeros(nt)
    s2 = np.zeros(nt)
    stats = np.zeros(W.NSTAT, dtype=np.int64)
    hops = 0
    done = 0
    converged = False
    mean = se = np.zeros(nt)
    while done < config.max_walks:
        count = min(config.batch, config.max_walks - done)
        b = engine.run_walks(done, count)
        s1 += np.bincount(b.term, weights=b.weight, minlength=nt)
        s2 += np.bincount(b.term, weights=b.weight * b.weight, minlength=nt)
        stats += b.stats.sum(axis=0)
        hops += int(b.hops.sum())
        done += count
        mean = s1 / done
        var = np.maximum(s2 - s1 * s1 / done, 0.0) / max(done - 1, 1)
        se = np.sqrt(var / done)
        converged = _converged(mean, se, mi, len(ids), config.rel_std_tol)
        if progress is not None:
            progress(done, mean, se)
        if done >= config.min_walks and converged:
            break
    t_total = time.perf_counter() - t_start
    rate = (W.now_cycles() - c_start) / t_total if t_total > 0 else 1.0
    hits = int(stats[W.S_HITS])
    misses = int(stats[W.S_MISSES])
    dispatch = _dispatch(stats[None, :])
    result = CapacitanceResult(
        master_id=s.master_id,
        terminals=terminals,
        values=mean,
        std_errs=se,
        walks=done,
        converged=bool(converged),
        dispatch_stats=dispatch,
        timings={
            "t_mw": float(stats[W.S_MW_CYCLES] / rate),
            "t_fdm": float(stats[W.S_FDM_CYCLES] / rate),
            "t_total": t_total,
        },
        cache_stats={
            "hits": hits,
            "misses": misses,
            "hit_rate": hits / (hits + misses) if hits + misses else 1.0,
            "entries": len(engine.cache),
        },
        aborted=int(stats[W.S_ABORTED]),
        mean_hops=hops / done,
        config=config.to_dict(),
    )
    if result.aborted:
        log.warning("%d walks aborted (hop cap, step cap or degenerate first cube)", result.aborted)
    return result


def _converged(mean, se, mi, n_cond, tol):
    if mean[mi] <= 0 or se[mi] >= tol * mean[mi]:
        return False
    others = [k for k in range(n_cond) if k != mi]
    if not others:
        return True
    k = max(others, key=lambda j: abs(mean[j]))
    return mean[k] != 0 and se[k] < tol * abs(mean[k])
