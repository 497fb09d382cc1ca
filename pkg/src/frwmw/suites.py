"""SGF validation suites and the scaling benchmark."""

from __future__ import annotations

import itertools
import statistics
import time

import numpy as np

from .geometry import DielectricGrid
from .microwalk import sample_exits
from .oracle import DENSE_CAP, compare_distribution, exact_absorption_row, random_block_grid, random_voxel_grid
from .sgf import assemble_system, expected_steps, panel_layout, solve_sgf

TV_LIMIT = 0.01
STEP_SIGMAS = 3.0
UNIFORM_STEP_RATIO = 0.3373


def random_grid(n, seed, kind="voxel"):
    if kind == "voxel":
        return random_voxel_grid(n, seed)
    if kind == "blocks":
        return random_block_grid(n, seed)
    raise ValueError(f"unknown grid kind {kind!r}")


def exact_row(grid: DielectricGrid) -> np.ndarray:
    if grid.n <= DENSE_CAP:
        return exact_absorption_row(grid)
    return solve_sgf(assemble_system(grid), kernels=False, method="direct").probs


def exit_sampler(grid: DielectricGrid, memoize=True):
    def draw(count, seed):
        kinds, targets, _ = sample_exits(grid, count, seed=seed, memoize=memoize)
        return targets

    return draw


def lattice_symmetries(n):
    """Signed axis permutations mapping the start-node lattice onto itself."""
    flips = [(1, 1, 1)] if n % 2 == 0 else list(itertools.product((1, -1), repeat=3))
    return [(perm, sgn) for perm in itertools.permutations(range(3)) for sgn in flips]


def symmetry_error(probs, n) -> float:
    """Largest change of a uniform-cube SGF under the lattice's symmetry group."""
    pts = panel_layout(n)
    key = {tuple(np.round(2 * p).astype(int)): i for i, p in enumerate(pts)}
    worst = 0.0
    for perm, sgn in lattice_symmetries(n):
        moved = pts[:, perm] * np.array(sgn)
        idx = np.array([key[tuple(np.round(2 * p).astype(int))] for p in moved])
        worst = max(worst, float(np.abs(probs[idx] - probs).max()))
    return worst


def theorem_suite(n=4, grids=20, samples=1_000_000, seed=0, kind="voxel"):
    rows = []
    for g in range(grids):
        grid = random_grid(n, seed + g, kind)
        exact = exact_row(grid)
        rep = compare_distribution(exact, exit_sampler(grid), samples, rng=seed * 1000 + g)
        rows.append({"grid": g, "tv": rep.tv_distance, "chi2": rep.gof_statistic, "dof": rep.dof,
                     "pass": rep.tv_distance <= TV_LIMIT})
    return {"n": n, "samples": samples, "tv_limit": TV_LIMIT, "grids": rows, "pass": all(r["pass"] for r in rows)}


def step_suite(n_values=(4, 8), grids=10, transits=100_000, seed=0, kind="voxel"):
    rows = []
    for g in range(grids):
        n = n_values[g % len(n_values)]
        grid = random_grid(n, seed + 100 + g, kind)
        exact = expected_steps(assemble_system(grid), method="direct")
        _, _, steps = sample_exits(grid, transits, seed=seed + 7919 * (g + 1))
        mean = float(steps.mean())
        se = float(steps.std(ddof=1) / np.sqrt(transits))
        z = (mean - exact) / se
        rows.append({"grid": g, "n": n, "exact": exact, "mean": mean, "std_err": se, "z": z,
                     "pass": abs(z) <= STEP_SIGMAS})
    return {"transits": transits, "grids": rows, "pass": all(r["pass"] for r in rows)}


def uniform_step_ratio(N=24):
    grid = DielectricGrid(np.ones((N, N, N)))
    e = expected_steps(assemble_system(grid))
    ratio = e / N ** 2
    return {"N": N, "expected_steps": e, "ratio": ratio, "target": UNIFORM_STEP_RATIO,
            "pass": abs(ratio / UNIFORM_STEP_RATIO - 1) <= 0.05}


def property_suite(n=4, grids=5, seed=0):
    rows = []
    for g in range(grids):
        grid = random_grid(n, seed + 200 + g)
        sgf = solve_sgf(assemble_system(grid))
        rows.append({
            "grid": g,
            "sum_error": abs(float(sgf.probs.sum()) - 1.0),
            "min_prob": float(sgf.probs.min()),
            "kernel_sum": float(np.abs(sgf.grad_kernels.sum(axis=1)).max()),
            "dense_diff": float(np.abs(sgf.probs - exact_absorption_row(grid)).max()) if n <= 6 else None,
        })
    uni = solve_sgf(assemble_system(DielectricGrid(np.ones((n, n, n))))).probs
    sym = symmetry_error(uni, n)
    ok = all(r["sum_error"] <= 1e-9 and r["min_prob"] >= 0 and r["kernel_sum"] <= 1e-9
             and (r["dense_diff"] is None or r["dense_diff"] <= 1e-8) for r in rows)
    return {"grids": rows, "symmetry_error": sym, "pass": ok and sym <= 1e-8}


def validate_sgf(n=4, grids=20, samples=1_000_000, seed=0, step_grids=10, step_transits=100_000, kind="voxel"):
    out = {
        "theorem": theorem_suite(n, grids, samples, seed, kind),
        "steps": step_suite((4, 8), step_grids, step_transits, seed, kind),
        "uniform_ratio": uniform_step_ratio(24),
        "properties": property_suite(n, 5, seed),
    }
    out["pass"] = all(v["pass"] for v in out.values())
    return out


# --------------------------------------------------------------------------
# scaling benchmark


def _median_time(fn, reps):
    fn()  # warmup, discarded
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def bench_scaling(n_list=(8, 16, 32, 64), fdm_n_list=(8, 16, 32), transits=2000, reps=5, seed=0,
                  uniform=True, fdm_method="direct", speedup_n=24):
    """Per-transition cost of MicroWalk vs an FDM solve, with fitted log-log slopes."""
    rows = []
    for N in sorted(set(n_list) | set(fdm_n_list)):
        grid = DielectricGrid(np.ones((N, N, N))) if uniform else random_block_grid(N, seed)
        row = {"N": N}
        if N in n_list:
            count = max(50, int(transits * (8 / N) ** 2))
            t = _median_time(lambda: sample_exits(grid, count, seed=seed), reps)
            row["microwalk_s"] = t / count
            row["expected_steps"] = expected_steps(assemble_system(grid))
        if N in fdm_n_list:
            r = reps if N <= 16 else max(1, reps // 2 + 1)
            row["fdm_s"] = _median_time(
                lambda: solve_sgf(assemble_system(grid), kernels=False, method=fdm_method), r)
        rows.append(row)
    mw = [r for r in rows if "microwalk_s" in r]
    fd = [r for r in rows if "fdm_s" in r]
    out = {"rows": rows}
    if len(mw) >= 2:
        out["steps_slope"] = loglog_slope([r["N"] for r in mw], [r["expected_steps"] for r in mw])
        out["microwalk_slope"] = loglog_slope([r["N"] for r in mw], [r["microwalk_s"] for r in mw])
    if len(fd) >= 2:
        out["fdm_slope"] = loglog_slope([r["N"] for r in fd], [r["fdm_s"] for r in fd])
    if speedup_n:
        out["speedup"] = speedup_at(speedup_n, transits, reps, seed, fdm_method)
    return out


def speedup_at(N=24, transits=2000, reps=5, seed=0, fdm_method="direct"):
    grid = DielectricGrid(np.ones((N, N, N)))
    count = transits
    mw = _median_time(lambda: sample_exits(grid, count, seed=seed), reps) / count
    fdm = _median_time(lambda: solve_sgf(assemble_system(grid), kernels=False, method=fdm_method), reps)
    return {"N": N, "microwalk_s": mw, "fdm_s": fdm, "speedup": fdm / mw}
