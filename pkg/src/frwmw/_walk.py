"""Compiled walk loop.

Walks are resumable state machines.  A walk that needs an SGF missing
from the cache rewinds its random stream to the start of the current
step, records the request and suspends; the driver solves and inserts the
SGF and re-enters.
Because the rewind restores the exact stream position, results do not
depend on cache state.
"""

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.core import cgutils
from numba.extending import intrinsic

from .geometry import (
    GENERAL,
    UNIFORM,
    classify_cells,
    compress_cube,
    conductor_index_at,
    lattice_for_point,
    max_free,
    wall_distance,
)
from .microwalk import EXIT_CAPPED, EXIT_CONDUCTOR, EXIT_PANEL, lattice_walk
from .rng import next_uniform
from .sgf import DIRECTIONS, find_slot, profile_codes, profile_hash, surface_panel

EPS0 = 8.8541878128e-12

# modes
FDM, MW, MWE, HYBRID_MW, HYBRID_MWE = 0, 1, 2, 3, 4

# phases
P_START, P_WALK, P_DONE, P_NEED_SGF, P_FIRST_GIVEN = 0, 1, 2, 3, 5

# per-walk statistics columns
S_FIRST_STRAT, S_FIRST_SHRINK, S_FIRST_LAYER, S_FIRST_FULL = 0, 1, 2, 3
S_CACHED, S_MW, S_MWE, S_FDM = 4, 5, 6, 7
S_HITS, S_MISSES, S_MICRO_STEPS, S_RESAMPLES = 8, 9, 10, 11
S_ABORTED, S_MWE_FALLBACK, S_MW_CYCLES, S_HOPS = 12, 13, 14, 15
S_MWE_ABSORBED, S_FDM_CYCLES = 16, 17
NSTAT = 18

SHRINK_MIN = 0.3
SHRINK_STEP = 0.05
LAYER_R2 = 0.5
MAX_RESAMPLE = 100


@intrinsic
def cycles(typingctx):
    sig = types.int64()

    def codegen(context, builder, signature, args):
        fnty = ir.FunctionType(ir.IntType(64), [])
        fn = cgutils.get_or_insert_function(builder.module, fnty, "llvm.readcyclecounter")
        return builder.call(fn, [])

    return sig, codegen


@njit(cache=True)
def _slot(axis, layers, index, slot_axis, slot_codes):
    codes = profile_codes(layers)
    if np.all(codes == codes[0]):
        axis = 2
    h = profile_hash(axis, codes)
    return find_slot(index, h, axis, codes, slot_axis, slot_codes), axis


@njit(cache=True)
def _layers(maps, ceps, axis, n):
    out = np.empty(n)
    for i in range(n):
        if axis == 0:
            out[i] = ceps[maps[0, i], 0, 0]
        elif axis == 1:
            out[i] = ceps[0, maps[1, i], 0]
        else:
            out[i] = ceps[0, 0, maps[2, i]]
    return out


@njit(cache=True)
def _cell_sizes(maps, k, m):
    size = np.zeros(m, dtype=np.int64)
    for i in range(maps.shape[1]):
        size[maps[k, i]] += 1
    return size


@njit(cache=True)
def _homogenize(maps, ceps, n):
    """Best slice-averaged profile.  Returns (axis, r2, layers, mean)."""
    sx, sy, sz = ceps.shape
    wx = _cell_sizes(maps, 0, sx)
    wy = _cell_sizes(maps, 1, sy)
    wz = _cell_sizes(maps, 2, sz)
    tot_w = 0.0
    tot = 0.0
    for a in range(sx):
        for b in range(sy):
            for c in range(sz):
                w = float(wx[a] * wy[b] * wz[c])
                tot_w += w
                tot += w * ceps[a, b, c]
    mean = tot / tot_w
    var = 0.0
    for a in range(sx):
        for b in range(sy):
            for c in range(sz):
                w = float(wx[a] * wy[b] * wz[c])
                var += w * (ceps[a, b, c] - mean) ** 2
    best_axis = 2
    best_r2 = -1.0
    best = np.full(n, mean)
    for axis in range(3):
        m = ceps.shape[axis]
        sw = np.zeros(m)
        se = np.zeros(m)
        for a in range(sx):
            for b in range(sy):
                for c in range(sz):
                    w = float(wx[a] * wy[b] * wz[c])
                    s = a if axis == 0 else (b if axis == 1 else c)
                    sw[s] += w
                    se[s] += w * ceps[a, b, c]
        avg = se / sw
        res = 0.0
        for a in range(sx):
            for b in range(sy):
                for c in range(sz):
                    w = float(wx[a] * wy[b] * wz[c])
                    s = a if axis == 0 else (b if axis == 1 else c)
                    res += w * (ceps[a, b, c] - avg[s]) ** 2
        r2 = 1.0 - res / var if var > 0 else 1.0
        if r2 > best_r2:
            best_r2 = r2
            best_axis = axis
            for i in range(n):
                best[i] = avg[maps[axis, i]]
    return best_axis, best_r2, best, mean


@njit(cache=True)
def _sample_cdf(cdf, u):
    lo = 0
    hi = cdf.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True)
def _shell_point(shell_lo, shell_hi, st, p):
    """Uniform point on the box shell; returns (axis, sign, area)."""
    size = shell_hi - shell_lo
    areas = np.empty(3)
    areas[0] = size[1] * size[2]
    areas[1] = size[0] * size[2]
    areas[2] = size[0] * size[1]
    total = 2.0 * (areas[0] + areas[1] + areas[2])
    u = next_uniform(st) * total
    face = 5
    acc = 0.0
    for f in range(6):
        acc += areas[f // 2]
        if u < acc:
            face = f
            break
    axis = face // 2
    sign = 1 if face % 2 == 1 else -1
    for k in range(3):
        if k == axis:
            p[k] = shell_hi[k] if sign > 0 else shell_lo[k]
        else:
            p[k] = shell_lo[k] + next_uniform(st) * size[k]
    return axis, sign, total


@njit(cache=True)
def _first_transition(
    p, axis, sign, area_nm2, st, n, scene, tables, layout, snap, req_codes, stats_row, newpos, tick
):
    """Status: 0 done (returns weight), 1 need SGF, 2 degenerate cube."""
    cond_lo, cond_hi, diel_lo, diel_hi, diel_eps, bg, wlo, whi = scene
    index, slot_axis, slot_codes, slot_probs, slot_cdf, slot_kern, slot_used = tables
    w, near = max_free(p, cond_lo, cond_hi, wlo, whi)
    if w < snap:
        return 2, 0.0, 0
    lo, h = lattice_for_point(p, w, n)
    maps, ceps, ccond = compress_cube(lo, h, n, diel_lo, diel_hi, diel_eps, bg, cond_lo, cond_hi, False)
    kind, saxis = classify_cells(ceps, ccond)
    c = n // 2
    branch = S_FIRST_STRAT
    if kind != GENERAL:
        layers = _layers(maps, ceps, 2 if kind == UNIFORM else saxis, n)
        prof_axis = 2 if kind == UNIFORM else saxis
    else:
        found = False
        f = 1.0 - SHRINK_STEP
        while f >= SHRINK_MIN - 1e-12:
            lo2, h2 = lattice_for_point(p, f * w, n)
            m2, ce2, cc2 = compress_cube(lo2, h2, n, diel_lo, diel_hi, diel_eps, bg, cond_lo, cond_hi, False)
            k2, a2 = classify_cells(ce2, cc2)
            if k2 != GENERAL:
                found = True
                h = h2
                prof_axis = 2 if k2 == UNIFORM else a2
                layers = _layers(m2, ce2, prof_axis, n)
                branch = S_FIRST_SHRINK
                break
            f -= SHRINK_STEP
        if not found:
            hax, r2, hl, mean = _homogenize(maps, ceps, n)
            if r2 >= LAYER_R2:
                prof_axis = hax
                layers = hl
                branch = S_FIRST_LAYER
            else:
                prof_axis = 2
                layers = np.full(n, mean)
                branch = S_FIRST_FULL
    slot, prof_axis = _slot(prof_axis, layers, index, slot_axis, slot_codes)
    if slot < 0:
        codes = profile_codes(layers)
        for i in range(n):
            req_codes[i] = codes[i]
        return 1, float(prof_axis), 0
    slot_used[slot] = tick
    stats_row[S_HITS] += 1
    x = _sample_cdf(slot_cdf[slot], next_uniform(st))
    kern = slot_kern[slot, axis, x] / (h * 1e-9)
    weight = -(area_nm2 * 1e-18) * EPS0 * layers.max() * sign * kern / slot_probs[slot, x]
    for k in range(3):
        newpos[k] = p[k] + layout[x, k] * h
    stats_row[branch] += 1
    return 0, weight, 1


@njit(cache=True)
def _micro(n, maps, ceps, ccond, st, memo_a, memo_gen, gen, use_memo, step_cap, out, stats_row):
    t0 = cycles()
    steps = lattice_walk(n, maps, ceps, ccond, st, memo_a, memo_gen, gen, use_memo, step_cap, out)
    stats_row[S_MW_CYCLES] += cycles() - t0
    stats_row[S_MICRO_STEPS] += steps


FDM_RTOL = 1e-10


@njit(cache=True)
def fdm_probs(n, maps, ceps):
    """Exit distribution of a conductor-free cube by a finite-difference solve.

    Matrix-free Jacobi-preconditioned CG on the symmetric form
    ``diag(eps) A_II z = e_start``; the exit distribution is then
    ``A_IB^T diag(eps) z``.  Returns an empty array if CG fails.
    """
    m = n * n * n
    eps = np.empty(m)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                eps[(i * n + j) * n + k] = ceps[maps[0, i], maps[1, j], maps[2, k]]
    coef = np.zeros((m, 6))
    nbr = np.full((m, 6), -1, dtype=np.int64)
    diag = np.zeros(m)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                v = (i * n + j) * n + k
                for d in range(6):
                    a = i + DIRECTIONS[d, 0]
                    b = j + DIRECTIONS[d, 1]
                    c = k + DIRECTIONS[d, 2]
                    if a < 0 or a >= n or b < 0 or b >= n or c < 0 or c >= n:
                        diag[v] += eps[v]
                    else:
                        w = (a * n + b) * n + c
                        g = eps[v] * eps[w] / (eps[v] + eps[w])
                        coef[v, d] = g
                        nbr[v, d] = w
                        diag[v] += g
    c0 = n // 2
    start = (c0 * n + c0) * n + c0
    x = np.zeros(m)
    r = np.zeros(m)
    r[start] = 1.0
    z = r / diag
    q = z.copy()
    ap = np.empty(m)
    rz = np.dot(r, z)
    ok = False
    for it in range(20 * m):
        for v in range(m):
            acc = diag[v] * q[v]
            for d in range(6):
                w = nbr[v, d]
                if w >= 0:
                    acc -= coef[v, d] * q[w]
            ap[v] = acc
        alpha = rz / np.dot(q, ap)
        x += alpha * q
        r -= alpha * ap
        if np.sqrt(np.dot(r, r)) <= FDM_RTOL:
            ok = True
            break
        z = r / diag
        rz_new = np.dot(r, z)
        q = z + (rz_new / rz) * q
        rz = rz_new
    if not ok:
        return np.zeros(0)
    probs = np.zeros(6 * n * n)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                v = (i * n + j) * n + k
                for d in range(6):
                    if nbr[v, d] < 0:
                        probs[surface_panel(i, j, k, d, n)] += max(eps[v] * x[v], 0.0)
    return probs / probs.sum()


@njit(cache=True)
def fdm_panel(n, maps, ceps, u):
    """FDM transition: exit panel for uniform ``u``, or -1 if the solve failed."""
    probs = fdm_probs(n, maps, ceps)
    if probs.shape[0] == 0:
        return -1
    total = probs.sum()
    acc = 0.0
    target = u * total
    for q_ in range(probs.shape[0]):
        acc += probs[q_]
        if target < acc:
            return q_
    for q_ in range(probs.shape[0] - 1, -1, -1):
        if probs[q_] > 0:
            return q_
    return -1


@njit(cache=True)
def _hop(
    p, st, n, mode, expansion, scene, tables, layout, snap, req_codes, stats_row,
    memo_a, memo_gen, gen, use_memo, step_cap, tick,
):
    """One transition from p (updated in place).

    Status: 0 continue, 1 conductor (returns index), 2 ground,
    3 need SGF (returns profile axis).
    """
    cond_lo, cond_hi, diel_lo, diel_hi, diel_eps, bg, wlo, whi = scene
    index, slot_axis, slot_codes, slot_probs, slot_cdf, slot_kern, slot_used = tables
    ci = conductor_index_at(p, snap, cond_lo, cond_hi)
    if ci >= 0:
        return 1, ci
    if wall_distance(p, wlo, whi) <= snap:
        return 2, -1
    w, near = max_free(p, cond_lo, cond_hi, wlo, whi)
    out = np.zeros(6, dtype=np.int64)
    c = n // 2
    use_mwe = mode == MWE
    if not use_mwe:
        lo, h = lattice_for_point(p, w, n)
        maps, ceps, ccond = compress_cube(lo, h, n, diel_lo, diel_hi, diel_eps, bg, cond_lo, cond_hi, False)
        kind, saxis = classify_cells(ceps, ccond)
        if kind != GENERAL and mode != MW:
            prof_axis = 2 if kind == UNIFORM else saxis
            layers = _layers(maps, ceps, prof_axis, n)
            slot, prof_axis = _slot(prof_axis, layers, index, slot_axis, slot_codes)
            if slot < 0:
                codes = profile_codes(layers)
                for i in range(n):
                    req_codes[i] = codes[i]
                return 3, prof_axis
            slot_used[slot] = tick
            stats_row[S_HITS] += 1
            x = _sample_cdf(slot_cdf[slot], next_uniform(st))
            for k in range(3):
                p[k] = p[k] + layout[x, k] * h
            stats_row[S_CACHED] += 1
            return 0, -1
        if kind == GENERAL and mode == FDM:
            t0 = cycles()
            x = fdm_panel(n, maps, ceps, next_uniform(st))
            stats_row[S_FDM_CYCLES] += cycles() - t0
            if x < 0:
                return 2, -2
            for k in range(3):
                p[k] = p[k] + layout[x, k] * h
            stats_row[S_FDM] += 1
            return 0, -1
        if kind == GENERAL and mode == HYBRID_MWE:
            use_mwe = True
        else:
            _micro(n, maps, ceps, ccond, st, memo_a, memo_gen, gen, use_memo, step_cap, out, stats_row)
            if out[0] == EXIT_CAPPED:
                return 2, -2
            x = out[1]
            for k in range(3):
                p[k] = p[k] + layout[x, k] * h
            stats_row[S_MW] += 1
            return 0, -1
    # expanded cube, conductors allowed inside
    we = min(expansion * w, wall_distance(p, wlo, whi))
    lo, h = lattice_for_point(p, we, n)
    maps, ceps, ccond = compress_cube(lo, h, n, diel_lo, diel_hi, diel_eps, bg, cond_lo, cond_hi, True)
    if ccond[maps[0, c], maps[1, c], maps[2, c]] >= 0:
        stats_row[S_MWE_FALLBACK] += 1
        lo, h = lattice_for_point(p, w, n)
        maps, ceps, ccond = compress_cube(lo, h, n, diel_lo, diel_hi, diel_eps, bg, cond_lo, cond_hi, False)
    _micro(n, maps, ceps, ccond, st, memo_a, memo_gen, gen, use_memo, step_cap, out, stats_row)
    if out[0] == EXIT_CAPPED:
        return 2, -2
    stats_row[S_MWE] += 1
    if out[0] == EXIT_CONDUCTOR:
        stats_row[S_MWE_ABSORBED] += 1
        return 1, out[1]
    x = out[1]
    for k in range(3):
        p[k] = p[k] + layout[x, k] * h
    return 0, -1


@njit(cache=True)
def now_cycles():
    return cycles()


@njit(cache=True, nogil=True)
def advance(
    todo, phase, resume, pos, normal, keys, ctr, weight, term, hops, stats, req_axis, req_codes, retry,
    n, mode, expansion, scene, shell_lo, shell_hi, tables, layout, snap, hop_cap, use_memo, step_cap, tick,
    single_step, memo_a, memo_gen, gen0,
):
    """Advance the listed walks until each finishes or suspends."""
    nc = scene[0].shape[0]
    st = np.zeros(2, dtype=np.uint64)
    p = np.empty(3)
    newpos = np.empty(3)
    gen = gen0
    for t in range(todo.shape[0]):
        wi = todo[t]
        st[0] = keys[wi]
        st[1] = ctr[wi]
        row = stats[wi]
        while phase[wi] == P_START or phase[wi] == P_FIRST_GIVEN or phase[wi] == P_WALK:
            mark = st[1]
            if phase[wi] == P_WALK:
                for k in range(3):
                    p[k] = pos[wi, k]
                gen += 1
                status, val = _hop(
                    p, st, n, mode, expansion, scene, tables, layout, snap, req_codes[wi], row,
                    memo_a, memo_gen, gen, use_memo, step_cap, tick,
                )
                if status == 3:
                    st[1] = mark
                    req_axis[wi] = val
                    resume[wi] = P_WALK
                    phase[wi] = P_NEED_SGF
                    break
                if status == 0:
                    if retry[wi]:
                        row[S_HITS] -= 1
                        row[S_MISSES] += 1
                        retry[wi] = False
                    for k in range(3):
                        pos[wi, k] = p[k]
                    hops[wi] += 1
                    if hops[wi] >= hop_cap:
                        row[S_ABORTED] += 1
                        term[wi] = nc
                        phase[wi] = P_DONE
                    elif single_step:
                        term[wi] = -1
                        phase[wi] = P_DONE
                elif status == 1:
                    term[wi] = val
                    phase[wi] = P_DONE
                else:
                    if val == -2:
                        row[S_ABORTED] += 1
                    term[wi] = nc
                    phase[wi] = P_DONE
            else:
                given = phase[wi] == P_FIRST_GIVEN
                if given:
                    for k in range(3):
                        p[k] = pos[wi, k]
                    axis = normal[wi, 0]
                    sign = normal[wi, 1]
                    size = shell_hi - shell_lo
                    area = 2.0 * (size[0] * size[1] + size[0] * size[2] + size[1] * size[2])
                else:
                    axis, sign, area = _shell_point(shell_lo, shell_hi, st, p)
                status, val, _ = _first_transition(
                    p, axis, sign, area, st, n, scene, tables, layout, snap, req_codes[wi], row, newpos, tick
                )
                if status == 1:
                    st[1] = mark
                    req_axis[wi] = int(val)
                    resume[wi] = phase[wi]
                    phase[wi] = P_NEED_SGF
                    break
                if status == 2:
                    row[S_RESAMPLES] += 1
                    if given or row[S_RESAMPLES] > MAX_RESAMPLE:
                        row[S_ABORTED] += 1
                        weight[wi] = 0.0
                        term[wi] = nc
                        phase[wi] = P_DONE
                    continue
                if retry[wi]:
                    row[S_HITS] -= 1
                    row[S_MISSES] += 1
                    retry[wi] = False
                weight[wi] = val
                for k in range(3):
                    pos[wi, k] = newpos[k]
                normal[wi, 0] = axis
                normal[wi, 1] = sign
                phase[wi] = P_DONE if single_step else P_WALK
                if single_step:
                    term[wi] = -1
        ctr[wi] = st[1]
    return gen
