"""Ground truth for validating the walk engine.

* :func:`reference_capacitance` solves the whole world box with finite
  volumes on a rectilinear grid whose lines include every box face, so
  each cell has one permittivity and conductors are exact unions of
  cells.  Cell couplings use the same harmonic-mean rule as the cube
  assembly; conductor cells are pinned to their terminal potential and
  the world wall is grounded.
* :func:`exact_absorption_row` rebuilds the absorbing chain of a cube
  densely, without going through :mod:`frwmw.sgf`.
* :func:`compare_distribution` measures how far sampled exits are from
  an exact distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import pyamg

from .geometry import DielectricGrid, Structure
from .sgf import DIRECTIONS

EPS0 = 8.8541878128e-12
MAX_CELLS = 12_000_000
DENSE_CAP = 12


class OracleBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ReferenceSolution:
    resolution: tuple  # cells per axis
    terminals: list  # conductor ids
    matrix: np.ndarray  # farads, conductors x conductors
    ground: np.ndarray  # farads, coupling of each conductor to the world wall
    residual: float
    potentials: Optional[list] = None

    def entry(self, i, k) -> float:
        if k == "ground":
            return float(self.ground[self.terminals.index(i)])
        return float(self.matrix[self.terminals.index(i), self.terminals.index(k)])

    def row(self, i) -> np.ndarray:
        """Master row over conductors followed by ground."""
        r = self.terminals.index(i)
        return np.append(self.matrix[r], self.ground[r])


# --------------------------------------------------------------------------
# full-domain solver


def _axis_lines(breaks, core_lo, core_hi, fine, growth=0.25, samples=2048):
    """Grid lines through every break point, graded away from [core_lo, core_hi]."""
    breaks = np.unique(np.asarray(breaks, dtype=np.float64))
    lines = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        x = np.linspace(a, b, samples)
        dist = np.maximum(np.maximum(core_lo - x, x - core_hi), 0.0)
        size = fine + growth * dist
        f = np.concatenate([[0.0], np.cumsum(0.5 * (1 / size[1:] + 1 / size[:-1]) * np.diff(x))])
        m = max(1, int(math.ceil(f[-1] - 1e-9)))
        pts = np.interp(np.linspace(0, f[-1], m + 1), f, x)
        lines.extend(pts[1:-1])
        lines.append(b)
    return np.array(lines)


def build_mesh(s: Structure, resolution: int):
    """Rectilinear lines per axis.  ``resolution`` sets the core cell size."""
    a = s.arrays
    world_lo, world_hi = a.world_lo, a.world_hi
    core_lo = a.cond_lo.min(axis=0)
    core_hi = a.cond_hi.max(axis=0)
    fine = (core_hi - core_lo).max() / resolution
    axes = []
    for k in range(3):
        br = [world_lo[k], world_hi[k]]
        for lo, hi in ((a.cond_lo, a.cond_hi), (a.diel_lo, a.diel_hi)):
            br.extend(np.clip(lo[:, k], world_lo[k], world_hi[k]))
            br.extend(np.clip(hi[:, k], world_lo[k], world_hi[k]))
        axes.append(_axis_lines(br, core_lo[k], core_hi[k], fine))
    return axes


def _paint(axes, lo, hi):
    """Index slices of cells covered by [lo, hi)."""
    out = []
    for k in range(3):
        c = 0.5 * (axes[k][1:] + axes[k][:-1])
        idx = np.flatnonzero((c > lo[k]) & (c < hi[k]))
        if idx.size == 0:
            return None
        out.append(slice(idx[0], idx[-1] + 1))
    return tuple(out)


def _cells(s: Structure, axes):
    a = s.arrays
    shape = tuple(len(x) - 1 for x in axes)
    eps = np.full(shape, a.background)
    for lo, hi, e in zip(a.diel_lo, a.diel_hi, a.diel_eps):
        sl = _paint(axes, lo, hi)
        if sl is not None:
            eps[sl] = e
    cond = np.full(shape, -1, dtype=np.int64)
    for c, (lo, hi) in enumerate(zip(a.cond_lo, a.cond_hi)):
        sl = _paint(axes, lo, hi)
        if sl is None:
            raise ValueError(f"conductor {a.cond_ids[c]} is thinner than the mesh")
        cond[sl] = c
    return eps, cond


def _assemble(axes, eps, cond, nc):
    """Free-cell operator, per-conductor coupling vectors and wall conductances (units: eps * nm)."""
    shape = eps.shape
    free = cond < 0
    m = int(free.sum())
    node = np.full(shape, -1, dtype=np.int64)
    node[free] = np.arange(m)
    widths = [np.diff(x) for x in axes]
    diag = np.zeros(m)
    rows, cols, vals = [], [], []
    to_cond = np.zeros((nc, m))
    wall = np.zeros(m)
    for ax in range(3):
        others = [q for q in range(3) if q != ax]
        area = np.multiply.outer(widths[others[0]], widths[others[1]])
        area = np.expand_dims(area, ax)
        half = np.expand_dims(0.5 * widths[ax], tuple(q for q in range(3) if q != ax)) * np.ones(shape)
        r = half / eps  # half-cell resistance per unit area
        area = np.broadcast_to(area, shape)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        a_face = area[lo]
        fa, fb = free[lo], free[hi]
        na, nb = node[lo], node[hi]
        # free-free
        both = fa & fb
        g = a_face[both] / (r[lo][both] + r[hi][both])
        i, j = na[both], nb[both]
        rows += [i, j]
        cols += [j, i]
        vals += [-g, -g]
        np.add.at(diag, i, g)
        np.add.at(diag, j, g)
        # free-conductor
        for fmask, nfree, rfree, cidx in ((fa & ~fb, na, r[lo], cond[hi]), (fb & ~fa, nb, r[hi], cond[lo])):
            g = a_face[fmask] / rfree[fmask]
            v = nfree[fmask]
            np.add.at(diag, v, g)
            np.add.at(to_cond, (cidx[fmask], v), g)
        # world walls
        for sl in (0, -1):
            face = [slice(None)] * 3
            face[ax] = sl
            face = tuple(face)
            fm = free[face]
            g = area[face][fm] / r[face][fm]
            v = node[face][fm]
            np.add.at(diag, v, g)
            np.add.at(wall, v, g)
    rows.append(np.arange(m))
    cols.append(np.arange(m))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
    return A, to_cond, wall, node


def reference_capacitance(s: Structure, resolution: int = 48, keep_field: bool = False,
                          rtol: float = 1e-10, max_cells: int = MAX_CELLS) -> ReferenceSolution:
    """Maxwell capacitance matrix of ``s`` (farads) from a full-domain finite-volume solve.

    The core (conductor bounding box) gets cells of size
    ``extent / resolution``; cells grow linearly with distance outside it.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    axes = build_mesh(s, resolution)
    shape = tuple(len(x) - 1 for x in axes)
    cells = int(np.prod(shape))
    if cells > max_cells:
        raise OracleBudgetError(f"mesh of {shape} ({cells} cells) exceeds the budget of {max_cells}; lower the resolution")
    eps, cond = _cells(s, axes)
    nc = len(s.conductors)
    A, to_cond, wall, node = _assemble(axes, eps, cond, nc)
    ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric")
    M = ml.aspreconditioner()
    scale = EPS0 * 1e-9  # eps * nm -> farads
    matrix = np.zeros((nc, nc))
    ground = np.zeros(nc)
    worst = 0.0
    fields = [] if keep_field else None
    fixed = to_cond.sum(axis=1)
    for i in range(nc):
        b = to_cond[i]
        phi, info = spla.cg(A, b, rtol=rtol, maxiter=2000, M=M)
        res = float(np.linalg.norm(A @ phi - b) / max(np.linalg.norm(b), 1e-300))
        if info != 0 and res > 1e-6:
            raise OracleBudgetError(f"oracle solve did not converge (residual {res:.2e}); lower the resolution")
        worst = max(worst, res)
        for k in range(nc):
            # charge on k: sum over its faces of g * (V_k - phi)
            vk = 1.0 if k == i else 0.0
            matrix[i, k] = scale * (vk * fixed[k] - to_cond[k] @ phi)
        ground[i] = -scale * (wall @ phi)
        if keep_field:
            full = np.zeros(shape)
            full[cond >= 0] = (cond[cond >= 0] == i).astype(float)
            full[node >= 0] = phi
            fields.append(full)
    return ReferenceSolution(shape, list(s.conductor_ids), matrix, ground, worst, fields)


def extrapolated_reference(s: Structure, resolution: int = 32, **kw) -> ReferenceSolution:
    """Richardson extrapolation (first order) from ``resolution`` and ``2 * resolution``.

    Edge singularities make the mesh error decay roughly like 1/R, so
    ``2 C(2R) - C(R)`` removes the leading term.
    """
    coarse = reference_capacitance(s, resolution, **kw)
    fine = reference_capacitance(s, 2 * resolution, **kw)
    return ReferenceSolution(
        fine.resolution,
        fine.terminals,
        2 * fine.matrix - coarse.matrix,
        2 * fine.ground - coarse.ground,
        max(fine.residual, coarse.residual),
        fine.potentials,
    )


def err_avg(values, reference) -> float:
    """Average capacitance error: sum |C - C_ref| / sum |C_ref|."""
    values = np.asarray(values, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    return float(np.abs(values - reference).sum() / np.abs(reference).sum())


def analytic_plate_capacitance(layers: Sequence, area: float) -> float:
    """Series plate capacitor: ``layers`` is a list of (thickness m, eps_r); area in m^2."""
    if not layers:
        raise ValueError("need at least one layer")
    total = 0.0
    for d, e in layers:
        if d <= 0 or e <= 0:
            raise ValueError("thickness and permittivity must be positive")
        total += d / e
    return EPS0 * area / total


# --------------------------------------------------------------------------
# absorbing-chain quantities


def _dense_chain(grid: DielectricGrid, cap: int):
    n = grid.n
    if n > cap:
        raise ValueError(f"dense oracle limited to n <= {cap}")
    eps = grid.eps
    mask = grid.conductor_mask
    inside = np.ones((n, n, n), bool) if mask is None else mask < 0
    nodes = {}
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if inside[i, j, k]:
                    nodes[(i, j, k)] = len(nodes)
    m = len(nodes)
    P = np.zeros((m, m))
    cond_hits = []  # (direction, node row, conductor id)
    surf = []  # (node row, panel, weight)
    for (i, j, k), r in nodes.items():
        w = np.zeros(6)
        for d in range(6):
            a, b, c = i + DIRECTIONS[d, 0], j + DIRECTIONS[d, 1], k + DIRECTIONS[d, 2]
            if not (0 <= a < n and 0 <= b < n and 0 <= c < n) or not inside[a, b, c]:
                w[d] = 1.0
            else:
                w[d] = eps[a, b, c] / (eps[a, b, c] + eps[i, j, k])
        w /= w.sum()
        for d in range(6):
            a, b, c = i + DIRECTIONS[d, 0], j + DIRECTIONS[d, 1], k + DIRECTIONS[d, 2]
            if not (0 <= a < n and 0 <= b < n and 0 <= c < n):
                axis, side = divmod(d, 2)
                u, v = [(j, k), (i, k), (i, j)][axis]
                surf.append((r, (2 * axis + side) * n * n + u * n + v, w[d]))
            elif not inside[a, b, c]:
                cond_hits.append((d, (i, j, k), r, w[d]))
            else:
                P[r, nodes[(a, b, c)]] = w[d]
    # conductor panels are numbered direction-major, then by node order
    cond_hits.sort(key=lambda t: (t[0], (t[1][0] * n + t[1][1]) * n + t[1][2]))
    nb = 6 * n * n + len(cond_hits)
    R = np.zeros((m, nb))
    for r, p, w in surf:
        R[r, p] += w
    for q, (_, _, r, w) in enumerate(cond_hits):
        R[r, 6 * n * n + q] += w
    c = n // 2
    if (c, c, c) not in nodes:
        raise ValueError("start node lies inside a conductor")
    return P, R, nodes[(c, c, c)]


def exact_absorption_row(grid: DielectricGrid, cap: int = DENSE_CAP) -> np.ndarray:
    """Exit distribution of a walk from the start node, by dense linear algebra."""
    P, R, start = _dense_chain(grid, cap)
    m = P.shape[0]
    e = np.zeros(m)
    e[start] = 1.0
    y = np.linalg.solve((np.eye(m) - P).T, e)  # expected visits
    return R.T @ y


def exact_expected_steps(grid: DielectricGrid, cap: int = DENSE_CAP) -> float:
    P, _, start = _dense_chain(grid, cap)
    m = P.shape[0]
    t = np.linalg.solve(np.eye(m) - P, np.ones(m))
    return float(t[start])


# --------------------------------------------------------------------------
# distribution comparison


@dataclass(frozen=True)
class DistributionReport:
    exact: np.ndarray
    empirical: np.ndarray
    tv_distance: float
    gof_statistic: float  # chi-square over bins with positive exact mass
    dof: int
    samples: int

    @property
    def p_value(self) -> float:
        from scipy.stats import chi2

        return float(chi2.sf(self.gof_statistic, self.dof)) if self.dof > 0 else 1.0

    def to_dict(self):
        return {"tv_distance": self.tv_distance, "chi2": self.gof_statistic, "dof": self.dof,
                "p_value": self.p_value, "samples": self.samples}


def compare_distribution(exact, sampler: Callable[[int, int], np.ndarray], n_samples: int, rng: int = 0) -> DistributionReport:
    """Draw ``n_samples`` bin indices as ``sampler(n_samples, seed)`` and compare to ``exact``."""
    if n_samples < 10_000:
        raise ValueError("n_samples must be >= 1e4")
    exact = np.asarray(exact, dtype=np.float64)
    exact = exact / exact.sum()
    draws = np.asarray(sampler(n_samples, rng))
    counts = np.bincount(draws, minlength=exact.size)[: exact.size].astype(np.float64)
    if counts.sum() != n_samples:
        raise ValueError("sampler returned indices outside the support")
    emp = counts / n_samples
    tv = 0.5 * float(np.abs(emp - exact).sum())
    pos = exact > 0
    expect = exact[pos] * n_samples
    chi2 = float((((counts[pos] - expect) ** 2) / expect).sum())
    if np.any(counts[~pos] > 0):
        chi2 = math.inf
    return DistributionReport(exact, emp, tv, chi2, int(pos.sum()) - 1, n_samples)


def cdf_sampler(probs):
    """Reference sampler: inverse CDF on numpy's generator."""
    cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
    cdf /= cdf[-1]

    def draw(count, seed):
        u = np.random.default_rng(seed).random(count)
        return np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)

    return draw


# --------------------------------------------------------------------------
# random fixtures


def random_voxel_grid(n: int, rng, rate: float = 0.1) -> DielectricGrid:
    """Independent eps ~ Exp(rate) per voxel."""
    rng = np.random.default_rng(rng)
    eps = rng.exponential(1.0 / rate, size=(n, n, n))
    return DielectricGrid(np.maximum(eps, 1e-6), np.zeros(3), 1.0)


def random_block_grid(n: int, rng, blocks: int = 4, rate: float = 0.1) -> DielectricGrid:
    """Randomly placed boxes of eps ~ Exp(rate) over an Exp(rate) background."""
    rng = np.random.default_rng(rng)
    eps = np.full((n, n, n), max(rng.exponential(1.0 / rate), 1e-6))
    for _ in range(blocks):
        lo = rng.integers(0, n, 3)
        hi = lo + rng.integers(1, max(2, n // 2 + 1), 3)
        eps[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = max(rng.exponential(1.0 / rate), 1e-6)
    return DielectricGrid(eps, np.zeros(3), 1.0)
