"""Finite-difference surface Green's functions of transition cubes.

Interior nodes sit at voxel centers, boundary nodes at the centers of the
6 n^2 surface panels (plus, for cubes holding conductors, the exposed
conductor faces).  Row ``v`` of the system reads

    sum_i alpha_i (phi_v - phi_i) = 0,
    alpha_i = eps_i / (eps_i + eps_v)   for interior neighbours,
    alpha_i = 1                         for boundary neighbours.

Multiplying row ``v`` by ``eps_v`` makes the interior block symmetric
positive definite, which is what the solvers work on.

Panel ``p`` of the cube surface is ``face * n^2 + iu * n + iv`` with
``face = 2 * axis + side`` (side 1 = high face) and ``(u, v)`` the two
remaining axes in increasing order.
"""

from __future__ import annotations

import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit, types
from numba.typed import Dict

from .geometry import GENERAL, STRATIFIED, UNIFORM, DielectricGrid, Tag

DIRECTIONS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64
)


class SolverError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


# --------------------------------------------------------------------------
# panel layout


@njit(cache=True)
def surface_panel(i, j, k, d, n):
    """Surface panel hit when leaving voxel (i, j, k) in direction d."""
    axis = d // 2
    side = d % 2
    face = 2 * axis + side
    if axis == 0:
        u, v = j, k
    elif axis == 1:
        u, v = i, k
    else:
        u, v = i, j
    return face * n * n + u * n + v


@lru_cache(maxsize=64)
def panel_layout(n: int) -> np.ndarray:
    """Panel centers relative to the start node, in units of the pitch, shape (6n^2, 3)."""
    c = n // 2 + 0.5
    pts = np.empty((6 * n * n, 3))
    iu, iv = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    iu = iu.ravel()
    iv = iv.ravel()
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        for side in range(2):
            face = 2 * axis + side
            blk = pts[face * n * n:(face + 1) * n * n]
            blk[:, axis] = float(side * n)
            blk[:, others[0]] = iu
            blk[:, others[1]] = iv
    pts -= c
    pts.setflags(write=False)
    return pts


# --------------------------------------------------------------------------
# assembly


@dataclass(frozen=True, eq=False)
class FDSystem:
    n: int
    a_ii: sp.csr_matrix
    a_ib: sp.csr_matrix
    center_index: int
    node_of_voxel: np.ndarray  # (n^3,) interior node index or -1 for conductor voxels
    eps_nodes: np.ndarray  # permittivity per interior node
    panel_points: np.ndarray  # (boundary_count, 3) in pitch units relative to the start node
    conductor_panels: dict = field(default_factory=dict)  # panel index -> conductor id
    pitch: float = 1.0

    @property
    def interior_count(self):
        return self.a_ii.shape[0]

    @property
    def boundary_count(self):
        return self.a_ib.shape[1]

    @property
    def symmetric(self) -> sp.csr_matrix:
        """``diag(eps) @ a_ii``, symmetric positive definite."""
        return sp.diags(self.eps_nodes) @ self.a_ii

    def panel_conductor(self) -> np.ndarray:
        out = np.full(self.boundary_count, -1, dtype=np.int64)
        for p, cid in self.conductor_panels.items():
            out[p] = cid
        return out


def assemble_system(grid: DielectricGrid) -> FDSystem:
    n = grid.n
    eps = grid.eps.ravel()
    mask = None if grid.conductor_mask is None else grid.conductor_mask.ravel()
    is_int = np.ones(n ** 3, dtype=bool) if mask is None else mask < 0
    if not is_int.any():
        raise ValueError("cube has no interior nodes (fully inside conductors)")
    node = np.full(n ** 3, -1, dtype=np.int64)
    node[is_int] = np.arange(int(is_int.sum()))
    m = int(is_int.sum())
    ijk = np.stack(np.unravel_index(np.arange(n ** 3), (n, n, n)), axis=1)

    rows, cols, vals = [], [], []
    brows, bcols = [], []
    diag = np.zeros(m)
    n_surface = 6 * n * n
    cond_panels = {}
    cond_points = []
    layout = panel_layout(n)

    vox = np.flatnonzero(is_int)
    for d in range(6):
        nb = ijk[vox] + DIRECTIONS[d]
        inside = np.all((nb >= 0) & (nb < n), axis=1)
        # cube surface
        out_v = vox[~inside]
        if out_v.size:
            i, j, k = ijk[out_v].T
            axis, side = d // 2, d % 2
            u, w = [(j, k), (i, k), (i, j)][axis]
            panel = (2 * axis + side) * n * n + u * n + w
            brows.append(node[out_v])
            bcols.append(panel)
            np.add.at(diag, node[out_v], 1.0)
        in_v = vox[inside]
        nb_lin = np.ravel_multi_index(tuple(nb[inside].T), (n, n, n))
        nb_int = is_int[nb_lin]
        # interior neighbours
        v_i = in_v[nb_int]
        w_i = nb_lin[nb_int]
        alpha = eps[w_i] / (eps[w_i] + eps[v_i])
        rows.append(node[v_i])
        cols.append(node[w_i])
        vals.append(-alpha)
        np.add.at(diag, node[v_i], alpha)
        # conductor faces
        v_c = in_v[~nb_int]
        if v_c.size:
            base = n_surface + len(cond_points)
            idx = base + np.arange(v_c.size)
            brows.append(node[v_c])
            bcols.append(idx)
            np.add.at(diag, node[v_c], 1.0)
            w_c = nb_lin[~nb_int]
            for p, wc in zip(idx, w_c):
                cond_panels[int(p)] = int(mask[wc])
            c = n // 2
            pts = ijk[v_c] + 0.5 * DIRECTIONS[d] - c
            cond_points.extend(pts.astype(float))

    rows.append(np.arange(m))
    cols.append(np.arange(m))
    vals.append(diag)
    a_ii = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    nb_total = n_surface + len(cond_points)
    br = np.concatenate(brows) if brows else np.zeros(0, dtype=np.int64)
    bc = np.concatenate(bcols) if bcols else np.zeros(0, dtype=np.int64)
    a_ib = sp.csr_matrix((np.ones(br.size), (br, bc)), shape=(m, nb_total))
    points = layout if not cond_points else np.vstack([layout, np.array(cond_points)])
    c = n // 2
    center_vox = (c * n + c) * n + c
    if node[center_vox] < 0:
        raise ValueError("start node lies inside a conductor")
    return FDSystem(
        n=n,
        a_ii=a_ii,
        a_ib=a_ib,
        center_index=int(node[center_vox]),
        node_of_voxel=node,
        eps_nodes=eps[is_int].copy(),
        panel_points=points,
        conductor_panels=cond_panels,
        pitch=float(grid.pitch),
    )


# --------------------------------------------------------------------------
# solves

RTOL = 1e-10


def _spd_solve(S: sp.csr_matrix, rhs: np.ndarray, method: str = "cg") -> np.ndarray:
    """Solve ``S x = rhs`` column by column; ``rhs`` has shape (m, k)."""
    m = S.shape[0]
    rhs = np.atleast_2d(rhs.T).T
    out = np.empty_like(rhs, dtype=np.float64)
    if method == "direct" or m <= 8:
        lu = spla.splu(S.tocsc())
        return lu.solve(rhs)
    if method != "cg":
        raise ValueError(f"unknown solver method {method!r}")
    M = sp.diags(1.0 / S.diagonal())
    lu = None
    for j in range(rhs.shape[1]):
        b = rhs[:, j]
        x, info = spla.cg(S, b, rtol=RTOL, atol=0.0, maxiter=20 * m, M=M)
        res = np.linalg.norm(S @ x - b) / np.linalg.norm(b)
        if info != 0 or res > 10 * RTOL:
            if lu is None:
                lu = spla.splu(S.tocsc())
            x = lu.solve(b)
            res = np.linalg.norm(S @ x - b) / np.linalg.norm(b)
            if res > 1e-8:
                raise SolverError("sparse solve did not converge", res)
        out[:, j] = x
    return out


def absorption_rows(sys: FDSystem, nodes, method: str = "cg") -> np.ndarray:
    """Rows ``e_v^T A_II^-1 A_IB`` for the given interior nodes, shape (len(nodes), boundary_count)."""
    nodes = np.asarray(nodes, dtype=np.int64)
    rhs = np.zeros((sys.interior_count, nodes.size))
    rhs[nodes, np.arange(nodes.size)] = 1.0
    z = _spd_solve(sys.symmetric, rhs, method)
    y = sys.eps_nodes[:, None] * z
    return np.asarray((sys.a_ib.T @ y).T)


@dataclass(frozen=True, eq=False)
class DiscreteSGF:
    """Exit distribution over boundary panels of one cube.

    ``grad_kernels[a] @ phi_B`` estimates eps * d(phi)/d(axis a) at the start
    node, in 1/length units of ``pitch``.
    """

    probs: np.ndarray
    cdf: np.ndarray
    n: int
    panel_points: np.ndarray
    grad_kernels: Optional[np.ndarray] = None
    pitch: float = 1.0
    panel_conductor: Optional[np.ndarray] = None

    @classmethod
    def from_probs(cls, probs, n, panel_points=None, grad_kernels=None, pitch=1.0, panel_conductor=None):
        probs = np.asarray(probs, dtype=np.float64)
        if panel_points is None:
            panel_points = panel_layout(n)
        cdf = np.cumsum(probs)
        cdf /= cdf[-1]
        return cls(probs, cdf, n, panel_points, grad_kernels, pitch, panel_conductor)

    @property
    def panel_count(self):
        return self.probs.size

    def panel_point(self, index, start_point) -> np.ndarray:
        return np.asarray(start_point, float) + self.panel_points[index] * self.pitch


def _clean(row):
    row = np.where(row < 0, 0.0, row)
    return row / row.sum()


def solve_sgf(sys: FDSystem, kernels: bool = True, method: str = "cg") -> DiscreteSGF:
    n = sys.n
    c = n // 2
    need = [sys.center_index]
    plan = []
    if kernels:
        for axis in range(3):
            ends = []
            for sgn in (-1, 1):
                ijk = [c, c, c]
                ijk[axis] += sgn
                if 0 <= ijk[axis] < n:
                    lin = (ijk[0] * n + ijk[1]) * n + ijk[2]
                    nd = sys.node_of_voxel[lin]
                    if nd >= 0:
                        ends.append(("node", len(need), float(sys.eps_nodes[nd])))
                        need.append(int(nd))
                        continue
                    # conductor neighbour: its face panel
                    pos = np.array([0.0, 0.0, 0.0])
                    pos[axis] = 0.5 * sgn
                    hits = np.flatnonzero(np.all(np.isclose(sys.panel_points, pos), axis=1))
                    ends.append(("panel", int(hits[0]), 0.0))
                else:
                    d = 2 * axis + (sgn > 0)
                    ends.append(("panel", int(surface_panel(c, c, c, d, n)), 0.0))
            plan.append(ends)
    rows = absorption_rows(sys, need, method)
    probs = _clean(rows[0])
    grad = None
    if kernels:
        # eps * d(phi)/d(axis) at the start node, as the mean of the discrete
        # fluxes through the two voxel faces; exact for linear potentials
        # and consistent across dielectric interfaces
        ec = float(sys.eps_nodes[sys.center_index])
        grad = np.zeros((3, sys.boundary_count))
        for axis, ends in enumerate(plan):
            flux = []
            for (kind, ref, e), sgn in zip(ends, (-1.0, 1.0)):
                if kind == "node":
                    vec = _clean(rows[ref])
                    g = 2.0 * ec * e / (ec + e)
                    dist = 1.0
                else:
                    vec = np.zeros(sys.boundary_count)
                    vec[ref] = 1.0
                    g = ec
                    dist = 0.5
                flux.append(sgn * g * (vec - probs) / (dist * sys.pitch))
            grad[axis] = 0.5 * (flux[0] + flux[1])
    pc = sys.panel_conductor() if sys.conductor_panels else None
    return DiscreteSGF.from_probs(probs, n, sys.panel_points, grad, sys.pitch, pc)


def expected_steps(sys: FDSystem, method: str = "cg") -> float:
    """Mean number of lattice steps from the start node until absorption.

    The chain is the row-normalized system, so the all-ones vector of the
    normalized form becomes the row sums (the diagonal) here.
    """
    rhs = np.zeros((sys.interior_count, 1))
    rhs[sys.center_index, 0] = 1.0
    z = _spd_solve(sys.symmetric, rhs, method)[:, 0]
    y = sys.eps_nodes * z
    return float(y @ sys.a_ii.diagonal())


def row_sum_check(sys: FDSystem, method: str = "cg") -> float:
    """Max deviation of ``A_II^-1 A_IB 1`` from 1 over all interior nodes."""
    b = sys.eps_nodes * np.asarray(sys.a_ib.sum(axis=1)).ravel()
    x = _spd_solve(sys.symmetric, b[:, None], method)[:, 0]
    return float(np.max(np.abs(x - 1.0)))


def sample_panel(sgf: DiscreteSGF, rng) -> int:
    """Draw a panel index by binary search of one uniform variate in the CDF.

    ``rng`` is anything with ``random()`` or a float in [0, 1).
    """
    u = float(rng) if isinstance(rng, (float, np.floating)) else rng.random()
    return int(min(np.searchsorted(sgf.cdf, u, side="right"), sgf.cdf.size - 1))


# --------------------------------------------------------------------------
# stratified-profile cache

_CODE_BASE = 10_000_000


@njit(cache=True)
def quantize(x):
    """Encode a positive value rounded to 6 significant digits as an int64."""
    e = int(np.floor(np.log10(x)))
    m = int(np.rint(x / 10.0 ** (e - 5)))
    if m >= 1000000:
        m = int(np.rint(m / 10.0))
        e += 1
    elif m < 100000:
        e -= 1
        m = int(np.rint(x / 10.0 ** (e - 5)))
    return (e + 1000) * _CODE_BASE + m


@njit(cache=True)
def dequantize(code):
    e = code // _CODE_BASE - 1000
    m = code % _CODE_BASE
    return m * 10.0 ** (e - 5)


@njit(cache=True)
def profile_codes(layers):
    mx = layers.max()
    out = np.empty(layers.shape[0], dtype=np.int64)
    for i in range(layers.shape[0]):
        out[i] = quantize(layers[i] / mx)
    return out


_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


@njit(cache=True)
def profile_hash(axis, codes):
    h = _FNV_OFFSET
    h = (h ^ np.uint64(axis + 7)) * _FNV_PRIME
    for c in codes:
        h = (h ^ np.uint64(c)) * _FNV_PRIME
    return np.int64(h >> np.uint64(1))


@njit(cache=True)
def find_slot(index, key_hash, axis, codes, slot_axis, slot_codes):
    """Slot holding this profile or -1; -2 flags a hash collision."""
    if key_hash not in index:
        return -1
    s = index[key_hash]
    if slot_axis[s] != axis:
        return -2
    for i in range(codes.shape[0]):
        if slot_codes[s, i] != codes[i]:
            return -2
    return s


@dataclass(frozen=True)
class ProfileKey:
    n: int
    axis: int
    layers: tuple  # quantized codes of eps / max(eps), one per lattice layer
    expanded: bool = False
    conductor_signature: Optional[str] = None

    @classmethod
    def from_layers(cls, n, axis, layers):
        layers = np.asarray(layers, dtype=np.float64)
        if layers.shape != (n,):
            raise ValueError("need one permittivity per lattice layer")
        codes = profile_codes(layers)
        if np.all(codes == codes[0]):
            axis = 2
        return cls(int(n), int(axis), tuple(int(c) for c in codes))

    @classmethod
    def from_grid(cls, grid: DielectricGrid):
        if grid.conductor_mask is not None and np.any(grid.conductor_mask >= 0):
            raise ValueError("cached SGFs are for conductor-free cubes")
        if grid.tag.kind == GENERAL:
            raise ValueError("general dielectric cube has no stratified profile; use MicroWalk")
        axis = 2 if grid.tag.kind == UNIFORM else grid.tag.axis
        other = [slice(0, 1)] * 3
        other[axis] = slice(None)
        return cls.from_layers(grid.n, axis, grid.eps[tuple(other)].ravel())

    @property
    def eps_profile(self) -> np.ndarray:
        return np.array([dequantize(c) for c in self.layers])

    @property
    def hash(self) -> int:
        return int(profile_hash(self.axis, np.array(self.layers, dtype=np.int64)))

    def grid(self) -> DielectricGrid:
        shape = [1, 1, 1]
        shape[self.axis] = self.n
        eps = np.broadcast_to(self.eps_profile.reshape(shape), (self.n,) * 3).copy()
        tag = Tag(UNIFORM) if len(set(self.layers)) == 1 else Tag(STRATIFIED, self.axis)
        return DielectricGrid(eps, np.zeros(3), 1.0, tag=tag)


class SGFCache:
    """Memo table from stratified profiles to solved SGFs (unit pitch).

    Besides the Python-level mapping it keeps packed arrays that the walk
    kernels read directly: ``index`` (hash -> slot), per-slot axis, codes,
    probabilities, CDF and gradient kernels.
    """

    def __init__(self, n: int, capacity: Optional[int] = None, method: str = "cg"):
        self.n = int(n)
        self.capacity = capacity
        self.method = method
        self.panels = 6 * self.n * self.n
        self.hits = 0
        self.misses = 0
        self.solves = 0
        self._lock = threading.Lock()
        self._lru = OrderedDict()  # key -> slot
        self._free = []
        self._sgf_objects = {}
        self.index = Dict.empty(key_type=types.int64, value_type=types.int64)
        self._alloc(16)
        self.nslots = 0

    def _alloc(self, cap):
        P, n = self.panels, self.n
        new = dict(
            slot_axis=np.full(cap, -1, dtype=np.int64),
            slot_codes=np.zeros((cap, n), dtype=np.int64),
            slot_probs=np.zeros((cap, P)),
            slot_cdf=np.zeros((cap, P)),
            slot_kern=np.zeros((cap, 3, P)),
            slot_used=np.zeros(cap, dtype=np.int64),
        )
        if hasattr(self, "slot_axis"):
            old = self.slot_axis.shape[0]
            for name, arr in new.items():
                arr[:old] = getattr(self, name)
        for name, arr in new.items():
            setattr(self, name, arr)

    def __len__(self):
        return len(self._lru)

    def __contains__(self, key: ProfileKey):
        return key in self._lru

    @property
    def tables(self):
        return (self.index, self.slot_axis, self.slot_codes, self.slot_probs, self.slot_cdf, self.slot_kern, self.slot_used)

    def _slot_sgf(self, s) -> DiscreteSGF:
        return DiscreteSGF(
            self.slot_probs[s].copy(), self.slot_cdf[s].copy(), self.n, panel_layout(self.n), self.slot_kern[s].copy(), 1.0
        )

    def lookup(self, key: ProfileKey) -> Optional[DiscreteSGF]:
        with self._lock:
            s = self._lru.get(key)
            if s is None:
                return None
            self._lru.move_to_end(key)
            return self._sgf_objects.setdefault(key, self._slot_sgf(s))

    def get(self, key: ProfileKey, grid_provider: Optional[Callable[[], DielectricGrid]] = None) -> DiscreteSGF:
        """Return the SGF for ``key``, solving and storing it on a miss."""
        if key.n != self.n:
            raise ValueError(f"cache holds n={self.n} profiles, key has n={key.n}")
        if key.expanded or key.conductor_signature:
            raise ValueError("expanded/conductor cubes are walked, not cached")
        hit = self.lookup(key)
        if hit is not None:
            self.hits += 1
            return hit
        self.misses += 1
        grid = grid_provider() if grid_provider is not None else key.grid()
        if grid.tag.kind == GENERAL:
            raise ValueError("general dielectric cube cannot be served from the stratified cache")
        self.insert(key, solve_sgf(assemble_system(key.grid()), kernels=True, method=self.method))
        return self.lookup(key)

    def insert(self, key: ProfileKey, sgf: DiscreteSGF):
        if sgf.grad_kernels is None:
            raise ValueError("cached SGFs need gradient kernels")
        kern = sgf.grad_kernels * sgf.pitch  # store per unit pitch
        with self._lock:
            if key in self._lru:
                return
            self.solves += 1
            h = key.hash
            if h in self.index:
                raise RuntimeError("profile hash collision in SGF cache")
            if self.capacity is not None and len(self._lru) >= self.capacity:
                old_key, old_slot = self._lru.popitem(last=False)
                del self.index[old_key.hash]
                self._sgf_objects.pop(old_key, None)
                self.slot_axis[old_slot] = -1
                self._free.append(old_slot)
            if self._free:
                s = self._free.pop()
            else:
                s = self.nslots
                self.nslots += 1
                if s >= self.slot_axis.shape[0]:
                    self._alloc(2 * self.slot_axis.shape[0])
            self.slot_axis[s] = key.axis
            self.slot_codes[s] = key.layers
            self.slot_probs[s] = sgf.probs
            self.slot_cdf[s] = sgf.cdf
            self.slot_kern[s] = kern
            self.index[h] = s
            self._lru[key] = s

    def touch_from_tables(self):
        """Reorder the LRU by the kernels' last-use ticks."""
        order = sorted(self._lru.items(), key=lambda kv: self.slot_used[kv[1]])
        self._lru = OrderedDict(order)

    def keys(self):
        return list(self._lru)

    # persistence ----------------------------------------------------------

    MAGIC = b"SGF1"

    def save(self, path):
        P = self.panels
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sII", self.MAGIC, self.n, len(self._lru)))
            for key, s in self._lru.items():
                head = np.array([key.axis, float(key.expanded)] + list(key.layers), dtype="<f8")
                fh.write(head.tobytes())
                fh.write(np.asarray(self.slot_probs[s], dtype="<f8").tobytes())
                fh.write(np.asarray(self.slot_kern[s], dtype="<f8").reshape(3 * P).tobytes())

    @classmethod
    def load(cls, path, capacity=None, method="cg") -> "SGFCache":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 12:
            raise ValueError("truncated SGF cache file")
        magic, n, count = struct.unpack_from("<4sII", data, 0)
        if magic != cls.MAGIC:
            raise ValueError("not an SGF cache file (bad magic)")
        cache = cls(n, capacity, method)
        P = 6 * n * n
        width = 2 + n + 4 * P
        body = np.frombuffer(data, dtype="<f8", offset=12)
        if body.size != count * width:
            raise ValueError("SGF cache file size does not match its header")
        body = body.reshape(count, width)
        for rec in body:
            axis = int(rec[0])
            layers = tuple(int(c) for c in rec[2:2 + n])
            probs = rec[2 + n:2 + n + P].astype(np.float64)
            kern = rec[2 + n + P:].reshape(3, P).astype(np.float64)
            if abs(probs.sum() - 1.0) > 1e-9 or probs.min() < 0:
                raise ValueError("SGF cache entry failed normalization check")
            key = ProfileKey(n, axis, layers, bool(rec[1]))
            cache.insert(key, DiscreteSGF.from_probs(probs, n, grad_kernels=kern, pitch=1.0))
        return cache


def cached_stratified_sgf(cache: SGFCache, key: ProfileKey, grid_provider=None) -> DiscreteSGF:
    return cache.get(key, grid_provider)
