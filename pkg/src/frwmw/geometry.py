"""Scene model and spatial queries.

Coordinates are nanometers throughout.  Conductors and dielectrics are
axis-aligned boxes; overlapping dielectrics resolve to the later
declaration.  Voxel membership uses voxel centers and half-open box
intervals ``lo <= x < hi``, except that a conductor crossing a lattice
always keeps at least one voxel per axis.

Transition cubes are described by a *lattice*: ``n`` voxels per axis with
pitch ``h`` and low corner ``lo``.  The walk's start node is voxel
``n // 2`` on every axis and always sits exactly on the walk point, so for
even ``n`` the lattice box is offset by half a pitch from that point.
"""

from __future__ import annotations

import json
import json.decoder
import json.scanner
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from numba import njit

REL_TOL = 1e-9

UNIFORM = 0
STRATIFIED = 1
GENERAL = 2
_KIND_NAMES = {UNIFORM: "uniform", STRATIFIED: "stratified", GENERAL: "general"}
AXES = "xyz"


class StructureError(ValueError):
    """Invalid structure document; carries a location when known."""

    def __init__(self, message, line=None, column=None, path=None):
        self.line = line
        self.column = column
        self.path = path
        where = []
        if path:
            where.append(path)
        if line is not None:
            where.append(f"line {line}, column {column}")
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)


class StructureSyntaxError(StructureError):
    pass


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3:
            raise ValueError("box corners must be 3-vectors")
        if not all(math.isfinite(v) for v in lo + hi):
            raise ValueError("box coordinates must be finite")
        if any(l >= h for l, h in zip(lo, hi)):
            raise ValueError(f"box needs lo < hi on every axis, got lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self):
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def center(self):
        return tuple(0.5 * (l + h) for l, h in zip(self.lo, self.hi))

    def contains_box(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(
            a >= b for a, b in zip(self.hi, other.hi)
        )

    def intersect(self, other: "Box") -> Optional["Box"]:
        lo = tuple(max(a, b) for a, b in zip(self.lo, other.lo))
        hi = tuple(min(a, b) for a, b in zip(self.hi, other.hi))
        if any(l >= h for l, h in zip(lo, hi)):
            return None
        return Box(lo, hi)

    def inflate(self, d) -> "Box":
        return Box(tuple(v - d for v in self.lo), tuple(v + d for v in self.hi))

    def translate(self, t) -> "Box":
        return Box(tuple(v + dt for v, dt in zip(self.lo, t)), tuple(v + dt for v, dt in zip(self.hi, t)))


@dataclass(frozen=True)
class Structure:
    conductors: tuple  # ((id, Box), ...)
    dielectrics: tuple  # ((Box, eps_r), ...)
    background_eps_r: float
    world: Box
    master_id: int

    def __post_init__(self):
        object.__setattr__(self, "conductors", tuple((int(i), b) for i, b in self.conductors))
        object.__setattr__(self, "dielectrics", tuple((b, float(e)) for b, e in self.dielectrics))
        if not self.conductors:
            raise StructureError("structure has no conductors", path="conductors")
        ids = [i for i, _ in self.conductors]
        if len(set(ids)) != len(ids):
            raise StructureError("duplicate conductor id", path="conductors")
        if not self.background_eps_r > 0:
            raise StructureError("background_eps must be > 0", path="background_eps")
        for k, (b, e) in enumerate(self.dielectrics):
            if not e > 0:
                raise StructureError("eps must be > 0", path=f"dielectrics[{k}].eps")
            if not self.world.contains_box(b):
                raise StructureError("dielectric box outside world", path=f"dielectrics[{k}]")
        for k, (_, b) in enumerate(self.conductors):
            if not self.world.contains_box(b):
                raise StructureError("conductor box outside world", path=f"conductors[{k}]")
        if self.master_id not in ids:
            raise StructureError(f"master {self.master_id} is not a conductor id", path="master")

    @property
    def conductor_ids(self):
        return [i for i, _ in self.conductors]

    def conductor_index(self, cid) -> int:
        return self.conductor_ids.index(cid)

    def conductor_box(self, cid) -> Box:
        return self.conductors[self.conductor_index(cid)][1]

    @cached_property
    def arrays(self) -> "SceneArrays":
        return SceneArrays.from_structure(self)

    def translate(self, t) -> "Structure":
        return Structure(
            conductors=tuple((i, b.translate(t)) for i, b in self.conductors),
            dielectrics=tuple((b.translate(t), e) for b, e in self.dielectrics),
            background_eps_r=self.background_eps_r,
            world=self.world.translate(t),
            master_id=self.master_id,
        )

    def with_master(self, cid) -> "Structure":
        return Structure(self.conductors, self.dielectrics, self.background_eps_r, self.world, cid)

    def to_document(self) -> dict:
        return {
            "units": "nm",
            "background_eps": self.background_eps_r,
            "world": {"lo": list(self.world.lo), "hi": list(self.world.hi)},
            "conductors": [{"id": i, "lo": list(b.lo), "hi": list(b.hi)} for i, b in self.conductors],
            "dielectrics": [{"lo": list(b.lo), "hi": list(b.hi), "eps": e} for b, e in self.dielectrics],
            "master": self.master_id,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2)


@dataclass(frozen=True)
class SceneArrays:
    """Flat float64 views of a structure, as consumed by numba kernels."""

    cond_lo: np.ndarray
    cond_hi: np.ndarray
    cond_ids: np.ndarray
    diel_lo: np.ndarray
    diel_hi: np.ndarray
    diel_eps: np.ndarray
    background: float
    world_lo: np.ndarray
    world_hi: np.ndarray

    @classmethod
    def from_structure(cls, s: Structure):
        def boxes(bs):
            if not bs:
                return np.zeros((0, 3)), np.zeros((0, 3))
            return np.array([b.lo for b in bs], float), np.array([b.hi for b in bs], float)

        clo, chi = boxes([b for _, b in s.conductors])
        dlo, dhi = boxes([b for b, _ in s.dielectrics])
        return cls(
            cond_lo=clo,
            cond_hi=chi,
            cond_ids=np.array(s.conductor_ids, dtype=np.int64),
            diel_lo=dlo,
            diel_hi=dhi,
            diel_eps=np.array([e for _, e in s.dielectrics], dtype=np.float64),
            background=float(s.background_eps_r),
            world_lo=np.array(s.world.lo, float),
            world_hi=np.array(s.world.hi, float),
        )


# --------------------------------------------------------------------------
# structure files


class _PositionDecoder(json.JSONDecoder):
    """JSON decoder that remembers where each object and array started."""

    def __init__(self):
        super().__init__()
        self.positions = {}
        positions = self.positions

        def parse_object(s_and_end, *args):
            obj, end = json.decoder.JSONObject(s_and_end, *args)
            positions[id(obj)] = s_and_end[1] - 1
            return obj, end

        def parse_array(s_and_end, *args):
            arr, end = json.decoder.JSONArray(s_and_end, *args)
            positions[id(arr)] = s_and_end[1] - 1
            return arr, end

        self.parse_object = parse_object
        self.parse_array = parse_array
        self.scan_once = json.scanner.py_make_scanner(self)


def _line_col(text, pos):
    line = text.count("\n", 0, pos) + 1
    return line, pos - text.rfind("\n", 0, pos)


def parse_structure(text: str, world_margin: float = 5.0) -> Structure:
    """Parse a structure document (see ``docs/structure-format.md``).

    Without an explicit ``world`` the world box is a cube around the
    conductors' bounding box whose half-size is ``world_margin`` times the
    largest bounding-box half-extent; dielectrics are then clipped to it.
    """
    decoder = _PositionDecoder()
    try:
        doc = decoder.decode(text)
    except json.JSONDecodeError as exc:
        raise StructureSyntaxError(exc.msg, exc.lineno, exc.colno) from None

    anchor = [doc]

    def fail(message, path, node=None):
        for obj in ([node] if node is not None else []) + anchor[::-1]:
            if id(obj) in decoder.positions:
                line, col = _line_col(text, decoder.positions[id(obj)])
                raise StructureError(message, line, col, path)
        raise StructureError(message, path=path)

    if not isinstance(doc, dict):
        fail("structure document must be an object", "$")
    units = doc.get("units")
    if units != "nm":
        fail(f"units must be \"nm\", got {units!r}", "units")

    def vec(node, path):
        if not isinstance(node, list) or len(node) != 3 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in node
        ):
            fail("expected a list of three numbers", path, node)
        return tuple(float(v) for v in node)

    def box(node, path):
        if not isinstance(node, dict):
            fail("expected an object with lo/hi", path, node)
        lo = vec(node.get("lo"), path + ".lo")
        hi = vec(node.get("hi"), path + ".hi")
        try:
            return Box(lo, hi)
        except ValueError as exc:
            fail(str(exc), path, node)

    def number(node, path, positive=True):
        if not isinstance(node, (int, float)) or isinstance(node, bool):
            fail("expected a number", path)
        if positive and not node > 0:
            fail("must be > 0", path)
        return float(node)

    conductors = []
    cnodes = doc.get("conductors")
    if not isinstance(cnodes, list) or not cnodes:
        fail("conductors must be a non-empty list", "conductors", cnodes if isinstance(cnodes, list) else None)
    anchor.append(cnodes)
    seen = set()
    for k, c in enumerate(cnodes):
        path = f"conductors[{k}]"
        if not isinstance(c, dict) or not isinstance(c.get("id"), int) or isinstance(c.get("id"), bool):
            fail("conductor needs an integer id", path, c)
        if c["id"] in seen:
            fail(f"duplicate conductor id {c['id']}", path, c)
        seen.add(c["id"])
        conductors.append((c["id"], box(c, path)))
    anchor.pop()

    dielectrics = []
    dnodes = doc.get("dielectrics", [])
    if not isinstance(dnodes, list):
        fail("dielectrics must be a list", "dielectrics")
    anchor.append(dnodes)
    for k, d in enumerate(dnodes):
        path = f"dielectrics[{k}]"
        b = box(d, path)
        anchor.append(d)
        dielectrics.append((b, number(d.get("eps"), path + ".eps")))
        anchor.pop()
    anchor.pop()

    background = number(doc.get("background_eps", 1.0), "background_eps")
    master = doc.get("master")
    if not isinstance(master, int) or isinstance(master, bool) or master not in seen:
        fail("master must be the id of a declared conductor", "master")

    if doc.get("world") is not None:
        world = box(doc["world"], "world")
        for k, (cid, b) in enumerate(conductors):
            if not world.contains_box(b):
                fail("conductor box outside world", f"conductors[{k}]", cnodes[k])
        for k, (b, _) in enumerate(dielectrics):
            if not world.contains_box(b):
                fail("dielectric box outside world", f"dielectrics[{k}]", dnodes[k])
    else:
        world = auto_world([b for _, b in conductors], world_margin)
        clipped = []
        for b, e in dielectrics:
            bb = b.intersect(world)
            if bb is not None:
                clipped.append((bb, e))
        dielectrics = clipped

    return Structure(tuple(conductors), tuple(dielectrics), background, world, master)


def auto_world(boxes: Sequence[Box], margin: float) -> Box:
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    center = 0.5 * (lo + hi)
    half = margin * 0.5 * float(np.max(hi - lo))
    return Box(tuple(center - half), tuple(center + half))


def load_structure(path, world_margin: float = 5.0) -> Structure:
    with open(path, encoding="utf-8") as fh:
        return parse_structure(fh.read(), world_margin=world_margin)


# --------------------------------------------------------------------------
# point queries (numba kernels + python wrappers)


@njit(cache=True)
def cheb_to_box(p, lo, hi):
    d = 0.0
    for k in range(3):
        g = max(lo[k] - p[k], p[k] - hi[k])
        if g > d:
            d = g
    return d


@njit(cache=True)
def wall_distance(p, wlo, whi):
    d = np.inf
    for k in range(3):
        d = min(d, p[k] - wlo[k], whi[k] - p[k])
    return d


@njit(cache=True)
def max_free(p, cond_lo, cond_hi, wlo, whi):
    """Largest conductor-free Chebyshev radius at p and the nearest conductor (-1: wall)."""
    w = wall_distance(p, wlo, whi)
    near = -1
    for c in range(cond_lo.shape[0]):
        d = cheb_to_box(p, cond_lo[c], cond_hi[c])
        if d < w:
            w = d
            near = c
    return w, near


@njit(cache=True)
def conductor_index_at(p, tol, cond_lo, cond_hi):
    for c in range(cond_lo.shape[0]):
        if cheb_to_box(p, cond_lo[c], cond_hi[c]) <= tol:
            return c
    return -1


@njit(cache=True)
def eps_at(p, diel_lo, diel_hi, diel_eps, background):
    for d in range(diel_eps.shape[0] - 1, -1, -1):
        inside = True
        for k in range(3):
            if not (diel_lo[d, k] <= p[k] < diel_hi[d, k]):
                inside = False
                break
        if inside:
            return diel_eps[d]
    return background


def _point(p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,):
        raise ValueError("point must be a 3-vector")
    return p


def _check_in_world(s: Structure, p):
    a = s.arrays
    if np.any(p < a.world_lo) or np.any(p > a.world_hi):
        raise ValueError(f"point {p.tolist()} lies outside the world box")


def permittivity_at(s: Structure, p) -> float:
    p = _point(p)
    _check_in_world(s, p)
    a = s.arrays
    return float(eps_at(p, a.diel_lo, a.diel_hi, a.diel_eps, a.background))


def conductor_at(s: Structure, p, tol: float = 0.0) -> Optional[int]:
    if tol < 0:
        raise ValueError("tol must be >= 0")
    a = s.arrays
    c = conductor_index_at(_point(p), float(tol), a.cond_lo, a.cond_hi)
    return None if c < 0 else int(a.cond_ids[c])


def max_free_cube(s: Structure, p):
    """Return ``(half_width, nearest_id)``; ``nearest_id`` is None when the world wall is nearest."""
    p = _point(p)
    _check_in_world(s, p)
    a = s.arrays
    w, near = max_free(p, a.cond_lo, a.cond_hi, a.world_lo, a.world_hi)
    if w <= 0.0:
        if near >= 0:
            raise ValueError(f"point {p.tolist()} is inside conductor {int(a.cond_ids[near])}")
        raise ValueError(f"point {p.tolist()} lies on the world boundary")
    return float(w), (None if near < 0 else int(a.cond_ids[near]))


# --------------------------------------------------------------------------
# lattices and compressed voxelization


@njit(cache=True)
def lattice_for_point(p, w, n):
    """Lattice of ``n`` voxels whose start node sits at p and whose box fits in radius w.

    Returns (low corner, pitch).
    """
    c = n // 2
    lo = np.empty(3)
    if n % 2 == 1:
        h = 2.0 * w / n
    else:
        h = 2.0 * w / (n + 1)
    for k in range(3):
        lo[k] = p[k] - (c + 0.5) * h
    return lo, h


@njit(cache=True)
def _first_center_at_or_above(x, lo, h, n):
    # smallest i with lo + (i + 0.5) * h >= x, evaluated exactly as voxel centers are
    i = math.ceil((x - lo) / h - 0.5)
    i = min(max(i, 0), n)
    while i > 0 and lo + (i - 0.5) * h >= x:
        i -= 1
    while i < n and lo + (i + 0.5) * h < x:
        i += 1
    return i


@njit(cache=True)
def _index_interval(blo, bhi, lo, h, n):
    """Voxels whose centers satisfy blo <= center < bhi."""
    return _first_center_at_or_above(blo, lo, h, n), _first_center_at_or_above(bhi, lo, h, n)


@njit(cache=True)
def _conductor_interval(blo, bhi, lo, h, n):
    """Like _index_interval, but a conductor overlapping the lattice keeps at
    least one voxel so walks cannot tunnel through thin conductors."""
    i0, i1 = _index_interval(blo, bhi, lo, h, n)
    top = lo + n * h
    if i1 <= i0 and blo < top and bhi > lo:
        mid = 0.5 * (max(blo, lo) + min(bhi, top))
        i0 = min(max(int(math.floor((mid - lo) / h)), 0), n - 1)
        i1 = i0 + 1
    return i0, i1


@njit(cache=True)
def compress_cube(lo, h, n, diel_lo, diel_hi, diel_eps, background, cond_lo, cond_hi, with_conductors):
    """Voxelize a lattice into a small rectilinear cell grid.

    Cell boundaries along each axis are the voxel indices where some box
    starts or ends, so every voxel in a cell has the same permittivity (and
    conductor) as the cell.  Returns ``maps`` (3, n) voxel->cell index,
    ``eps`` (cells) and ``cond`` (cells; conductor index or -1).
    """
    nd = diel_eps.shape[0]
    nc = cond_lo.shape[0] if with_conductors else 0
    nb = nd + nc
    ivals = np.empty((nb, 3, 2), dtype=np.int64)
    hit = np.zeros(nb, dtype=np.bool_)
    for b in range(nb):
        ok = True
        for k in range(3):
            if b < nd:
                i0, i1 = _index_interval(diel_lo[b, k], diel_hi[b, k], lo[k], h, n)
            else:
                i0, i1 = _conductor_interval(cond_lo[b - nd, k], cond_hi[b - nd, k], lo[k], h, n)
            if i1 <= i0:
                ok = False
                break
            ivals[b, k, 0] = i0
            ivals[b, k, 1] = i1
        hit[b] = ok

    maps = np.empty((3, n), dtype=np.int64)
    cuts_all = np.zeros((3, 2 * nb + 2), dtype=np.int64)
    ncells = np.zeros(3, dtype=np.int64)
    for k in range(3):
        flag = np.zeros(n + 1, dtype=np.bool_)
        flag[0] = True
        flag[n] = True
        for b in range(nb):
            if hit[b]:
                flag[ivals[b, k, 0]] = True
                flag[ivals[b, k, 1]] = True
        m = 0
        for i in range(n + 1):
            if flag[i]:
                cuts_all[k, m] = i
                m += 1
        ncells[k] = m - 1
        cell = -1
        for i in range(n):
            if flag[i]:
                cell += 1
            maps[k, i] = cell

    eps = np.full((ncells[0], ncells[1], ncells[2]), background)
    cond = np.full((ncells[0], ncells[1], ncells[2]), -1, dtype=np.int64)
    for b in range(nb):
        if not hit[b]:
            continue
        c0x = maps[0, ivals[b, 0, 0]]
        c0y = maps[1, ivals[b, 1, 0]]
        c0z = maps[2, ivals[b, 2, 0]]
        c1x = maps[0, ivals[b, 0, 1] - 1] + 1
        c1y = maps[1, ivals[b, 1, 1] - 1] + 1
        c1z = maps[2, ivals[b, 2, 1] - 1] + 1
        for a in range(c0x, c1x):
            for bb in range(c0y, c1y):
                for cc in range(c0z, c1z):
                    if b < nd:
                        eps[a, bb, cc] = diel_eps[b]
                    elif cond[a, bb, cc] < 0:
                        cond[a, bb, cc] = b - nd
    return maps, eps, cond


@njit(cache=True)
def _close(a, b):
    return abs(a - b) <= REL_TOL * max(abs(a), abs(b))


@njit(cache=True)
def classify_cells(eps, cond):
    """Return (kind, axis) for a compressed grid; conductor cells are ignored."""
    sx, sy, sz = eps.shape
    ref = -1.0
    uniform = True
    for a in range(sx):
        for b in range(sy):
            for c in range(sz):
                if cond[a, b, c] >= 0:
                    continue
                if ref < 0:
                    ref = eps[a, b, c]
                elif not _close(eps[a, b, c], ref):
                    uniform = False
    if uniform:
        return UNIFORM, -1
    for axis in range(3):
        ok = True
        n_slices = eps.shape[axis]
        for s in range(n_slices):
            sref = -1.0
            for a in range(sx):
                for b in range(sy):
                    for c in range(sz):
                        idx = a if axis == 0 else (b if axis == 1 else c)
                        if idx != s or cond[a, b, c] >= 0:
                            continue
                        if sref < 0:
                            sref = eps[a, b, c]
                        elif not _close(eps[a, b, c], sref):
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            return STRATIFIED, axis
    return GENERAL, -1


@njit(cache=True)
def expand_cells(maps, eps, cond, n):
    out = np.empty((n, n, n))
    mask = np.empty((n, n, n), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                out[i, j, k] = eps[maps[0, i], maps[1, j], maps[2, k]]
                mask[i, j, k] = cond[maps[0, i], maps[1, j], maps[2, k]]
    return out, mask


def classify_array(eps, mask=None):
    """Classify a full voxel array (same rule as the compressed path)."""
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    cond = np.full(eps.shape, -1, dtype=np.int64) if mask is None else np.ascontiguousarray(mask, dtype=np.int64)
    return classify_cells(eps, cond)


@dataclass(frozen=True)
class Tag:
    kind: int
    axis: Optional[int] = None

    @property
    def name(self):
        if self.kind == STRATIFIED:
            return f"stratified({AXES[self.axis]})"
        return _KIND_NAMES[self.kind]

    def __str__(self):
        return self.name


@dataclass(frozen=True, eq=False)
class DielectricGrid:
    """Voxel permittivities of one transition cube.

    ``lo`` and ``pitch`` place the lattice in space; ``start`` is the node
    the walk starts from.  ``conductor_mask`` holds conductor ids (-1 for
    dielectric voxels) and is only present for expanded cubes.
    """

    eps: np.ndarray
    lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    pitch: float = 1.0
    conductor_mask: Optional[np.ndarray] = None
    tag: Tag = None

    def __post_init__(self):
        eps = np.ascontiguousarray(self.eps, dtype=np.float64)
        if eps.ndim != 3 or len(set(eps.shape)) != 1 or eps.shape[0] < 1:
            raise ValueError("eps must be an N x N x N array")
        if not np.all(eps > 0):
            raise ValueError("permittivities must be positive")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        if self.conductor_mask is not None:
            m = np.ascontiguousarray(self.conductor_mask, dtype=np.int64)
            if m.shape != eps.shape:
                raise ValueError("conductor_mask shape mismatch")
            object.__setattr__(self, "conductor_mask", m)
        if self.tag is None:
            kind, axis = classify_array(eps, self.conductor_mask)
            object.__setattr__(self, "tag", Tag(int(kind), None if axis < 0 else int(axis)))

    @property
    def n(self) -> int:
        return self.eps.shape[0]

    @property
    def start(self):
        c = self.n // 2
        return (c, c, c)

    @property
    def start_point(self):
        return self.lo + (self.n // 2 + 0.5) * self.pitch

    @property
    def half_width(self):
        return 0.5 * self.n * self.pitch

    @property
    def center(self):
        return self.lo + self.half_width

    def scaled(self, factor) -> "DielectricGrid":
        return DielectricGrid(self.eps * factor, self.lo, self.pitch, self.conductor_mask)


def build_grid(s: Structure, cube, n: int, allow_conductors: bool = False) -> DielectricGrid:
    """Voxelize the cube ``(center, half_width)`` into an n^3 grid.

    ``cube`` may also be a ``(lo, pitch)`` pair via :func:`grid_from_lattice`.
    """
    center, half_width = cube
    center = _point(center)
    if n < 1:
        raise ValueError("n must be >= 1")
    if not half_width > 0:
        raise ValueError("half_width must be > 0")
    pitch = 2.0 * half_width / n
    lo = center - half_width
    a = s.arrays
    if np.any(lo < a.world_lo - 1e-12 * half_width) or np.any(lo + 2 * half_width > a.world_hi + 1e-12 * half_width):
        raise ValueError("cube extends outside the world box")
    return grid_from_lattice(s, lo, pitch, n, allow_conductors)


def grid_from_lattice(s: Structure, lo, pitch: float, n: int, allow_conductors: bool = False) -> DielectricGrid:
    a = s.arrays
    lo = np.asarray(lo, dtype=np.float64)
    maps, eps, cond = compress_cube(
        lo, float(pitch), int(n), a.diel_lo, a.diel_hi, a.diel_eps, a.background, a.cond_lo, a.cond_hi, True
    )
    full, mask = expand_cells(maps, eps, cond, int(n))
    if not allow_conductors:
        hi = lo + n * pitch
        overlap = np.all((a.cond_lo < hi) & (a.cond_hi > lo), axis=1)
        if np.any(mask >= 0) or np.any(overlap):
            raise ValueError("cube intersects a conductor; pass allow_conductors=True for expanded cubes")
        return DielectricGrid(full, lo, float(pitch))
    ids = np.where(mask >= 0, a.cond_ids[np.maximum(mask, 0)], -1)
    return DielectricGrid(full, lo, float(pitch), conductor_mask=ids)
