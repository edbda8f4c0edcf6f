"""Exact integer geometry of generalized Sierpinski carpets.

Everything in this module is integer arithmetic at a fixed grid
resolution: generator validation, level-n cell enumeration, face
adjacency, reflected-periodic folding maps, and the half-face move
graph.  No floating point enters any predicate.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CELL_BUDGET = 10**7


class StructuralError(ValueError):
    """Malformed generator data (distinct from an axiom failure)."""


class ResourceError(RuntimeError):
    """Requested refinement level exceeds the configured cell budget."""


@dataclass(frozen=True)
class CarpetSpec:
    """Generator of a generalized Sierpinski carpet.

    dim
        spatial dimension d >= 2
    scale
        length scale L >= 3 (side subdivision factor)
    retained
        sorted tuple of level-1 cube indices, each a d-tuple in
        {0, ..., L-1}^d
    """

    dim: int
    scale: int
    retained: tuple

    def __post_init__(self):
        if self.dim < 2:
            raise StructuralError("dimension must be >= 2")
        if self.scale < 3:
            raise StructuralError("length scale must be >= 3")
        ret = tuple(sorted(tuple(int(c) for c in idx) for idx in self.retained))
        if not ret:
            raise StructuralError("retained set is empty")
        if len(set(ret)) != len(ret):
            raise StructuralError("retained indices are not distinct")
        for idx in ret:
            if len(idx) != self.dim:
                raise StructuralError("index %r has wrong arity" % (idx,))
            if any(c < 0 or c >= self.scale for c in idx):
                raise StructuralError("index %r out of range" % (idx,))
        if len(ret) > self.scale**self.dim:
            raise StructuralError("more indices than subcubes")
        object.__setattr__(self, "retained", ret)

    @property
    def branching(self) -> int:
        """Number of retained subcubes per refinement (mass factor)."""
        return len(self.retained)

    @property
    def mass_dim(self) -> float:
        """Mass exponent log(m)/log(L)."""
        return math.log(self.branching) / math.log(self.scale)

    def cell_count(self, n: int) -> int:
        return self.branching**n

    def to_dict(self) -> dict:
        return {
            "dimension": self.dim,
            "length_scale": self.scale,
            "retained": [list(i) for i in self.retained],
        }

    def content_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _standard_carpet(d: int) -> CarpetSpec:
    mid = (1,) * d
    retained = [idx for idx in itertools.product(range(3), repeat=d) if idx != mid]
    return CarpetSpec(d, 3, tuple(retained))


def _menger() -> CarpetSpec:
    retained = [
        idx
        for idx in itertools.product(range(3), repeat=3)
        if sum(c == 1 for c in idx) <= 1
    ]
    return CarpetSpec(3, 3, tuple(retained))


def _full_square(d: int = 2, scale: int = 3) -> CarpetSpec:
    return CarpetSpec(d, scale, tuple(itertools.product(range(scale), repeat=d)))


PRESETS = {
    "sc2": _standard_carpet(2),
    "sc3": _standard_carpet(3),
    "menger": _menger(),
    "full2": _full_square(2),
}


def spec_from_dict(data: dict) -> CarpetSpec:
    try:
        d = int(data["dimension"])
        scale = int(data["length_scale"])
        retained = tuple(tuple(int(c) for c in idx) for idx in data["retained"])
    except (KeyError, TypeError, ValueError) as exc:
        raise StructuralError("bad carpet spec data: %s" % exc) from exc
    return CarpetSpec(d, scale, retained)


def load_spec(path_or_preset: str) -> CarpetSpec:
    """Load a spec from a JSON file, or resolve a named preset."""
    if path_or_preset in PRESETS:
        return PRESETS[path_or_preset]
    with open(path_or_preset, "r", encoding="utf-8") as fh:
        return spec_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# hyperoctahedral group
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Isometry:
    """Signed permutation: x_i -> signs[i] * x_perm[i] (cube symmetry)."""

    perm: tuple
    signs: tuple

    def compose(self, other: "Isometry") -> "Isometry":
        d = len(self.perm)
        perm = tuple(self.perm[other.perm[i]] for i in range(d))
        signs = tuple(self.signs[other.perm[i]] * other.signs[i] for i in range(d))
        return Isometry(perm, signs)

    def apply_index(self, idx: Sequence[int], scale: int) -> tuple:
        """Image of a subcube index in {0..scale-1}^d under the symmetry."""
        out = [0] * len(idx)
        for i in range(len(idx)):
            c = idx[self.perm[i]]
            out[i] = c if self.signs[i] == 1 else scale - 1 - c
        return tuple(out)


def hyperoctahedral_group(d: int) -> list:
    """All 2^d * d! signed permutations of d coordinates."""
    out = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            out.append(Isometry(perm, signs))
    return out


# ---------------------------------------------------------------------------
# validation (H1)-(H4)
# ---------------------------------------------------------------------------


@dataclass
class AxiomResult:
    name: str
    passed: bool
    witness: object = None

    def to_dict(self) -> dict:
        return {"axiom": self.name, "passed": self.passed, "witness": self.witness}


@dataclass
class ValidationReport:
    spec: CarpetSpec
    axioms: list = field(default_factory=list)
    nondiagonal_checked_to: int = 0

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.axioms)

    def failed_axioms(self) -> list:
        return [a for a in self.axioms if not a.passed]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "passed": self.passed,
            "axioms": [a.to_dict() for a in self.axioms],
            "nondiagonal_checked_to": self.nondiagonal_checked_to,
        }


def _check_symmetry(spec: CarpetSpec) -> AxiomResult:
    retained = set(spec.retained)
    for iso in hyperoctahedral_group(spec.dim):
        for idx in spec.retained:
            img = iso.apply_index(idx, spec.scale)
            if img not in retained:
                witness = {
                    "isometry": {"perm": list(iso.perm), "signs": list(iso.signs)},
                    "index": list(idx),
                    "image": list(img),
                }
                return AxiomResult("symmetry", False, witness)
    return AxiomResult("symmetry", True)


def _face_components(cells_set: set, d: int) -> list:
    """Connected components under shared-(d-1)-face adjacency."""
    seen = set()
    comps = []
    for start in sorted(cells_set):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        stack = [start]
        while stack:
            cur = stack.pop()
            for ax in range(d):
                for step in (-1, 1):
                    nxt = cur[:ax] + (cur[ax] + step,) + cur[ax + 1 :]
                    if nxt in cells_set and nxt not in seen:
                        seen.add(nxt)
                        comp.append(nxt)
                        stack.append(nxt)
        comps.append(comp)
    return comps


def _check_connectedness(spec: CarpetSpec) -> AxiomResult:
    comps = _face_components(set(spec.retained), spec.dim)
    if len(comps) == 1:
        return AxiomResult("connectedness", True)
    witness = {"components": [[list(c) for c in comp] for comp in comps[:2]]}
    return AxiomResult("connectedness", False, witness)


def _check_nondiagonality(spec: CarpetSpec, max_block_scale: int = 2) -> AxiomResult:
    """Every 2x...x2 block of level-m cubes meets the generator in a
    connected set, checked exactly for m <= max_block_scale by
    rasterizing the generator at resolution scale**m."""
    d, L = spec.dim, spec.scale
    retained = set(spec.retained)
    for m in range(1, max_block_scale + 1):
        res = L**m
        k = L ** (m - 1)  # pixels per level-1 cube side
        # pixel p (level-m cube) is in F_1 iff its level-1 ancestor is retained
        for anchor in itertools.product(range(res - 1), repeat=d):
            pixels = set()
            for off in itertools.product((0, 1), repeat=d):
                p = tuple(anchor[i] + off[i] for i in range(d))
                if tuple(p[i] // k for i in range(d)) in retained:
                    pixels.add(p)
            if not pixels:
                continue
            comps = _face_components(pixels, d)
            if len(comps) > 1:
                witness = {
                    "block_scale": m,
                    "anchor": list(anchor),
                    "components": [[list(c) for c in comp] for comp in comps],
                }
                return AxiomResult("nondiagonality", False, witness)
    return AxiomResult("nondiagonality", True)


def _check_borders(spec: CarpetSpec) -> AxiomResult:
    retained = set(spec.retained)
    missing = []
    for i in range(spec.scale):
        idx = (i,) + (0,) * (spec.dim - 1)
        if idx not in retained:
            missing.append(list(idx))
    if missing:
        return AxiomResult("borders", False, {"missing": missing})
    return AxiomResult("borders", True)


def validate(spec: CarpetSpec, max_block_scale: int = 2) -> ValidationReport:
    """Check (H1)-(H4). Non-diagonality is verified exactly for block
    scales m <= max_block_scale only; the bound is recorded in the report."""
    report = ValidationReport(spec, nondiagonal_checked_to=max_block_scale)
    report.axioms.append(_check_symmetry(spec))
    report.axioms.append(_check_connectedness(spec))
    report.axioms.append(_check_nondiagonality(spec, max_block_scale))
    report.axioms.append(_check_borders(spec))
    return report


# ---------------------------------------------------------------------------
# cells
# ---------------------------------------------------------------------------


def cells(spec: CarpetSpec, n: int, budget: int = DEFAULT_CELL_BUDGET) -> np.ndarray:
    """All level-n cell coordinates, lexicographically sorted.

    Returns an (m**n, d) int64 array; row k is the coordinate tuple of
    cell k in {0, ..., L**n - 1}^d.
    """
    if n < 0:
        raise ValueError("level must be >= 0")
    if spec.cell_count(n) > budget:
        raise ResourceError(
            "level %d needs %d cells (budget %d)" % (n, spec.cell_count(n), budget)
        )
    base = np.array(spec.retained, dtype=np.int64)
    out = np.zeros((1, spec.dim), dtype=np.int64)
    for _ in range(n):
        # every cell spawns one child per retained index
        out = (out[:, None, :] * spec.scale + base[None, :, :]).reshape(-1, spec.dim)
    order = np.lexsort(out.T[::-1])
    return out[order]


def cell_lookup(spec: CarpetSpec, n: int, cell_array: np.ndarray | None = None):
    """Dense coords -> index grid (-1 for holes). Convenient at desk levels."""
    if cell_array is None:
        cell_array = cells(spec, n)
    side = spec.scale**n
    grid = np.full((side,) * spec.dim, -1, dtype=np.int64)
    grid[tuple(cell_array.T)] = np.arange(len(cell_array))
    return grid


def cell_in_carpet(spec: CarpetSpec, n: int, coords: Sequence[int]) -> bool:
    """True iff every base-L digit prefix of coords is retained."""
    L = spec.scale
    coords = tuple(int(c) for c in coords)
    if any(c < 0 or c >= L**n for c in coords):
        return False
    retained = set(spec.retained)
    for j in range(1, n + 1):
        digit = tuple((c // L ** (n - j)) % L for c in coords)
        if digit not in retained:
            return False
    return True


def adjacency(spec: CarpetSpec, n: int, cell_array: np.ndarray | None = None) -> np.ndarray:
    """Undirected edges (pairs of cell indices) between cells whose cubes
    share a full (d-1)-face. Shape (E, 2), u < v, lexicographically sorted."""
    if cell_array is None:
        cell_array = cells(spec, n)
    grid = cell_lookup(spec, n, cell_array)
    side = spec.scale**n
    edges = []
    for ax in range(spec.dim):
        shifted = cell_array.copy()
        shifted[:, ax] += 1
        ok = shifted[:, ax] < side
        nbr = np.full(len(cell_array), -1, dtype=np.int64)
        nbr[ok] = grid[tuple(shifted[ok].T)]
        src = np.nonzero(nbr >= 0)[0]
        edges.append(np.stack([src, nbr[src]], axis=1))
    e = np.concatenate(edges, axis=0)
    e.sort(axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    return e[order]


def boundary_cells(spec: CarpetSpec, n: int, axis: int, side: int,
                   cell_array: np.ndarray | None = None) -> np.ndarray:
    """Indices of cells on the face {x_axis = side} (side 0 or 1)."""
    if cell_array is None:
        cell_array = cells(spec, n)
    target = 0 if side == 0 else spec.scale**n - 1
    return np.nonzero(cell_array[:, axis] == target)[0]


# ---------------------------------------------------------------------------
# grid points and folding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridPoint:
    """Lattice point coords * L**-resolution, coords in {0..L**r}^d."""

    resolution: int
    coords: tuple

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))

    def refine(self, spec: CarpetSpec, resolution: int) -> "GridPoint":
        if resolution < self.resolution:
            raise ValueError("cannot coarsen a grid point")
        f = spec.scale ** (resolution - self.resolution)
        return GridPoint(resolution, tuple(c * f for c in self.coords))


def point_in_carpet(spec: CarpetSpec, p: GridPoint) -> bool:
    """True iff the point lies in the closure of some level-r retained cell."""
    r, L = p.resolution, spec.scale
    side = L**r
    if any(c < 0 or c > side for c in p.coords):
        return False
    choices = []
    for c in p.coords:
        cand = [x for x in (c - 1, c) if 0 <= x < side]
        if not cand:
            return False
        choices.append(cand)
    return any(
        cell_in_carpet(spec, r, combo) for combo in itertools.product(*choices)
    )


def fold(spec: CarpetSpec, level: int, cell: Sequence[int], p: GridPoint) -> GridPoint:
    """Reflected-periodic projection of p onto the level-`level` cell.

    The point must be at resolution >= level; the result is exact and
    lies in the closed cell.
    """
    if p.resolution < level:
        raise ValueError("point resolution below cell level")
    if not point_in_carpet(spec, p):
        raise ValueError("point not in the carpet at its resolution")
    K = spec.scale ** (p.resolution - level)
    out = []
    for ci, pi in zip(cell, p.coords):
        y = int(ci) * K
        t = (pi - y) % (2 * K)
        out.append(y + (t if t <= K else 2 * K - t))
    return GridPoint(p.resolution, tuple(out))


def fold_cell(
    spec: CarpetSpec,
    target_level: int,
    target: Sequence[int],
    n: int,
    cell: Sequence[int],
) -> tuple:
    """Image of a level-n cell under the folding map onto a level-
    `target_level` cell (target_level <= n). Exact on cell indices."""
    if target_level > n:
        raise ValueError("target level must be <= cell level")
    K = spec.scale ** (n - target_level)
    out = []
    for si, ci in zip(target, cell):
        y = int(si) * K
        t = (int(ci) - y) % (2 * K)
        out.append(y + (t if t < K else 2 * K - 1 - t))
    return tuple(out)


def associated(spec: CarpetSpec, p: GridPoint, q: GridPoint, m: int) -> bool:
    """True iff p and q fold to the same point of one (hence every)
    level-m cell."""
    r = max(p.resolution, q.resolution, m)
    p = p.refine(spec, r)
    q = q.refine(spec, r)
    s0 = tuple(cells(spec, m)[0]) if m > 0 else (0,) * spec.dim
    return fold(spec, m, s0, p) == fold(spec, m, s0, q)


# ---------------------------------------------------------------------------
# half-face move graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HalfFace:
    """Level-n half-face: plane {x_axis = anchor[axis]/2 * L**-n} spanning
    [anchor[j]/2, (anchor[j]+1)/2] * L**-n on the other axes.

    anchor is in half-grid units (anchor[axis] is even).
    """

    level: int
    axis: int
    anchor: tuple

    def box(self) -> list:
        """Per-axis [lo, hi] in half-grid units."""
        out = []
        for j, a in enumerate(self.anchor):
            out.append((a, a) if j == self.axis else (a, a + 1))
        return out

    def center2(self) -> tuple:
        """Center in quarter-grid units (exact integers)."""
        return tuple(lo + hi for lo, hi in self.box())


def _halfface_in_carpet(spec: CarpetSpec, hf: HalfFace) -> bool:
    """A half-face lies in F_n iff one of its two incident cubes is a cell."""
    n, i = hf.level, hf.axis
    plane = hf.anchor[i] // 2
    base = [a // 2 for a in hf.anchor]
    for ci in (plane - 1, plane):
        cand = list(base)
        cand[i] = ci
        if cell_in_carpet(spec, n, cand):
            return True
    return False


def halffaces(spec: CarpetSpec, n: int) -> list:
    """All level-n half-faces contained in F_n."""
    side = spec.scale**n
    out = []
    for i in range(spec.dim):
        ranges = []
        for j in range(spec.dim):
            if j == i:
                ranges.append(range(0, 2 * side + 1, 2))
            else:
                ranges.append(range(0, 2 * side))
        for anchor in itertools.product(*ranges):
            hf = HalfFace(n, i, anchor)
            if _halfface_in_carpet(spec, hf):
                out.append(hf)
    return out


def _shares_cube(a: HalfFace, b: HalfFace, side: int) -> bool:
    """True iff a cube of the level-n lattice contains both half-faces."""
    for (alo, ahi), (blo, bhi) in zip(a.box(), b.box()):
        lo, hi = min(alo, blo), max(ahi, bhi)
        c_min = max(-(-(hi - 2) // 2), 0)
        c_max = min(lo // 2, side - 1)
        if c_min > c_max:
            return False
    return True


def halfface_graph(spec: CarpetSpec, n: int):
    """Vertices: level-n half-faces in F_n. Edges: pairs meeting in a
    (d-2)-dimensional set inside a common lattice cube, labeled 'corner'
    (different normal axes) or 'slide' (same normal axis)."""
    verts = halffaces(spec, n)
    side = spec.scale**n
    index = {hf: k for k, hf in enumerate(verts)}
    edges = []
    # bucket by cube to avoid the quadratic scan over all pairs
    buckets: dict = {}
    for k, hf in enumerate(verts):
        cubes = []
        for (lo, hi) in hf.box():
            c_min = max(-(-(hi - 2) // 2), 0)
            c_max = min(lo // 2, side - 1)
            cubes.append(range(c_min, c_max + 1))
        for cube in itertools.product(*cubes):
            buckets.setdefault(cube, []).append(k)
    seen = set()
    for members in buckets.values():
        for u, v in itertools.combinations(members, 2):
            if (u, v) in seen:
                continue
            a, b = verts[u], verts[v]
            dim = 0
            empty = False
            for (alo, ahi), (blo, bhi) in zip(a.box(), b.box()):
                lo, hi = max(alo, blo), min(ahi, bhi)
                if lo > hi:
                    empty = True
                    break
                if hi > lo:
                    dim += 1
            if empty or dim != spec.dim - 2:
                continue
            seen.add((u, v))
            label = "corner" if a.axis != b.axis else "slide"
            edges.append((u, v, label))
    edges.sort(key=lambda e: (e[0], e[1]))
    return verts, edges


def graph_connected(n_vertices: int, edges: Iterable) -> bool:
    if n_vertices == 0:
        return True
    adj: dict = {i: [] for i in range(n_vertices)}
    for e in edges:
        u, v = e[0], e[1]
        adj[u].append(v)
        adj[v].append(u)
    seen = {0}
    stack = [0]
    while stack:
        cur = stack.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == n_vertices
