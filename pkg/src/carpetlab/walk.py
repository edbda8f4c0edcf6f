"""Random walks on carpet cell graphs.

Mean exit times by exact linear solve, Monte Carlo half-face move
probabilities, mirror-coupled walk pairs, discrete Harnack ratios, and
heat-kernel exponent estimation. All Monte Carlo paths draw from a
counter-based generator keyed by (seed, stream, step), so results are
bit-identical regardless of batching or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import geometry, network
from .geometry import CarpetSpec, GridPoint, HalfFace


@dataclass
class WalkConfig:
    seed: int = 0
    samples: int = 100_000
    step_cap: int = 1_000_000
    laziness: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.laziness < 1.0:
            raise ValueError("laziness must lie in (0,1)")


# ---------------------------------------------------------------------------
# counter-based RNG (splitmix64 finalizer)
# ---------------------------------------------------------------------------

_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _C1
    z = (z ^ (z >> np.uint64(27))) * _C2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream, step: int) -> np.ndarray:
    """Uniform [0,1) numbers indexed by (seed, stream, step)."""
    s = np.asarray(stream, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _mix64(np.uint64(seed) * _GOLD + s + np.uint64(1))
        z = _mix64(z + np.uint64(step) * _GOLD)
    return (z >> np.uint64(11)) * 2.0**-53


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@dataclass
class CellWalk:
    """Level-n cell graph with the tables both kernels need."""

    spec: CarpetSpec
    level: int
    cells: np.ndarray
    neighbor: np.ndarray  # (N, 2d) cell index or -1
    degree: np.ndarray
    nbr_packed: np.ndarray  # (N, max_deg) valid neighbors left-packed

    @classmethod
    def build(cls, spec: CarpetSpec, n: int) -> "CellWalk":
        ca = geometry.cells(spec, n)
        N = len(ca)
        d = spec.dim
        lookup = {tuple(c): i for i, c in enumerate(ca)}
        nb = np.full((N, 2 * d), -1, dtype=np.int64)
        for i, c in enumerate(ca):
            for ax in range(d):
                for k, s in enumerate((-1, 1)):
                    t = list(c)
                    t[ax] += s
                    j = lookup.get(tuple(t))
                    if j is not None:
                        nb[i, 2 * ax + k] = j
        deg = (nb >= 0).sum(axis=1)
        packed = np.full((N, 2 * d), -1, dtype=np.int64)
        for i in range(N):
            good = nb[i][nb[i] >= 0]
            packed[i, : len(good)] = good
        return cls(spec, n, ca, nb, deg.astype(np.int64), packed)

    def transition_matrix(self, laziness: float = 0.5) -> sp.csr_matrix:
        """Lazy simple random walk; reversible wrt the degree measure."""
        N = len(self.cells)
        rows, cols, vals = [], [], []
        for i in range(N):
            rows.append(i)
            cols.append(i)
            vals.append(laziness)
            for j in self.nbr_packed[i]:
                if j < 0:
                    break
                rows.append(i)
                cols.append(int(j))
                vals.append((1.0 - laziness) / self.degree[i])
        return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))

    def step_lazy(self, pos: np.ndarray, u: np.ndarray,
                  laziness: float = 0.5) -> np.ndarray:
        """Vectorized lazy simple-walk step driven by uniforms u."""
        move = u >= laziness
        out = pos.copy()
        if np.any(move):
            frac = (u[move] - laziness) / (1.0 - laziness)
            k = np.minimum((frac * self.degree[pos[move]]).astype(np.int64),
                           self.degree[pos[move]] - 1)
            out[move] = self.nbr_packed[pos[move], k]
        return out

    def propose(self, u: np.ndarray, laziness: float = 0.5):
        """Direction proposal: (move?, axis, sign) per sample.
        Invalid proposals are resolved by the caller (stay in place),
        which keeps the kernel reversible wrt the uniform measure."""
        d = self.spec.dim
        move = u >= laziness
        frac = np.where(move, (u - laziness) / (1.0 - laziness), 0.0)
        k = np.minimum((frac * 2 * d).astype(np.int64), 2 * d - 1)
        return move, k // 2, np.where(k % 2 == 0, -1, 1)

    def step_proposal(self, pos: np.ndarray, u: np.ndarray,
                      laziness: float = 0.5) -> np.ndarray:
        move, ax, sgn = self.propose(u, laziness)
        slot = 2 * ax + (sgn > 0)
        target = self.neighbor[pos, slot]
        ok = move & (target >= 0)
        return np.where(ok, target, pos)


def center_cell(spec: CarpetSpec, n: int, cells_arr: np.ndarray | None = None) -> int:
    """Lex-least retained cell nearest the carpet center."""
    ca = geometry.cells(spec, n) if cells_arr is None else cells_arr
    mid = (spec.scale**n - 1) / 2.0
    dist = np.abs(ca - mid).max(axis=1)
    best = dist.min()
    return int(np.nonzero(dist == best)[0][0])


# ---------------------------------------------------------------------------
# exit times
# ---------------------------------------------------------------------------


def _outer_boundary(spec: CarpetSpec, n: int, ca: np.ndarray) -> np.ndarray:
    side = spec.scale**n
    on = (ca == 0) | (ca == side - 1)
    return np.nonzero(on.any(axis=1))[0]


def mean_exit_steps(spec: CarpetSpec, n: int, laziness: float = 0.5,
                    rtol: float = network.CG_RTOL) -> dict:
    """Expected steps for the lazy walk to the absorbing outer boundary,
    by solving L u = D 1/(1-laziness) on the interior.

    `steps` is the stationary (degree-weighted) average over interior
    cells, which reaches its asymptotic level-to-level ratio much sooner
    than any single starting cell; `center_steps` is the value at the
    cell nearest the center.
    """
    ca = geometry.cells(spec, n)
    w = CellWalk.build(spec, n)
    absorb = _outer_boundary(spec, n, ca)
    mask = np.ones(len(ca), dtype=bool)
    mask[absorb] = False
    interior = np.nonzero(mask)[0]
    start = center_cell(spec, n, ca)
    if interior.size == 0 or start not in set(interior.tolist()):
        return {"level": n, "steps": 0.0, "center_steps": 0.0,
                "interior": int(interior.size), "degenerate": True}
    edges = geometry.adjacency(spec, n)
    net = network.ResistanceNetwork(len(ca), edges[:, 0].copy(),
                                    edges[:, 1].copy(), np.ones(len(edges)))
    L = net.laplacian().tocsr()[interior][:, interior]
    deg = w.degree[interior].astype(float)
    rhs = deg / (1.0 - laziness)
    if len(interior) <= network.DENSE_SOLVE_LIMIT:
        u = scipy.linalg.solve(L.toarray(), rhs, assume_a="pos")
        res = 0.0
    else:
        import scipy.sparse.linalg as spla

        M = sp.diags(1.0 / L.diagonal())
        u, info = spla.cg(L, rhs, rtol=rtol, atol=0.0, M=M,
                          maxiter=int(50 * math.sqrt(len(interior))) + 100)
        if info != 0:
            raise network.SolverError("exit-time CG failed (info=%d)" % info)
        res = float(np.linalg.norm(L @ u - rhs) / np.linalg.norm(rhs))
    pos = int(np.searchsorted(interior, start))
    return {"level": n, "steps": float((u * deg).sum() / deg.sum()),
            "center_steps": float(u[pos]), "interior": int(interior.size),
            "degenerate": False, "residual": res}


def exit_time_scaling(spec: CarpetSpec, n_max: int,
                      config: WalkConfig | None = None) -> dict:
    """Mean exit steps per level and successive ratios."""
    if n_max < 2:
        raise ValueError("need n_max >= 2")
    rows = [mean_exit_steps(spec, n) for n in range(0, n_max + 1)]
    ratios = []
    for a, b in zip(rows[:-1], rows[1:]):
        if a["steps"] > 0 and b["steps"] > 0:
            ratios.append({"from_level": a["level"], "ratio": b["steps"] / a["steps"]})
    return {"levels": rows, "ratios": ratios}


def exit_time_monte_carlo(spec: CarpetSpec, n: int, config: WalkConfig) -> dict:
    """Monte Carlo mean exit steps for the same kernel; validation tool."""
    ca = geometry.cells(spec, n)
    w = CellWalk.build(spec, n)
    absorb = np.zeros(len(ca), dtype=bool)
    absorb[_outer_boundary(spec, n, ca)] = True
    start = center_cell(spec, n, ca)
    S = config.samples
    pos = np.full(S, start, dtype=np.int64)
    steps = np.zeros(S, dtype=np.int64)
    active = ~absorb[pos]
    t = 0
    stream = np.arange(S, dtype=np.uint64)
    while np.any(active) and t < config.step_cap:
        idx = np.nonzero(active)[0]
        u = counter_uniform(config.seed, stream[idx], t)
        pos[idx] = w.step_lazy(pos[idx], u, config.laziness)
        t += 1
        steps[idx] += 1
        active[idx] = ~absorb[pos[idx]]
    if np.any(active):
        raise network.SolverError("walkers exceeded the step cap")
    mean = float(steps.mean())
    se = float(steps.std(ddof=1) / math.sqrt(S))
    return {"level": n, "mean": mean, "se": se, "samples": S}


# ---------------------------------------------------------------------------
# half-face move probabilities
# ---------------------------------------------------------------------------


def _incident_cells(spec: CarpetSpec, hf: HalfFace, N: int,
                    ca: np.ndarray, doubled_f: int) -> np.ndarray:
    """Level-N cells whose face lies inside the level-n half-face.
    doubled_f = L**(N - hf.level); comparisons in doubled level-N units."""
    f = doubled_f
    box = hf.box()
    ax = hf.axis
    plane = box[ax][0] * f  # even
    half = plane // 2
    ok = (ca[:, ax] == half) | (ca[:, ax] == half - 1)
    for j, (lo, hi) in enumerate(box):
        if j == ax:
            continue
        ok &= (2 * ca[:, j] >= lo * f) & (2 * ca[:, j] + 2 <= hi * f)
    return np.nonzero(ok)[0]


def move_domain(spec: CarpetSpec, a0: HalfFace, a1: HalfFace):
    """The move vertex v* and the box R spanned by the 2**d lattice
    cubes containing v*, in level-n cell units."""
    n = a0.level
    side = spec.scale**n
    if a1.level != n:
        raise ValueError("half-faces must share a level")
    # a retained cube containing both half-faces
    q_star = None
    for cube in _common_cubes(a0, a1, side):
        if geometry.cell_in_carpet(spec, n, cube):
            q_star = cube
            break
    if q_star is None:
        raise ValueError("half-face pair is not an edge of the move graph")
    # the unique vertex of q_star lying on a0
    v = []
    for j, a in enumerate(a0.anchor):
        if j == a0.axis:
            v.append(a // 2)
        else:
            v.append(a // 2 if a % 2 == 0 else a // 2 + 1)
    v = tuple(v)
    lo = tuple(x - 1 for x in v)
    hi = v  # cubes [lo_j, lo_j+1) and [v_j, v_j+1) per axis
    return v, lo, hi


def _common_cubes(a: HalfFace, b: HalfFace, side: int):
    import itertools

    ranges = []
    for (alo, ahi), (blo, bhi) in zip(a.box(), b.box()):
        lo, hi = min(alo, blo), max(ahi, bhi)
        c_min = max(-(-(hi - 2) // 2), 0)
        c_max = min(lo // 2, side - 1)
        if c_min > c_max:
            return
        ranges.append(range(c_min, c_max + 1))
    yield from itertools.product(*ranges)


def move_probability(spec: CarpetSpec, n: int, a0: HalfFace, a1: HalfFace,
                     config: WalkConfig, depth: int = 2) -> dict:
    """Monte Carlo estimate that a walk from A0 hits A1 before leaving
    the union R of the 2**d level-n cubes around the move vertex.

    Simulated on level n+depth cells with the direction-proposal kernel.
    Reports a Wilson interval and the dimensional floors q0 = 2**(-2d^2),
    q0*q1 with q1 = 2**(-d*2**d).
    """
    d = spec.dim
    v, lo, hi = move_domain(spec, a0, a1)
    N = n + depth
    f = spec.scale**depth
    ca = geometry.cells(spec, N)
    w = CellWalk.build(spec, N)
    lo_c = np.array(lo) * f
    hi_c = (np.array(hi) + 1) * f  # exclusive
    in_R = np.all((ca >= lo_c) & (ca < hi_c), axis=1)
    # failure layer: cells of R with a face on the relative boundary of R
    edge = (ca == lo_c) | (ca == hi_c - 1)
    fail = in_R & edge.any(axis=1)
    starts = _incident_cells(spec, a0, N, ca, f)
    starts = starts[in_R[starts] & ~fail[starts]]
    succ_cells = np.zeros(len(ca), dtype=bool)
    succ_cells[_incident_cells(spec, a1, N, ca, f)] = True
    if starts.size == 0:
        raise ValueError("no admissible start cells for this move")
    S = config.samples
    pos = starts[np.arange(S) % len(starts)].astype(np.int64)
    stream = np.arange(S, dtype=np.uint64)
    state = np.zeros(S, dtype=np.int8)  # 0 active, 1 success, 2 failure
    state[succ_cells[pos]] = 1
    t = 0
    while np.any(state == 0) and t < config.step_cap:
        idx = np.nonzero(state == 0)[0]
        u = counter_uniform(config.seed, stream[idx], t)
        new = w.step_proposal(pos[idx], u, config.laziness)
        pos[idx] = new
        hit = succ_cells[new]
        out = ~in_R[new] | fail[new]
        state[idx[hit]] = 1
        state[idx[~hit & out]] = 2
        t += 1
    if np.any(state == 0):
        raise network.SolverError("move walkers exceeded the step cap")
    k = int((state == 1).sum())
    est = k / S
    lo99, hi99 = wilson_interval(k, S, z=2.5758293035489004)
    q0 = 2.0 ** (-2 * d * d)
    q1 = 2.0 ** (-d * 2**d)
    return {
        "level": n,
        "sim_level": N,
        "samples": S,
        "successes": k,
        "estimate": est,
        "wilson_99": [lo99, hi99],
        "q0": q0,
        "q0q1": q0 * q1,
        "clears_floor": lo99 > q0 * q1,
        "anomaly": k == 0 or hi99 < q0 * q1,
        "steps_used": t,
    }


def wilson_interval(k: int, n: int, z: float = 1.959963984540054):
    p = k / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(center - half, 0.0), min(center + half, 1.0)


# ---------------------------------------------------------------------------
# mirror coupling
# ---------------------------------------------------------------------------


def _incident_retained_cells(spec: CarpetSpec, n: int, p: GridPoint,
                             lookup: dict) -> list:
    """Retained level-n cells whose closure contains p, lex sorted."""
    import itertools

    q = p.refine(spec, max(p.resolution, n))
    K = spec.scale ** (q.resolution - n)
    side = spec.scale**n
    choices = []
    for c in q.coords:
        base = c // K
        cand = sorted({x for x in (base - (1 if c % K == 0 else 0), base)
                       if 0 <= x < side})
        choices.append(cand)
    out = [combo for combo in itertools.product(*choices) if combo in lookup]
    if not out:
        raise ValueError("point does not meet any retained cell")
    return out


def _closest_cell_pair(spec: CarpetSpec, n: int, x: GridPoint, y: GridPoint,
                       lookup: dict):
    """Pair of retained cells containing x and y at minimal separation."""
    ax_cells = _incident_retained_cells(spec, n, x, lookup)
    ay_cells = _incident_retained_cells(spec, n, y, lookup)
    best = None
    for a in ax_cells:
        for b in ay_cells:
            d = max(abs(ai - bi) for ai, bi in zip(a, b))
            key = (d, a, b)
            if best is None or key < best:
                best = key
    return best[1], best[2]


def coupling_experiment(spec: CarpetSpec, n: int, x: GridPoint, y: GridPoint,
                        m: int, r: float, config: WalkConfig) -> dict:
    """Mirror-coupled lazy walk pair from an m-associated mirror pair.

    The second walk mirrors the first across their separating hyperplane
    until the mirror symmetry of available moves breaks (then they run
    independently) or they meet. Success = meeting before either leaves
    the ball B(x, r).
    """
    if not geometry.associated(spec, x, y, m):
        raise ValueError("points are not m-associated")
    ca = geometry.cells(spec, n)
    lookup = {tuple(c): i for i, c in enumerate(ca)}
    cx, cy = _closest_cell_pair(spec, n, x, y, lookup)
    if cx == cy:
        return {"probability": 1.0, "se": 0.0, "samples": config.samples,
                "trivial": True}
    diff = [j for j in range(spec.dim) if cx[j] != cy[j]]
    if len(diff) != 1:
        raise ValueError("mirror coupling needs a pair differing on one axis")
    ax = diff[0]
    refl_c = cx[ax] + cy[ax]  # reflect: c -> refl_c - c along ax
    w = CellWalk.build(spec, n)
    side = spec.scale**n
    # reflection as a partial cell map
    refl = np.full(len(ca), -1, dtype=np.int64)
    for i, c in enumerate(ca):
        t = list(c)
        t[ax] = refl_c - t[ax]
        if 0 <= t[ax] < side:
            j = lookup.get(tuple(t))
            if j is not None:
                refl[i] = j
    dist_cells = max(1, int(math.ceil(r * side - 0.5)))
    c0 = np.array(cx)
    ball = np.max(np.abs(ca - c0), axis=1) <= dist_cells
    S = config.samples
    i1 = np.full(S, lookup[cx], dtype=np.int64)
    i2 = np.full(S, lookup[cy], dtype=np.int64)
    mirror = np.ones(S, dtype=bool)
    state = np.zeros(S, dtype=np.int8)  # 0 active, 1 met, 2 exited
    stream = np.arange(S, dtype=np.uint64)
    t = 0
    nb = w.neighbor
    while np.any(state == 0) and t < config.step_cap:
        idx = np.nonzero(state == 0)[0]
        u1 = counter_uniform(config.seed, 2 * stream[idx], t)
        move, a, s = w.propose(u1, config.laziness)
        slot1 = 2 * a + (s > 0)
        tgt1 = nb[i1[idx], slot1]
        ok1 = move & (tgt1 >= 0)
        new1 = np.where(ok1, tgt1, i1[idx])
        # mirrored proposal for the coupled phase
        s2 = np.where(a == ax, -s, s)
        slot2 = 2 * a + (s2 > 0)
        tgt2 = nb[i2[idx], slot2]
        ok2 = move & (tgt2 >= 0)
        new2_m = np.where(ok2, tgt2, i2[idx])
        # meet rule: adjacent across the plane and walk 1 steps onto
        # walk 2's cell -> walk 2 stays and they meet
        onto = ok1 & (new1 == i2[idx])
        new2_m = np.where(onto, i2[idx], new2_m)
        # mirror symmetry breaks when move validities differ
        brk = mirror[idx] & move & (ok1 != ok2) & ~onto
        # independent phase: walk 2 uses its own stream
        u2 = counter_uniform(config.seed, 2 * stream[idx] + 1, t)
        new2_i = w.step_proposal(i2[idx], u2, config.laziness)
        use_mirror = mirror[idx] & ~brk
        new2 = np.where(use_mirror, new2_m, new2_i)
        mirror[idx] = use_mirror & (refl[new1] == new2)
        i1[idx] = new1
        i2[idx] = new2
        met = new1 == new2
        exited = ~ball[new1] | ~ball[new2]
        state[idx[met]] = 1
        state[idx[~met & exited]] = 2
        t += 1
    if np.any(state == 0):
        raise network.SolverError("coupling walkers exceeded the step cap")
    k = int((state == 1).sum())
    p = k / S
    se = math.sqrt(max(p * (1 - p), 1e-300) / S)
    return {"probability": p, "se": se, "samples": S, "met": k,
            "ball_cells": int(ball.sum()), "separation_cells":
            int(abs(cx[ax] - cy[ax])), "trivial": False}


# ---------------------------------------------------------------------------
# Harnack ratios
# ---------------------------------------------------------------------------


def harnack_ratio(spec: CarpetSpec, n: int, center, R: float) -> dict:
    """Worst sup/inf over the half ball of nonnegative harmonic functions
    on the ball B(center, R), one per boundary vertex indicator."""
    ca = geometry.cells(spec, n)
    side = spec.scale**n
    centers = (ca + 0.5) / side
    x0 = np.asarray(center, dtype=float)
    dist = np.max(np.abs(centers - x0[None, :]), axis=1)
    ball = dist <= R
    if not np.any(~ball):
        raise ValueError("ball covers the whole carpet")
    w = CellWalk.build(spec, n)
    nb = w.nbr_packed
    # boundary: ball cells with a neighbor outside the ball
    is_bdy = np.zeros(len(ca), dtype=bool)
    for i in np.nonzero(ball)[0]:
        for j in nb[i]:
            if j < 0:
                break
            if not ball[j]:
                is_bdy[i] = True
                break
    interior = np.nonzero(ball & ~is_bdy)[0]
    bdy = np.nonzero(ball & is_bdy)[0]
    half = np.nonzero(dist <= R / 2)[0]
    if half.size == 0 or interior.size == 0 or bdy.size == 0:
        raise ValueError("ball too small at this level")
    if not set(half.tolist()) <= set(interior.tolist()):
        raise ValueError("half ball reaches the boundary layer; increase R or n")
    edges = geometry.adjacency(spec, n)
    net = network.ResistanceNetwork(len(ca), edges[:, 0].copy(),
                                    edges[:, 1].copy(), np.ones(len(edges)))
    L = net.laplacian().toarray()
    L_ii = L[np.ix_(interior, interior)]
    L_ib = L[np.ix_(interior, bdy)]
    U = scipy.linalg.solve(L_ii, -L_ib, assume_a="pos")  # (interior, bdy)
    pos_of = {int(c): k for k, c in enumerate(interior)}
    rows = np.array([pos_of[int(h)] for h in half])
    ratios = []
    for b in range(len(bdy)):
        vals = U[rows, b]
        if vals.min() <= 0:
            raise ValueError("harmonic function vanishes on the half ball; "
                             "ball interior is disconnected")
        ratios.append(float(vals.max() / vals.min()))
    return {
        "level": n,
        "center": list(map(float, x0)),
        "R": R,
        "ball_cells": int(ball.sum()),
        "boundary_cells": int(bdy.size),
        "half_ball_cells": int(half.size),
        "max_ratio": max(ratios),
        "median_ratio": float(np.median(ratios)),
    }


# ---------------------------------------------------------------------------
# heat kernel
# ---------------------------------------------------------------------------


@dataclass
class HeatKernelEstimate:
    level: int
    mode: str
    times: list
    rho_diag: list  # p_t(x,x)/pi(x)
    window: tuple
    ds_hat: float
    ds_reference: float
    eta_hat: float | None
    eta_reference: float
    row_sum_error: float
    offdiag: list = field(default_factory=list)
    mc_se: list | None = None

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "mode": self.mode,
            "times": self.times,
            "rho_diag": self.rho_diag,
            "window": list(self.window),
            "ds_hat": self.ds_hat,
            "ds_reference": self.ds_reference,
            "eta_hat": self.eta_hat,
            "eta_reference": self.eta_reference,
            "row_sum_error": self.row_sum_error,
            "offdiag": self.offdiag,
            "mc_se": self.mc_se,
        }


def _fit_slope(xs, ys):
    x = np.asarray(xs)
    y = np.asarray(ys)
    A = np.vstack([x, np.ones_like(x)]).T
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(sol[0])


def heat_kernel(spec: CarpetSpec, n: int, mode: str, config: WalkConfig,
                beta0: float, timescale: network.TimeScale | None = None,
                t_max: int | None = None) -> HeatKernelEstimate:
    """On-diagonal decay exponent (spectral dimension estimate) and the
    off-diagonal stretched-exponential exponent for the lazy walk."""
    ca = geometry.cells(spec, n)
    N = len(ca)
    if mode == "matrix-power" and N > 100_000:
        raise geometry.ResourceError("matrix-power mode capped at 1e5 cells")
    w = CellWalk.build(spec, n)
    pi = w.degree / w.degree.sum()
    x = center_cell(spec, n, ca)
    alpha = spec.mass_dim
    ds_ref = 2 * alpha / beta0
    t_lo = max(2, int(math.ceil(spec.scale**beta0)))
    if t_max is None:
        t_max = int(20 * (spec.branching * spec.scale ** (beta0 - 2))
                    ** n) + 4 * t_lo
        t_max = min(t_max, config.step_cap)

    times, rho, mc_se = [], [], []
    offdiag_raw = []
    side = spec.scale**n
    centers = (ca + 0.5) / side
    dist = np.max(np.abs(centers - centers[x][None, :]), axis=1)
    row_err = 0.0

    if mode == "matrix-power":
        P = w.transition_matrix(config.laziness).T.tocsr()  # column action
        v = np.zeros(N)
        v[x] = 1.0
        for t in range(1, t_max + 1):
            v = P @ v
            if t % 2 == 0:
                row_err = max(row_err, abs(float(v.sum()) - 1.0))
                times.append(t)
                rho.append(float(v[x] / pi[x]))
                if timescale is not None and t >= t_lo:
                    offdiag_raw.append((t, v.copy()))
                if v[x] / pi[x] < 2.0 and t > 4 * t_lo:
                    break
        mc_se = None
    elif mode == "monte-carlo":
        S = config.samples
        pos = np.full(S, x, dtype=np.int64)
        stream = np.arange(S, dtype=np.uint64)
        for t in range(1, t_max + 1):
            u = counter_uniform(config.seed, stream, t - 1)
            pos = w.step_lazy(pos, u, config.laziness)
            if t % 2 == 0:
                p = float((pos == x).mean())
                times.append(t)
                rho.append(p / pi[x])
                mc_se.append(math.sqrt(max(p * (1 - p), 1e-300) / S) / pi[x])
                if p / pi[x] < 2.0 and t > 4 * t_lo:
                    break
        row_err = 0.0
    else:
        raise ValueError("mode must be matrix-power or monte-carlo")

    # fitting window: drop the pre-asymptotic head (t < L**beta0) and the
    # finite-graph tail, where the on-diagonal value saturates toward its
    # equilibrium 1 and the power law is lost well before rho reaches 2
    rho_min = 10.0
    sel = [i for i, (t, r) in enumerate(zip(times, rho))
           if t >= t_lo and r >= rho_min]
    if len(sel) < 3:
        ds_hat = float("nan")
        window = (t_lo, 0)
    else:
        xs = [math.log(times[i]) for i in sel]
        ys = [math.log(rho[i]) for i in sel]
        ds_hat = -2.0 * _fit_slope(xs, ys)
        window = (times[sel[0]], times[sel[-1]])

    eta_hat = None
    eta_ref = 1.0 / (beta0 - 1.0)
    if mode == "matrix-power" and timescale is not None and offdiag_raw:
        # unit macroscopic time in steps: when the diagonal first nears
        # equilibrium the walk has crossed the carpet
        T1 = times[-1]
        pts = []
        table = []
        for t, v in offdiag_raw:
            if not (window[0] <= t <= window[1]):
                continue
            for target in np.argsort(dist)[::-1][: 5 * spec.dim]:
                dxy = float(dist[target])
                if dxy < 2.0 / side:
                    continue
                u_val = float(v[target] / pi[target])
                arg = timescale(dxy) / (t / T1)
                if 0 < u_val < 0.5 and arg > 1.5:
                    pts.append((math.log(arg), math.log(-math.log(u_val))))
                    table.append({"d": dxy, "t": t, "p_over_pi": u_val})
        if len(pts) >= 5:
            eta_hat = _fit_slope([p[0] for p in pts], [p[1] for p in pts])
        offdiag = table[:200]
    else:
        offdiag = []

    return HeatKernelEstimate(n, mode, times, rho, window, ds_hat, ds_ref,
                              eta_hat, eta_ref, row_err, offdiag, mc_se)
