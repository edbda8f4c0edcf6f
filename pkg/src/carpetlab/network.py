"""Resistance networks on carpet approximations.

Crosswire and cell-graph networks, effective resistance by grounded
Laplacian solves (preconditioned CG with a dense fallback that doubles
as the oracle), Schur-complement reduction, and the scaling pipeline:
face-to-face resistances R_n, the resistance scale factor rho, cell
conductances gamma_n, and the interpolated time-scale function H.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from . import geometry
from .geometry import CarpetSpec, ResourceError

DENSE_SOLVE_LIMIT = 2000
CG_RTOL = 1e-10


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested residual."""


class DisconnectedError(RuntimeError):
    """Boundary sets not connected: infinite effective resistance."""


@dataclass
class ResistanceNetwork:
    """Weighted graph with named boundary vertex sets.

    edges_u, edges_v, conductance are parallel arrays; conductances are
    strictly positive and each undirected edge appears once.
    """

    n_vertices: int
    edges_u: np.ndarray
    edges_v: np.ndarray
    conductance: np.ndarray
    boundary: dict = field(default_factory=dict)

    def laplacian(self) -> sp.csr_matrix:
        u, v, c = self.edges_u, self.edges_v, self.conductance
        n = self.n_vertices
        rows = np.concatenate([u, v, u, v])
        cols = np.concatenate([v, u, u, v])
        vals = np.concatenate([-c, -c, c, c])
        return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    def degree_weight(self) -> np.ndarray:
        w = np.zeros(self.n_vertices)
        np.add.at(w, self.edges_u, self.conductance)
        np.add.at(w, self.edges_v, self.conductance)
        return w

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# vertices %d\n" % self.n_vertices)
            for name, idx in sorted(self.boundary.items()):
                fh.write("# boundary %s %s\n" % (name, " ".join(map(str, idx))))
            for u, v, c in zip(self.edges_u, self.edges_v, self.conductance):
                fh.write("%d %d %.17g\n" % (u, v, c))

    @classmethod
    def load(cls, path: str) -> "ResistanceNetwork":
        n = 0
        boundary = {}
        us, vs, cs = [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    parts = line[1:].split()
                    if parts[0] == "vertices":
                        n = int(parts[1])
                    elif parts[0] == "boundary":
                        boundary[parts[1]] = np.array(parts[2:], dtype=np.int64)
                    continue
                u, v, c = line.split()
                us.append(int(u))
                vs.append(int(v))
                cs.append(float(c))
        return cls(
            n,
            np.array(us, dtype=np.int64),
            np.array(vs, dtype=np.int64),
            np.array(cs, dtype=float),
            boundary,
        )


def crosswire_network(spec: CarpetSpec, n: int,
                      budget: int = geometry.DEFAULT_CELL_BUDGET) -> ResistanceNetwork:
    """Diagonal-crosswire network on the retained level-n cubes: each
    cube's 2**d corners joined to a center node by unit-conductance
    wires; corner nodes shared between adjacent cubes.

    Boundary sets 'face0' / 'face1' are the corner nodes on the two
    opposite faces x_1 = 0 and x_1 = 1.
    """
    d, L = spec.dim, spec.scale
    ca = geometry.cells(spec, n, budget=budget)
    m = len(ca)
    # corner coordinates of all cubes; dedupe to shared nodes
    offsets = np.array(
        [off for off in np.ndindex(*(2,) * d)], dtype=np.int64
    )  # (2^d, d)
    corners = (ca[:, None, :] + offsets[None, :, :]).reshape(-1, d)
    uniq, inverse = np.unique(corners, axis=0, return_inverse=True)
    n_corner = len(uniq)
    centers = n_corner + np.arange(m)
    edges_u = np.repeat(centers, 2**d)
    edges_v = inverse
    cond = np.ones(len(edges_u))
    side = L**n
    boundary = {
        "face0": np.nonzero(uniq[:, 0] == 0)[0],
        "face1": np.nonzero(uniq[:, 0] == side)[0],
    }
    return ResistanceNetwork(
        n_corner + m, edges_u, edges_v.astype(np.int64), cond, boundary
    )


def cell_network(spec: CarpetSpec, n: int,
                 budget: int = geometry.DEFAULT_CELL_BUDGET) -> ResistanceNetwork:
    """Unit-conductance graph on level-n cells with face adjacency.
    Boundary sets 'face0' / 'face1' are the cells touching x_1 = 0 / 1."""
    ca = geometry.cells(spec, n, budget=budget)
    e = geometry.adjacency(spec, n, ca)
    boundary = {
        "face0": geometry.boundary_cells(spec, n, 0, 0, ca),
        "face1": geometry.boundary_cells(spec, n, 0, 1, ca),
    }
    return ResistanceNetwork(
        len(ca), e[:, 0].copy(), e[:, 1].copy(), np.ones(len(e)), boundary
    )


# ---------------------------------------------------------------------------
# grounded solves
# ---------------------------------------------------------------------------


@dataclass
class SolveResult:
    resistance: float
    potential: np.ndarray
    energy: float
    residual: float
    iterations: int
    method: str


def grounded_minimize(L, a_idx, b_idx, rtol: float = CG_RTOL,
                      method: str = "auto") -> SolveResult:
    """Minimize f^T L f subject to f = 0 on a_idx, f = 1 on b_idx.

    L may be sparse or dense symmetric PSD with kernel spanned by
    constants. Returns the minimizing potential and R = 1/energy.
    """
    n = L.shape[0]
    a_idx = np.asarray(a_idx, dtype=np.int64)
    b_idx = np.asarray(b_idx, dtype=np.int64)
    if len(a_idx) == 0 or len(b_idx) == 0:
        raise ValueError("boundary sets must be nonempty")
    if np.intersect1d(a_idx, b_idx).size:
        raise ValueError("boundary sets must be disjoint")
    fixed = np.zeros(n, dtype=bool)
    fixed[a_idx] = True
    fixed[b_idx] = True
    free = np.nonzero(~fixed)[0]
    f = np.zeros(n)
    f[b_idx] = 1.0

    sparse = sp.issparse(L)
    Ls = sp.csr_matrix(L) if sparse else None

    iterations = 0
    if free.size:
        if sparse:
            L_ff = Ls[free][:, free]
            rhs = -(Ls[free] @ f)
        else:
            L_ff = np.asarray(L)[np.ix_(free, free)]
            rhs = -(np.asarray(L)[free] @ f)
        use_dense = method == "dense" or (method == "auto" and n <= DENSE_SOLVE_LIMIT)
        if use_dense:
            dense = L_ff.toarray() if sp.issparse(L_ff) else np.array(L_ff)
            try:
                c, low = scipy.linalg.cho_factor(dense)
                x = scipy.linalg.cho_solve((c, low), rhs)
            except scipy.linalg.LinAlgError:
                x = scipy.linalg.solve(dense, rhs, assume_a="sym")
            used = "dense"
        else:
            diag = L_ff.diagonal()
            if np.any(diag <= 0):
                raise SolverError("non-positive diagonal in grounded system")
            M = sp.diags(1.0 / diag)
            maxiter = int(50 * math.sqrt(max(n, 1))) + 100
            counter = {"n": 0}

            def cb(_):
                counter["n"] += 1

            x, info = spla.cg(L_ff, rhs, rtol=rtol, atol=0.0, M=M,
                              maxiter=maxiter, callback=cb)
            iterations = counter["n"]
            if info != 0:
                res = np.linalg.norm(L_ff @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
                raise SolverError(
                    "CG did not converge (info=%d, rel residual %.3e)" % (info, res)
                )
            used = "cg"
        f[free] = x
        rhs_norm = float(np.linalg.norm(rhs))
        residual = float(np.linalg.norm(L_ff @ f[free] - rhs)) / max(rhs_norm, 1e-300)
    else:
        used = "trivial"
        residual = 0.0

    Lf = Ls @ f if sparse else np.asarray(L) @ f
    energy = float(f @ Lf)
    if energy <= 0:
        raise SolverError("nonpositive energy %.3e in grounded solve" % energy)
    return SolveResult(1.0 / energy, f, energy, residual, iterations, used)


def effective_resistance(net: ResistanceNetwork, a, b, rtol: float = CG_RTOL,
                         method: str = "auto") -> SolveResult:
    """Effective resistance between boundary sets (names or index arrays)."""
    a_idx = net.boundary[a] if isinstance(a, str) else np.asarray(a)
    b_idx = net.boundary[b] if isinstance(b, str) else np.asarray(b)
    L = net.laplacian()
    # connectivity check: disconnected terminals mean infinite resistance
    ncomp, labels = csgraph.connected_components(L != 0, directed=False)
    if ncomp > 1 and not set(labels[a_idx]) & set(labels[b_idx]):
        raise DisconnectedError("boundary sets lie in different components")
    return grounded_minimize(L, a_idx, b_idx, rtol=rtol, method=method)


def schur_trace(net: ResistanceNetwork, keep) -> ResistanceNetwork:
    """Schur complement of the Laplacian onto `keep`; preserves every
    effective resistance among kept vertices exactly."""
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size == 0:
        raise ValueError("keep set is empty")
    n = net.n_vertices
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    drop = np.nonzero(~mask)[0]
    L = net.laplacian().toarray()
    if drop.size:
        L_kk = L[np.ix_(keep, keep)]
        L_kd = L[np.ix_(keep, drop)]
        L_dd = L[np.ix_(drop, drop)]
        try:
            c, low = scipy.linalg.cho_factor(L_dd)
            X = scipy.linalg.cho_solve((c, low), L_kd.T)
        except scipy.linalg.LinAlgError as exc:
            raise SolverError("eliminated block numerically singular") from exc
        S = L_kk - L_kd @ X
    else:
        S = L[np.ix_(keep, keep)]
    k = len(keep)
    scale = np.abs(S).max() if k else 1.0
    us, vs, cs = [], [], []
    for i in range(k):
        for j in range(i + 1, k):
            c_ij = -S[i, j]
            if c_ij > 1e-12 * scale:
                us.append(i)
                vs.append(j)
                cs.append(c_ij)
            elif c_ij < -1e-9 * scale:
                raise SolverError("Schur complement produced a positive off-diagonal")
    new_index = {int(old): new for new, old in enumerate(keep)}
    boundary = {}
    for name, idx in net.boundary.items():
        kept = [new_index[int(i)] for i in idx if int(i) in new_index]
        if kept:
            boundary[name] = np.array(sorted(kept), dtype=np.int64)
    return ResistanceNetwork(
        k,
        np.array(us, dtype=np.int64),
        np.array(vs, dtype=np.int64),
        np.array(cs, dtype=float),
        boundary,
    )


# ---------------------------------------------------------------------------
# scaling pipeline
# ---------------------------------------------------------------------------


def _aitken(seq):
    """Aitken delta-squared acceleration of the last accelerable triple."""
    out = None
    for i in range(len(seq) - 2):
        x0, x1, x2 = seq[i], seq[i + 1], seq[i + 2]
        denom = x2 - 2 * x1 + x0
        if abs(denom) > 1e-15 * max(abs(x2), 1.0):
            out = x2 - (x2 - x1) ** 2 / denom
    return out


@dataclass
class ScalingReport:
    spec_hash: str
    dim: int
    scale: int
    branching: int
    resistances: list = field(default_factory=list)  # R_n, n = 0..n_max
    ratios: list = field(default_factory=list)  # R_{n+1}/R_n
    rho_hat: float = float("nan")
    rho_aitken: float | None = None
    monotone_ratios: bool = True
    rho_vs_lsq_over_m: str = ""
    alpha: float = float("nan")
    beta0: float = float("nan")
    gamma: list = field(default_factory=list)
    gamma_model: str = ""
    h_grid_k: int = 0
    h_table: list = field(default_factory=list)  # (r, H(r)) pairs
    residuals: list = field(default_factory=list)
    solver_rtol: float = CG_RTOL

    def to_dict(self) -> dict:
        return {
            "spec_hash": self.spec_hash,
            "dim": self.dim,
            "scale": self.scale,
            "branching": self.branching,
            "resistances": self.resistances,
            "ratios": self.ratios,
            "rho_hat": self.rho_hat,
            "rho_aitken": self.rho_aitken,
            "monotone_ratios": self.monotone_ratios,
            "rho_vs_lsq_over_m": self.rho_vs_lsq_over_m,
            "alpha": self.alpha,
            "beta0": self.beta0,
            "gamma": self.gamma,
            "gamma_model": self.gamma_model,
            "h_grid_k": self.h_grid_k,
            "h_table": self.h_table,
            "residuals": self.residuals,
            "solver_rtol": self.solver_rtol,
        }


def face_resistances(spec: CarpetSpec, n_max: int, model: str = "crosswire",
                     rtol: float = CG_RTOL):
    """R_n across opposite faces for n = 0..n_max, with solver residuals."""
    rs, residuals = [], []
    builder = crosswire_network if model == "crosswire" else cell_network
    n_min = 0 if model == "crosswire" else 1
    for n in range(n_min, n_max + 1):
        net = builder(spec, n)
        res = effective_resistance(net, "face0", "face1", rtol=rtol)
        rs.append(res.resistance)
        residuals.append(res.residual)
    return n_min, rs, residuals


def rho_estimate(spec: CarpetSpec, n_max: int, rtol: float = CG_RTOL) -> ScalingReport:
    """Successive face-to-face crosswire resistances and the extrapolated
    resistance scale factor."""
    if n_max < 2:
        raise ValueError("need n_max >= 2 for a ratio estimate")
    _, rs, residuals = face_resistances(spec, n_max, "crosswire", rtol)
    ratios = [rs[i + 1] / rs[i] for i in range(len(rs) - 1)]
    diffs = np.diff(ratios)
    monotone = bool(np.all(diffs >= -1e-9) or np.all(diffs <= 1e-9))
    rho_hat = ratios[-1]
    report = ScalingReport(
        spec_hash=spec.content_hash(),
        dim=spec.dim,
        scale=spec.scale,
        branching=spec.branching,
        resistances=rs,
        ratios=ratios,
        rho_hat=rho_hat,
        rho_aitken=_aitken(ratios),
        monotone_ratios=monotone,
        alpha=spec.mass_dim,
        residuals=residuals,
        solver_rtol=rtol,
    )
    report.beta0 = math.log(spec.branching * rho_hat) / math.log(spec.scale)
    # measured direction of rho versus L^2/m; reported, never asserted
    bound = spec.scale**2 / spec.branching
    if abs(rho_hat - bound) <= 1e-6 * bound:
        report.rho_vs_lsq_over_m = "equal"
    elif rho_hat > bound:
        report.rho_vs_lsq_over_m = "above"
    else:
        report.rho_vs_lsq_over_m = "below"
    return report


def gamma_sequence(spec: CarpetSpec, n_max: int, model: str = "crosswire",
                   rtol: float = CG_RTOL) -> list:
    """Normalized conductances gamma_0..gamma_N across one level-n cell
    subdivided to depth n_max.

    A level-n cell carrying the depth-n_max network restricted to its
    cube is congruent to the whole carpet at depth n_max - n, so
    gamma_n = g(n_max - n) / g(n_max) with g(j) the face-to-face
    conductance at depth j; gamma_0 = 1 by construction.
    """
    n_min, rs, _ = face_resistances(spec, n_max, model, rtol)
    g = {n_min + i: 1.0 / r for i, r in enumerate(rs)}
    # cell model: depth 0 is a single vertex with no face pair, so the
    # sequence stops one short of the full depth
    top = n_max if model == "crosswire" else n_max - 1
    gN = g[n_max]
    return [g[n_max - n] / gN for n in range(0, top + 1)]


@dataclass
class TimeScale:
    """Piecewise-linear time-scale function interpolated from gamma."""

    scale: int  # L
    branching: int  # m
    k: int
    grid_r: list  # r_j = L**(-j*k), descending from 1
    grid_h: list  # H(r_j)

    def __call__(self, r: float) -> float:
        if r <= 0:
            return 0.0
        if r >= 1:
            return self.grid_h[0] * r  # linear continuation; H(1)=1
        rs = self.grid_r
        for i in range(len(rs) - 1):
            if rs[i + 1] <= r <= rs[i]:
                t = (r - rs[i + 1]) / (rs[i] - rs[i + 1])
                return self.grid_h[i + 1] + t * (self.grid_h[i] - self.grid_h[i + 1])
        # below the finest grid point: interpolate linearly to H(0)=0
        return self.grid_h[-1] * (r / rs[-1])

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "grid_r": self.grid_r,
            "grid_h": self.grid_h,
        }


def time_scale(spec: CarpetSpec, gamma: list) -> TimeScale:
    """H(L**(-n*k)) = 1/(gamma_{nk} * m**(nk)), linearly interpolated,
    with k the smallest lag making gamma_n * m**n strictly increasing."""
    m = spec.branching
    N = len(gamma) - 1
    w = [gamma[n] * m**n for n in range(N + 1)]
    k_found = None
    for k in range(1, N + 1):
        if all(w[n] < w[n + k] for n in range(N + 1 - k)):
            k_found = k
            break
    if k_found is None:
        raise SolverError(
            "no lag k with gamma_n m^n increasing over the computed range; "
            "deepen the gamma table"
        )
    k = k_found
    js = list(range(0, N // k + 1))
    grid_r = [float(spec.scale ** (-j * k)) for j in js]
    grid_h = [1.0 / (gamma[j * k] * m ** (j * k)) for j in js]
    return TimeScale(spec.scale, m, k, grid_r, grid_h)


def res_annulus_check(spec: CarpetSpec, n: int, center, r: float,
                      timescale: TimeScale, rtol: float = CG_RTOL) -> dict:
    """Effective resistance between the ball B(x0, r) and the complement
    of B(x0, 2r) on the level-n cell graph, compared with H(r)/r**alpha."""
    ca = geometry.cells(spec, n)
    side = spec.scale**n
    centers = (ca + 0.5) / side
    x0 = np.asarray(center, dtype=float)
    dist = np.max(np.abs(centers - x0[None, :]), axis=1)
    ball = np.nonzero(dist <= r)[0]
    outer = np.nonzero(dist > 2 * r)[0]
    if ball.size == 0:
        raise ValueError("ball contains no cells at this level")
    if outer.size == 0:
        raise ValueError("2r ball covers the carpet; choose a smaller radius")
    net = cell_network(spec, n)
    res = grounded_minimize(net.laplacian(), ball, outer, rtol=rtol)
    href = timescale(r) / (r**spec.mass_dim)
    return {
        "center": list(map(float, x0)),
        "radius": r,
        "ball_cells": int(ball.size),
        "outer_cells": int(outer.size),
        "resistance": res.resistance,
        "reference": href,
        "ratio": res.resistance / href,
        "residual": res.residual,
    }


def gamma_structure_check(spec: CarpetSpec, gamma: list, rho_hat: float,
                          ts: "TimeScale", beta0: float) -> dict:
    """Empirical scaling structure of the gamma sequence and H table.

    Reports the level-to-level comparability band of gamma, the lower
    bound constants c_{n,m} = gamma_{n+m} / (gamma_m * rho**n), and the
    two-sided power bounds H(t)/H(s) vs (t/s)**beta0 and (t/s)**beta'
    on the grid radii. Constants are measured, not asserted.
    """
    N = len(gamma) - 1
    step_ratios = [gamma[i + 1] / gamma[i] for i in range(N)]
    c_table = {}
    for m in range(N + 1):
        for n in range(1, N + 1 - m):
            c_table["%d,%d" % (n, m)] = gamma[n + m] / (gamma[m] * rho_hat**n)
    cs = list(c_table.values())
    c_min = min(cs)
    c_fit = math.exp(sum(math.log(c) for c in cs) / len(cs))
    # H power bounds over grid radii pairs s <= t
    rs, hs = ts.grid_r, ts.grid_h
    lower_c, upper_bp = [], []
    for i in range(len(rs)):
        for j in range(i + 1, len(rs)):
            t_r, s_r = rs[i], rs[j]  # t_r > s_r
            ratio = hs[i] / hs[j]
            lower_c.append(ratio / (t_r / s_r) ** beta0)
            upper_bp.append(math.log(ratio) / math.log(t_r / s_r))
    c3 = min(lower_c)
    beta_prime = max(upper_bp)
    c6 = max(h / r**beta0 for r, h in zip(rs, hs))
    c2 = max(hs[i] / hs[i + 1] for i in range(len(hs) - 1)) if len(hs) > 1 else 1.0
    return {
        "gamma_step_ratios": step_ratios,
        "gamma_band": [min(step_ratios), max(step_ratios)],
        "c_table": c_table,
        "c_min": c_min,
        "c_fit": c_fit,
        "c_min_over_fit": c_min / c_fit,
        "h_lower_c3": c3,
        "h_beta_prime": beta_prime,
        "h_step_c2": c2,
        "h_vs_h0_c6": c6,
        "beta0": beta0,
    }


def scaling_report(spec: CarpetSpec, n_max: int, gamma_model: str = "crosswire",
                   rtol: float = CG_RTOL) -> ScalingReport:
    """Full scaling report: rho ratios, gamma sequence, H table."""
    report = rho_estimate(spec, n_max, rtol=rtol)
    report.gamma = gamma_sequence(spec, n_max, model=gamma_model, rtol=rtol)
    report.gamma_model = gamma_model
    ts = time_scale(spec, report.gamma)
    report.h_grid_k = ts.k
    report.h_table = list(zip(ts.grid_r, ts.grid_h))
    return report
