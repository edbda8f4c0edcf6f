import math

import numpy as np
import pytest

from carpetlab import geometry as G
from carpetlab import walk as W

SC2 = G.PRESETS["sc2"]
FULL2 = G.PRESETS["full2"]
BETA0 = 2.097  # log(8 * 1.2514) / log 3, fixed for kernel-only tests


class TestRandomness:
    def test_deterministic(self):
        a = W.counter_uniform(42, np.arange(100, dtype=np.uint64), 7)
        b = W.counter_uniform(42, np.arange(100, dtype=np.uint64), 7)
        assert np.array_equal(a, b)

    def test_range_and_spread(self):
        u = W.counter_uniform(1, np.arange(200_000, dtype=np.uint64), 0)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.005

    def test_streams_independent_of_batching(self):
        full = W.counter_uniform(5, np.arange(64, dtype=np.uint64), 3)
        parts = np.concatenate([
            W.counter_uniform(5, np.arange(0, 32, dtype=np.uint64), 3),
            W.counter_uniform(5, np.arange(32, 64, dtype=np.uint64), 3),
        ])
        assert np.array_equal(full, parts)


class TestKernels:
    def test_row_stochastic(self):
        w = W.CellWalk.build(SC2, 2)
        P = w.transition_matrix(0.5)
        assert np.abs(np.asarray(P.sum(axis=1)).ravel() - 1.0).max() <= 1e-12

    def test_degree_reversibility(self):
        # mu(x) P(x,y) == mu(y) P(y,x) with mu = degree
        w = W.CellWalk.build(SC2, 2)
        P = w.transition_matrix(0.5).toarray()
        DP = w.degree[:, None] * P
        assert np.abs(DP - DP.T).max() <= 1e-12

    def test_step_lazy_matches_matrix(self):
        w = W.CellWalk.build(SC2, 2)
        P = w.transition_matrix(0.5).toarray()
        S = 200_000
        pos = np.full(S, 5, dtype=np.int64)
        u = W.counter_uniform(9, np.arange(S, dtype=np.uint64), 0)
        new = w.step_lazy(pos, u, 0.5)
        for j in np.nonzero(P[5] > 0)[0]:
            emp = float((new == j).mean())
            assert emp == pytest.approx(P[5, j], abs=4 * math.sqrt(0.25 / S))

    def test_proposal_stays_on_invalid(self):
        w = W.CellWalk.build(SC2, 1)
        pos = np.zeros(4096, dtype=np.int64)  # corner cell
        u = W.counter_uniform(2, np.arange(4096, dtype=np.uint64), 0)
        new = w.step_proposal(pos, u, 0.5)
        assert set(np.unique(new)) <= set([0] + [int(j) for j in
                                                 w.nbr_packed[0] if j >= 0])


class TestExitTimes:
    def test_degenerate_low_levels(self):
        for n in (0, 1):
            out = W.mean_exit_steps(SC2, n)
            assert out["degenerate"]
            assert out["steps"] == 0.0

    def test_scaling_structure(self):
        out = W.exit_time_scaling(SC2, 3)
        assert len(out["levels"]) == 4
        assert out["ratios"][-1]["ratio"] > 1.0

    def test_mc_matches_solve(self):
        solve = W.mean_exit_steps(SC2, 2)
        mc = W.exit_time_monte_carlo(SC2, 2, W.WalkConfig(seed=3, samples=20000))
        z = abs(mc["mean"] - solve["center_steps"]) / mc["se"]
        assert z < 4.0

    def test_trivial_square_solve(self):
        # 3x3 full grid, absorbing rim: only the center is interior, so
        # u = degree/(1-laziness)/degree = 2 exactly at laziness 1/2
        out = W.mean_exit_steps(FULL2, 1)
        assert out["interior"] == 1
        assert out["center_steps"] == pytest.approx(2.0, abs=1e-12)


class TestMoves:
    def test_corner_and_slide(self):
        verts, edges = G.halfface_graph(SC2, 1)
        cfg = W.WalkConfig(seed=3, samples=4000)
        for kind in ("corner", "slide"):
            e = next(e for e in edges if e[2] == kind)
            out = W.move_probability(SC2, 1, verts[e[0]], verts[e[1]], cfg)
            assert out["clears_floor"]
            assert not out["anomaly"]
            assert out["wilson_99"][0] > out["q0q1"]
            assert 0.3 < out["estimate"] < 1.0

    def test_non_edge_rejected(self):
        a = G.HalfFace(1, 0, (0, 0))
        b = G.HalfFace(1, 0, (0, 2))  # separated by the removed center
        with pytest.raises(ValueError):
            W.move_domain(SC2, a, b)


class TestCoupling:
    def test_identical_points(self):
        x = G.GridPoint(2, (2, 1))
        out = W.coupling_experiment(SC2, 3, x, x, 1,
                                    0.4, W.WalkConfig(seed=1, samples=10))
        assert out["probability"] == 1.0
        assert out["trivial"]

    def test_meeting_probability_decreases_with_distance(self):
        cfg = W.WalkConfig(seed=1, samples=3000)
        near = W.coupling_experiment(SC2, 3, G.GridPoint(2, (2, 1)),
                                     G.GridPoint(2, (4, 1)), 1, 0.4, cfg)
        far = W.coupling_experiment(SC2, 3, G.GridPoint(2, (1, 1)),
                                    G.GridPoint(2, (5, 1)), 1, 0.4, cfg)
        assert near["separation_cells"] < far["separation_cells"]
        assert near["probability"] > far["probability"] + 5 * (
            near["se"] + far["se"])
        assert near["probability"] > 0.5

    def test_non_associated_rejected(self):
        with pytest.raises(ValueError):
            W.coupling_experiment(SC2, 3, G.GridPoint(2, (2, 1)),
                                  G.GridPoint(2, (5, 1)), 1, 0.4,
                                  W.WalkConfig(seed=1, samples=10))


class TestHarnack:
    def test_finite_and_symmetric(self):
        a = W.harnack_ratio(SC2, 3, (1 / 6, 1 / 6), 0.2)
        b = W.harnack_ratio(SC2, 3, (5 / 6, 1 / 6), 0.2)
        assert 1.0 < a["max_ratio"] < 100.0
        # mirror-image balls: identical ratio by symmetry
        assert a["max_ratio"] == pytest.approx(b["max_ratio"], rel=1e-9)

    def test_stable_across_radii(self):
        a = W.harnack_ratio(SC2, 3, (1 / 6, 1 / 6), 0.2)["max_ratio"]
        b = W.harnack_ratio(SC2, 3, (1 / 6, 1 / 6), 0.3)["max_ratio"]
        assert max(a, b) / min(a, b) < 2.0

    def test_bad_ball_rejected(self):
        with pytest.raises(ValueError):
            W.harnack_ratio(SC2, 3, (0.5, 0.5), 2.0)  # covers the carpet


class TestHeatKernel:
    def test_matrix_power_row_sums(self):
        hk = W.heat_kernel(SC2, 2, "matrix-power", W.WalkConfig(seed=0), BETA0)
        assert hk.row_sum_error <= 1e-12
        assert hk.ds_reference == pytest.approx(
            2 * SC2.mass_dim / BETA0, rel=1e-12)

    def test_modes_agree(self):
        mp = W.heat_kernel(SC2, 2, "matrix-power", W.WalkConfig(seed=0), BETA0)
        mc = W.heat_kernel(SC2, 2, "monte-carlo",
                           W.WalkConfig(seed=7, samples=20000), BETA0)
        common = sorted(set(mp.times) & set(mc.times))
        assert len(common) >= 10
        worst = 0.0
        for t in common:
            i, j = mp.times.index(t), mc.times.index(t)
            if mc.mc_se[j] > 0:
                worst = max(worst,
                            abs(mp.rho_diag[i] - mc.rho_diag[j]) / mc.mc_se[j])
        assert worst < 4.0

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            W.heat_kernel(SC2, 2, "exact", W.WalkConfig(), BETA0)


class TestWilson:
    def test_extremes(self):
        lo, hi = W.wilson_interval(0, 100)
        assert lo <= 1e-12 and hi > 0.0
        lo, hi = W.wilson_interval(100, 100)
        assert hi >= 1.0 - 1e-12 and lo < 1.0

    def test_contains_point_estimate(self):
        lo, hi = W.wilson_interval(37, 200)
        assert lo < 37 / 200 < hi
