import math

import numpy as np
import pytest

from carpetlab import geometry as G
from carpetlab import network as N

SC2 = G.PRESETS["sc2"]
FULL2 = G.PRESETS["full2"]


def _net(n, edges, boundary=None):
    us = np.array([e[0] for e in edges], dtype=np.int64)
    vs = np.array([e[1] for e in edges], dtype=np.int64)
    cs = np.array([e[2] for e in edges], dtype=float)
    return N.ResistanceNetwork(n, us, vs, cs, boundary or {})


class TestBasicLaws:
    def test_series(self):
        net = _net(3, [(0, 1, 1.0), (1, 2, 1.0)])
        r = N.effective_resistance(net, [0], [2])
        assert r.resistance == pytest.approx(2.0, abs=1e-12)

    def test_parallel(self):
        net = _net(2, [(0, 1, 1.0), (0, 1, 1.0)])
        r = N.effective_resistance(net, [0], [1])
        assert r.resistance == pytest.approx(0.5, abs=1e-12)

    def test_wheatstone(self):
        net = _net(4, [(0, 1, 1.0), (0, 2, 1.0), (1, 3, 1.0), (2, 3, 1.0),
                       (1, 2, 1.0)])
        r = N.effective_resistance(net, [0], [3])
        assert r.resistance == pytest.approx(1.0, abs=1e-12)

    def test_row_sums_and_symmetry(self):
        net = N.crosswire_network(SC2, 2)
        L = net.laplacian()
        assert np.abs(np.asarray(L.sum(axis=1))).max() <= 1e-12
        assert (L - L.T).nnz == 0

    def test_disconnected(self):
        net = _net(4, [(0, 1, 1.0), (2, 3, 1.0)])
        with pytest.raises(N.DisconnectedError):
            N.effective_resistance(net, [0], [3])

    def test_rayleigh_monotonicity(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            n = 8
            edges = [(i, j, float(rng.uniform(0.5, 2)))
                     for i in range(n) for j in range(i + 1, n)
                     if rng.random() < 0.6]
            edges += [(i, i + 1, 1.0) for i in range(n - 1)]  # stay connected
            net = _net(n, edges)
            base = N.effective_resistance(net, [0], [n - 1]).resistance
            for k in range(len(edges)):
                sub = _net(n, edges[:k] + edges[k + 1:])
                try:
                    r = N.effective_resistance(sub, [0], [n - 1]).resistance
                except N.DisconnectedError:
                    continue
                assert r >= base - 1e-9


class TestSolvers:
    def test_cg_matches_dense(self):
        for builder, lvl in [(N.crosswire_network, 2), (N.cell_network, 3)]:
            net = builder(SC2, lvl)
            rd = N.effective_resistance(net, "face0", "face1", method="dense")
            rc = N.effective_resistance(net, "face0", "face1", method="cg")
            rel = abs(rd.resistance - rc.resistance) / rd.resistance
            assert rel < 1e-8

    def test_single_cube(self):
        net = N.crosswire_network(SC2, 0)
        r = N.effective_resistance(net, "face0", "face1")
        assert r.resistance == pytest.approx(1.0, abs=1e-12)


class TestSchur:
    def test_identity(self):
        net = N.crosswire_network(SC2, 1)
        red = N.schur_trace(net, np.arange(net.n_vertices))
        r0 = N.effective_resistance(net, "face0", "face1").resistance
        r1 = N.effective_resistance(red, "face0", "face1").resistance
        assert r1 == pytest.approx(r0, abs=1e-12)

    def test_series_elimination(self):
        net = _net(3, [(0, 1, 1.0), (1, 2, 1.0)])
        red = N.schur_trace(net, [0, 2])
        assert red.n_vertices == 2
        assert red.conductance[0] == pytest.approx(0.5, abs=1e-12)

    def test_random_network_preserved(self):
        rng = np.random.default_rng(11)
        n = 20
        edges = [(i, j, float(rng.uniform(0.2, 3)))
                 for i in range(n) for j in range(i + 1, n)
                 if rng.random() < 0.3]
        edges += [(i, i + 1, 1.0) for i in range(n - 1)]
        net = _net(n, edges)
        keep = [0, 3, 7, 12, 19]
        red = N.schur_trace(net, keep)
        for a in range(len(keep)):
            for b in range(a + 1, len(keep)):
                r0 = N.effective_resistance(net, [keep[a]], [keep[b]]).resistance
                r1 = N.effective_resistance(red, [a], [b]).resistance
                assert abs(r0 - r1) < 1e-10


class TestScaling:
    def test_rho_trivial_carpet(self):
        rep = N.rho_estimate(FULL2, 4)
        for r in rep.ratios[1:]:
            assert 0.9 <= r <= 1.1

    def test_beta0_identity(self):
        rep = N.rho_estimate(SC2, 3)
        assert rep.beta0 == pytest.approx(
            rep.alpha + math.log(rep.rho_hat) / math.log(3), rel=1e-12)

    def test_rho_inequality_direction_reported(self):
        rep = N.rho_estimate(SC2, 3)
        assert rep.rho_vs_lsq_over_m in {"above", "below", "equal"}
        assert rep.rho_vs_lsq_over_m == "above"  # 1.25 > 9/8

    def test_gamma_normalized(self):
        gam = N.gamma_sequence(SC2, 3)
        assert gam[0] == pytest.approx(1.0, abs=0)
        assert all(b > a for a, b in zip(gam, gam[1:]))

    def test_time_scale_endpoints(self):
        gam = N.gamma_sequence(SC2, 4)
        ts = N.time_scale(SC2, gam)
        assert ts(1.0) == pytest.approx(1.0)
        assert ts(0.0) == 0.0
        rs = np.linspace(0.001, 1.0, 50)
        hs = [ts(r) for r in rs]
        assert all(b >= a for a, b in zip(hs, hs[1:]))

    def test_structure_check_fields(self):
        rep = N.rho_estimate(SC2, 4)
        gam = N.gamma_sequence(SC2, 4)
        ts = N.time_scale(SC2, gam)
        st = N.gamma_structure_check(SC2, gam, rep.rho_hat, ts, rep.beta0)
        assert st["c_min"] > 0
        assert st["h_beta_prime"] >= rep.beta0 - 0.2

    def test_res_annulus(self):
        gam = N.gamma_sequence(SC2, 4)
        ts = N.time_scale(SC2, gam)
        out = N.res_annulus_check(SC2, 3, (0.5, 0.17), 0.12, ts)
        assert out["resistance"] > 0
        assert 0.05 < out["ratio"] < 20


class TestIO:
    def test_roundtrip(self, tmp_path):
        net = N.crosswire_network(SC2, 1)
        p = tmp_path / "net.txt"
        net.save(str(p))
        back = N.ResistanceNetwork.load(str(p))
        assert back.n_vertices == net.n_vertices
        assert np.array_equal(back.edges_u, net.edges_u)
        assert np.array_equal(back.edges_v, net.edges_v)
        assert np.allclose(back.conductance, net.conductance)
        for k in net.boundary:
            assert np.array_equal(back.boundary[k], net.boundary[k])
