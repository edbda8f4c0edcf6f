import math
from fractions import Fraction

import numpy as np
import pytest

from carpetlab import forms as F
from carpetlab import geometry as G
from carpetlab import network as N

SC2 = G.PRESETS["sc2"]
RHO = 1.2514


@pytest.fixture(scope="module")
def bb2():
    return F.bb_form(SC2, 2, RHO)


@pytest.fixture(scope="module")
def kz2():
    return F.kz_form(SC2, 2, RHO)


@pytest.fixture(scope="module")
def proj21():
    return F.folding_projector(SC2, 2, 1)


class TestConstruction:
    def test_level0_zero(self):
        for builder in (F.bb_form, F.kz_form):
            f0 = builder(SC2, 0, RHO)
            assert f0.matrix.shape == (1, 1)
            assert f0.matrix[0, 0] == 0.0

    def test_missing_rho(self):
        with pytest.raises(F.DependencyError):
            F.bb_form(SC2, 1)
        with pytest.raises(F.DependencyError):
            F.kz_form(SC2, 1)

    def test_flags(self, bb2, kz2):
        for form in (bb2, kz2):
            assert form.markov and form.conservative and form.irreducible
            assert form.psd_check()

    def test_constant_energy_zero(self, bb2, kz2):
        one = np.ones(64)
        assert abs(bb2.energy(one)) < 1e-10
        assert abs(kz2.energy(one)) < 1e-10

    def test_assembly_counts(self, bb2):
        assert bb2.matrix.shape == (64, 64)
        edges = G.adjacency(SC2, 2)
        off = np.count_nonzero(bb2.matrix - np.diag(np.diag(bb2.matrix)))
        assert off == 2 * len(edges)

    def test_kz_unit_normalization(self, kz2):
        assert abs(F.form_conductance(kz2, SC2) - 1.0) < 1e-12

    def test_kz_replication(self):
        out = F.replication_check(SC2, 1, RHO)
        assert out["proportional"]
        assert out["residual"] <= 1e-9

    def test_normalize_fixed_point(self, kz2):
        a = F.normalize(kz2, SC2)
        b = F.normalize(a, SC2)
        assert np.array_equal(a.matrix, b.matrix)


class TestProjector:
    def test_idempotent_exact(self, proj21):
        assert proj21.idempotent_exact()

    def test_exact_rational_idempotence(self, proj21):
        rng = np.random.default_rng(2)
        f = np.array([Fraction(int(v), 13) for v in rng.integers(-40, 40, 64)],
                     dtype=object)
        tf = F.theta_apply(proj21, f)
        assert np.array_equal(F.theta_apply(proj21, tf), tf)

    def test_constants_fixed(self, proj21):
        c = np.array([Fraction(5)] * 64, dtype=object)
        assert np.array_equal(F.theta_apply(proj21, c), c)

    def test_l2_contraction(self, proj21):
        rng = np.random.default_rng(3)
        for _ in range(20):
            f = rng.normal(size=64)
            assert np.linalg.norm(proj21.apply(f)) <= np.linalg.norm(f) + 1e-12

    def test_point_mass_orbit(self, proj21):
        # column j of Theta counts the folds hitting cell j
        ca = G.cells(SC2, 2)
        coarse = G.cells(SC2, 1)
        j = 5
        expected = np.zeros(64, dtype=np.int64)
        lookup = {tuple(c): i for i, c in enumerate(ca)}
        for S in coarse:
            for t in range(64):
                if lookup[G.fold_cell(SC2, 1, tuple(S), 2, tuple(ca[t]))] == j:
                    expected[t] += 1
        assert np.array_equal(proj21.counts[:, j], expected)

    def test_level_mismatch(self, proj21):
        with pytest.raises(ValueError):
            F.theta_apply(proj21, np.ones(8))


class TestInvariance:
    def test_bb_kz_invariant(self, bb2, kz2, proj21):
        for form in (bb2, kz2):
            rep = F.invariance_check(form, proj21, SC2)
            assert rep.invariant
            assert rep.self_adjoint_residual <= 1e-9 * rep.matrix_norm

    def test_all_fold_levels(self):
        rho = RHO
        for n in (1, 2):
            for ell in range(0, n + 1):
                proj = F.folding_projector(SC2, n, ell)
                assert proj.idempotent_exact()
                rep = F.invariance_check(F.kz_form(SC2, n, rho), proj, SC2)
                assert rep.invariant

    def test_perturbed_fails_with_witness(self, bb2, proj21):
        M = bb2.matrix.copy()
        i, j = np.argwhere(M < 0)[0]
        M[i, j] *= 2.0
        M[j, i] *= 2.0
        np.fill_diagonal(M, 0.0)
        np.fill_diagonal(M, -M.sum(axis=1))
        bad = F.DiscreteForm(bb2.spec_hash, 2, M, "perturbed")
        rep = F.invariance_check(bad, proj21, SC2)
        assert not rep.invariant
        assert rep.witness is not None


class TestHilbert:
    def test_scale_invariance(self, bb2, kz2):
        h = F.hilbert_data(bb2, kz2).h
        for theta in (0.1, 1.0, 10.0):
            scaled = F.DiscreteForm(bb2.spec_hash, 2, theta * bb2.matrix, "bb")
            assert abs(F.hilbert_data(scaled, kz2).h - h) <= 1e-10

    def test_symmetry(self, bb2, kz2):
        assert abs(F.hilbert_data(bb2, kz2).h
                   - F.hilbert_data(kz2, bb2).h) <= 1e-10

    def test_proportional_zero(self, bb2):
        tripled = F.DiscreteForm(bb2.spec_hash, 2, 3.0 * bb2.matrix, "bb")
        assert F.hilbert_data(bb2, tripled).h <= 1e-10

    def test_level1_dense_oracle(self):
        A = F.bb_form(SC2, 1, RHO)
        B = F.kz_form(SC2, 1, RHO)
        hd = F.hilbert_data(A, B)
        # independent oracle: plain nonsymmetric eigensolve of the pencil
        Q = F._constant_complement(8)
        Ma = Q.T @ A.matrix @ Q
        Mb = Q.T @ B.matrix @ Q
        w = np.linalg.eigvals(np.linalg.solve(Ma, Mb))
        w = np.sort(w.real)
        assert hd.sup == pytest.approx(w[-1], rel=1e-8)
        assert hd.inf == pytest.approx(w[0], rel=1e-8)
        assert hd.h == pytest.approx(math.log(w[-1] / w[0]), rel=1e-8)

    def test_degenerate_rejected(self, bb2):
        M = np.zeros((64, 64))
        zero = F.DiscreteForm(bb2.spec_hash, 2, M, "zero")
        with pytest.raises(ValueError):
            F.hilbert_data(zero, bb2)


class TestCombine:
    def test_self_combination(self, bb2):
        C, markov_ok, hd = F.combine(bb2, bb2, 0.7)
        assert markov_ok
        assert hd.inf == pytest.approx(1.0, rel=1e-10)
        assert np.allclose(C.matrix, 0.7 * bb2.matrix, atol=1e-12)

    def test_always_conservative_psd(self, bb2, kz2):
        for delta in (0.001, 0.01, 0.1, 1.0):
            for A, B in [(bb2, kz2), (kz2, bb2)]:
                C, _, _ = F.combine(A, B, delta)
                scale = np.abs(C.matrix).max()
                assert np.abs(C.matrix.sum(axis=1)).max() <= 1e-13 * scale
                assert C.psd_check()

    def test_markov_flag_failure_detected(self):
        A = F.normalize(F.bb_form(SC2, 1, RHO), SC2)
        B = F.coarsen(F.bb_form(SC2, 2, RHO), SC2)
        _, small_delta_ok, _ = F.combine(A, B, 0.001)
        _, big_delta_ok, _ = F.combine(A, B, 1.0)
        assert not small_delta_ok
        assert big_delta_ok

    def test_invalid_delta(self, bb2, kz2):
        with pytest.raises(ValueError):
            F.combine(bb2, kz2, 0.0)


class TestMarkovContraction:
    def test_no_violations(self, bb2, kz2):
        for form in (bb2, kz2):
            out = F.markov_contraction_check(form, 300, seed=1)
            assert out["violations"] == 0


class TestContraction:
    def test_trivial_family(self, bb2):
        doubled = F.DiscreteForm(bb2.spec_hash, 2, 2.0 * bb2.matrix, "bb")
        res = F.contraction_experiment(SC2, 2, [bb2, doubled], 1)
        for row in res["table"]:
            assert row["h"]["0,1"] <= 1e-10

    def test_bb_kz_reported(self):
        A = F.bb_form(SC2, 3, RHO)
        B = F.kz_form(SC2, 3, RHO)
        res = F.contraction_experiment(SC2, 3, [A, B], 2)
        hs = [row["h"]["0,1"] for row in res["table"]]
        assert len(hs) == 3
        assert all(np.isfinite(h) and h >= 0 for h in hs)
        assert "monotone" in res


@pytest.fixture(scope="module")
def ts():
    gam = N.gamma_sequence(SC2, 4)
    return N.time_scale(SC2, gam)


class TestBesov:
    def test_constant_zero(self, ts):
        out = F.besov_norm(SC2, 2, np.ones(64), ts)
        assert out["N_H"] == 0.0

    def test_split_positive_finite(self, ts):
        ca = G.cells(SC2, 2)
        f = (ca[:, 0] < 4.5).astype(float)
        out = F.besov_norm(SC2, 2, f, ts)
        assert 0 < out["N_H"] < np.inf

    def test_radius_guard(self):
        with pytest.raises(ValueError):
            F.besov_pairs(SC2, 2, 1.0 / 81)


class TestSerialization:
    def test_roundtrip(self, kz2, tmp_path):
        p = tmp_path / "form.txt"
        kz2.save(str(p))
        back = F.DiscreteForm.load(str(p))
        assert back.level == kz2.level
        assert back.kind == kz2.kind
        assert np.allclose(back.matrix, kz2.matrix, atol=1e-15)
