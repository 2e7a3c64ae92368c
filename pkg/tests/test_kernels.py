import math

import numpy as np
import pytest

import kacmoments as km
from oracles import dirichlet_density, dirichlet_survival

BM = km.BrownianKernel()
RB = km.ReflectedBrownianKernel()
KB01 = km.KilledBrownianKernel(0.0, 1.0)
KB = km.KilledBrownianKernel(-1.0, 1.0)
DRIFT = km.DriftBrownianKernel(drift=1.0)
ALL = (BM, DRIFT, RB, KB)


class TestEvalDensity:
    def test_brownian_origin(self):
        assert km.eval_density(BM, 1.0, 0.0, 0.0) == pytest.approx(
            (2 * math.pi) ** -0.5, rel=1e-14)

    def test_reflected_boundary_doubles(self):
        assert km.eval_density(RB, 1.0, 0.0, 0.0) == pytest.approx(
            2 * (2 * math.pi) ** -0.5, rel=1e-14)

    def test_killed_matches_spectral_series(self):
        # frozen from the eigenfunction oracle
        expected = 1.2445655330056031
        assert dirichlet_density(0.1, 0.5, 0.5, 0.0, 1.0) == pytest.approx(
            expected, rel=1e-12)
        assert km.eval_density(KB01, 0.1, 0.5, 0.5) == pytest.approx(
            expected, rel=1e-10)

    @pytest.mark.parametrize("t,x,y", [(0.03, 0.2, 0.7), (0.5, 0.1, 0.9),
                                       (2.0, 0.5, 0.5)])
    def test_killed_spectral_grid(self, t, x, y):
        assert km.eval_density(KB01, t, x, y) == pytest.approx(
            dirichlet_density(t, x, y, 0.0, 1.0), abs=1e-11)

    def test_domain_and_time_validation(self):
        with pytest.raises(km.DomainError):
            km.eval_density(KB01, 1.0, 1.5, 0.5)
        with pytest.raises(km.DomainError):
            km.eval_density(RB, 1.0, -0.1, 0.5)
        with pytest.raises(ValueError):
            km.eval_density(BM, 0.0, 0.0, 0.0)

    def test_drift_mean_displacement(self):
        # density peaks near x + b t
        ys = np.linspace(-2, 4, 2001)
        dens = DRIFT.density(1.0, 0.0, ys)
        assert abs(ys[np.argmax(dens)] - 1.0) < 0.01


class TestSurvival:
    def test_conservative_families(self):
        for kern in (BM, DRIFT, RB):
            assert km.survival_mass(kern, 3.0, 0.5) == 1.0

    def test_killed_short_time_limit(self):
        assert km.survival_mass(KB01, 1e-6, 0.5) == pytest.approx(1.0, abs=1e-12)

    def test_killed_spectral_value(self):
        expected = 0.10797704444410905  # frozen from the odd-k series
        assert dirichlet_survival(0.5, 0.5, 0.0, 1.0) == pytest.approx(
            expected, rel=1e-12)
        assert km.survival_mass(KB01, 0.5, 0.5) == pytest.approx(expected,
                                                                 abs=1e-10)

    def test_cemetery_mass_monotone_in_t(self):
        ext = km.ExtendedKernel(KB01)
        ts = np.linspace(0.05, 2.0, 25)
        cm = np.array([float(ext.cemetery_mass(t, 0.3)) for t in ts])
        assert np.all(np.diff(cm) >= -1e-12)
        assert np.all((cm >= 0) & (cm <= 1))


class TestPotential:
    def test_brownian_coincidence(self):
        assert km.potential_density(BM, 0.5, 0.7, 0.7) == pytest.approx(1.0)

    def test_brownian_closed_form(self):
        assert km.potential_density(BM, 2.0, 0.0, 1.0) == pytest.approx(
            0.5 * math.exp(-2.0), rel=1e-14)

    def test_reflected_origin(self):
        assert km.potential_density(RB, 1.0, 0.0, 0.0) == pytest.approx(
            math.sqrt(2.0), rel=1e-12)

    @pytest.mark.parametrize("kern,x,y", [
        (BM, 0.0, 1.0), (BM, -0.3, -0.3), (DRIFT, 0.0, 0.7),
        (DRIFT, 1.0, -0.5), (RB, 0.2, 1.1), (KB, -0.4, 0.3)])
    @pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0])
    def test_quadrature_matches_closed_form(self, kern, x, y, alpha):
        closed = km.potential_density(kern, alpha, x, y)
        numeric, err = kern.potential_numeric(alpha, x, y)
        assert numeric == pytest.approx(closed, rel=1e-8)
        assert err < 1e-8 * max(closed, 1e-3)


class TestResolventEquation:
    @pytest.mark.parametrize("kern,ab", [(BM, (1.0, 2.0)), (BM, (1.0, 3.0)),
                                         (RB, (1.0, 2.0)), (RB, (1.0, 3.0))])
    def test_residual_small(self, kern, ab):
        assert km.check_resolvent_equation(kern, *ab) < 1e-6

    def test_equal_rates_rejected(self):
        with pytest.raises(ValueError):
            km.check_resolvent_equation(BM, 1.0, 1.0)


class TestChapmanKolmogorov:
    @pytest.mark.parametrize("kern", ALL, ids=lambda k: k.family)
    @pytest.mark.parametrize("ts", [(0.5, 0.5), (0.2, 1.0)])
    def test_residual(self, kern, ts):
        assert km.check_chapman_kolmogorov(kern, *ts) < 1e-6


class TestDuality:
    def test_drift_pair_residual(self):
        pair = km.drift_pair(1.0)
        box = km.Terminal.indicator(0.0, 1.0)
        assert km.check_duality(pair, 1.0, box, box, (0.0, 1.0)) < 1e-8

    def test_symmetric_case_is_trivial(self):
        pair = km.drift_pair(0.0)
        f = km.Terminal.indicator(0.0, 1.0)
        g = km.Terminal.indicator(0.2, 0.8)
        assert km.check_duality(pair, 0.7, f, g, (0.0, 1.0)) < 1e-14

    def test_zero_test_function(self):
        pair = km.drift_pair(2.0)
        zero = km.Terminal.constant(0.0, 0.0)
        f = km.Terminal.indicator(0.0, 1.0)
        assert km.check_duality(pair, 1.0, zero, f, (0.0, 1.0)) == 0.0

    def test_dual_density_is_transpose(self):
        pair = km.drift_pair(0.8)
        for (t, x, y) in [(0.3, 0.1, 1.2), (1.0, -1.0, 0.5)]:
            assert pair.dual.density(t, x, y) == pytest.approx(
                pair.forward.density(t, y, x), rel=1e-14)


class TestSymmetryAndDomination:
    @pytest.mark.parametrize("kern", (BM, RB, KB), ids=lambda k: k.family)
    def test_symmetry_exact(self, kern):
        # exact up to summation order of the image series
        assert km.check_symmetry(kern, 0.7) < 1e-15

    def test_killed_below_free(self):
        for x, y in km.default_lattice(KB, 0.5):
            assert km.eval_density(KB, 0.5, x, y) <= \
                km.eval_density(BM, 0.5, x, y) + 1e-14


class TestStateSpace:
    def test_interval_needs_two_finite_ends(self):
        with pytest.raises(ValueError):
            km.StateSpace("interval", 0.0, math.inf)

    def test_infinite_end_has_no_boundary(self):
        with pytest.raises(ValueError):
            km.StateSpace("half-line", 0.0, math.inf, upper_boundary="killing")

    def test_ordering(self):
        with pytest.raises(ValueError):
            km.StateSpace("interval", 1.0, -1.0)

    def test_killed_interval_is_open(self):
        space = KB01.space
        assert not space.contains(0.0)
        assert not space.contains(1.0)
        assert space.contains(0.5)

    def test_make_kernel_factory(self):
        assert km.make_kernel("brownian").family == "brownian"
        assert km.make_kernel("brownian-drift", drift=2.0).drift == 2.0
        k = km.make_kernel("killed-brownian", domain=(-2.0, 3.0))
        assert (k.lower, k.upper) == (-2.0, 3.0)
        with pytest.raises(ValueError):
            km.make_kernel("levy-flight")
