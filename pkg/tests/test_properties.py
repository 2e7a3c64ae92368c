"""Cross-cutting invariants of the engine, property-style."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

import kacmoments as km
from oracles import simplex_atom_moment

BM = km.BrownianKernel()
D0 = km.point_mass(0.0)
LEB = km.lebesgue()

times = st.floats(min_value=0.05, max_value=4.0)
states = st.floats(min_value=-3.0, max_value=3.0)


class TestKernelProperties:
    @given(t=times, x=states, y=states)
    @settings(max_examples=60, deadline=None)
    def test_density_positive_and_symmetric(self, t, x, y):
        v = km.eval_density(BM, t, x, y)
        assert v >= 0.0
        assert v == pytest.approx(km.eval_density(BM, t, y, x), rel=1e-12)

    @given(t=times, x=st.floats(min_value=0.0, max_value=3.0))
    @settings(max_examples=40, deadline=None)
    def test_survival_is_probability(self, t, x):
        kern = km.KilledBrownianKernel(-0.5, 3.5)
        s = km.survival_mass(kern, t, x)
        assert 0.0 <= s <= 1.0

    @given(alpha=st.floats(min_value=0.2, max_value=8.0), x=states, y=states)
    @settings(max_examples=25, deadline=None)
    def test_potential_quadrature_matches_closed_form(self, alpha, x, y):
        closed = km.potential_density(BM, alpha, x, y)
        numeric, _ = BM.potential_numeric(alpha, x, y)
        assert numeric == pytest.approx(closed, rel=1e-8)


class TestMomentInvariants:
    @pytest.fixture(scope="class")
    def catalog(self):
        return {
            "atom": D0,
            "half atom": km.point_mass(0.0, 0.5),
            "box": km.indicator_measure(-0.5, 0.5),
            "bump": km.gaussian_bump(0.2, 0.4, 0.8),
        }

    def _moment(self, mu, k, t, x=0.0, kernel=BM):
        req = km.MomentRequest(kernel, (mu,) * k, x, t, "identical-power")
        return km.kth_moment(req).value

    def test_positivity_and_monotone_in_t(self, catalog):
        for name, mu in catalog.items():
            vals = [self._moment(mu, 2, t) for t in (0.5, 1.0, 2.0)]
            assert all(v >= 0 for v in vals), name
            assert vals == sorted(vals), name

    def test_measure_domination(self, catalog):
        for name, mu in catalog.items():
            small = self._moment(mu, 2, 1.0)
            large = self._moment(mu.scaled(1.5), 2, 1.0)
            assert small <= large * (1 + 1e-9), name

    def test_cauchy_schwarz(self, catalog):
        for name, mu in catalog.items():
            m1 = self._moment(mu, 1, 1.0)
            m2 = self._moment(mu, 2, 1.0)
            assert m1 ** 2 <= m2 * (1 + 1e-7), name

    @pytest.mark.parametrize("t", [0.25, 4.0])
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_brownian_local_time_scaling(self, k, t):
        base = self._moment(D0, k, 1.0)
        assert self._moment(D0, k, t) == pytest.approx(
            t ** (k / 2.0) * base, rel=1e-6)

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_deterministic_collapse_scaled(self, c):
        for k in (1, 2, 3):
            assert self._moment(LEB.scaled(c), k, 1.5) == pytest.approx(
                (c * 1.5) ** k, rel=1e-6)

    def test_killed_below_free(self, catalog):
        for name, mu in catalog.items():
            req = km.MomentRequest(BM, (mu,) * 2, 0.0, 1.0, "identical-power")
            free = km.kth_moment(req).value
            killed = km.killed_variant(req, (-1.5, 1.5)).value
            assert killed <= free * (1 + 1e-9), name


class TestSimplexEquivalence:
    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_recursion_matches_direct_simplex(self, k):
        atoms = ((0.0, 1.0), (0.5, 0.4))
        mu = km.RevuzMeasure(None, atoms, (-1.0, 1.5))
        direct = simplex_atom_moment(
            lambda gap, a, b: BM.density(gap, a, b), atoms, 0.2, 1.0, k)
        req = km.MomentRequest(BM, (mu,) * k, 0.2, 1.0, "identical-power")
        recursion = km.kth_moment(req).value / math.factorial(k)
        assert recursion == pytest.approx(direct, rel=2e-5)


class TestRevuzIdentity:
    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
    @pytest.mark.parametrize("x", [0.0, 1.0])
    def test_discounted_first_moment_matches_potential(self, alpha, x):
        # time quadrature of the first-moment rate against e^(-alpha s)
        rate = lambda s: float(BM.density(s, x, 0.0))
        horizon = 40.0 / alpha
        val, _ = quad(lambda s: math.exp(-alpha * s) * rate(s), 0, horizon,
                      limit=400)
        assert val == pytest.approx(
            km.potential_of_measure(BM, D0, alpha, x), rel=1e-7)

    def test_weighted_rate_for_density_measure(self):
        alpha, x = 1.0, 0.3
        mu = km.indicator_measure(-0.5, 0.5)
        rate = lambda s: float(quad(
            lambda y: float(BM.density(s, x, y)), -0.5, 0.5)[0])
        val, _ = quad(lambda s: math.exp(-alpha * s) * rate(s), 0, 40.0,
                      limit=300)
        assert val == pytest.approx(
            km.potential_of_measure(BM, mu, alpha, x), rel=1e-6)


class TestWeightedMeasureIdentity:
    def test_spatial_weight_equals_weighted_measure(self):
        # E_x int f(X_s) dA_s as a kac step with spatial weight g(y) = f(y)
        # must equal the first moment of the weighted measure f * mu; with
        # mu = Lebesgue and a Gaussian f, f * mu is again in the catalog
        centre, width, mass = 0.3, 0.5, 0.8
        bump = km.Density("gauss", (centre, width, mass))

        def g(y, tau):
            return bump(y)

        lhs = km.kac_step(BM, LEB, g, 0.0, 1.0)
        weighted = km.gaussian_bump(centre, width, mass)
        req = km.MomentRequest(BM, (weighted,), 0.0, 1.0, "identical-power")
        rhs = km.kth_moment(req).value
        assert lhs == pytest.approx(rhs, rel=5e-5)
