import math

import numpy as np
import pytest

import kacmoments as km
from oracles import expected_local_time

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def scheme(**kw):
    base = dict(family="brownian", step=1e-3, seed=2024)
    base.update(kw)
    return km.PathScheme(**base)


class TestOccupation:
    def test_unit_weight_is_deterministic_clock(self):
        est = km.estimate_moment(scheme(), km.Occupation(), 0.0, 1.0,
                                 powers=1, n_paths=400)
        assert est.mean == pytest.approx(1.0, abs=1e-12)
        assert est.std_error < 1e-14

    def test_indicator_weight_between_zero_and_t(self):
        occ = km.Occupation(weight=km.Density("indicator", (0.0, 1.0, 1.0)))
        est = km.estimate_moment(scheme(), occ, 0.0, 1.0, n_paths=2000)
        assert 0.0 < est.mean < 1.0


class TestReproducibility:
    def test_bitwise_identical_runs(self):
        lt = km.LocalTime(0.0, eps=0.05)
        a = km.estimate_moment(scheme(), lt, 0.0, 1.0, n_paths=3000)
        b = km.estimate_moment(scheme(), lt, 0.0, 1.0, n_paths=3000)
        assert a.mean == b.mean and a.std_error == b.std_error
        assert a.config_digest == b.config_digest

    def test_worker_count_does_not_change_results(self):
        lt = km.LocalTime(0.0, eps=0.05)
        a = km.estimate_moment(scheme(), lt, 0.0, 1.0, n_paths=40000, workers=1)
        b = km.estimate_moment(scheme(), lt, 0.0, 1.0, n_paths=40000, workers=3)
        assert a.mean == b.mean

    def test_streams_are_distinct(self):
        lt = km.LocalTime(0.0, eps=0.05)
        a = km.estimate_moment(scheme(stream_id=0), lt, 0.0, 1.0, n_paths=3000)
        b = km.estimate_moment(scheme(stream_id=1), lt, 0.0, 1.0, n_paths=3000)
        c = km.estimate_moment(scheme(seed=77), lt, 0.0, 1.0, n_paths=3000)
        assert a.mean != b.mean and a.mean != c.mean


class TestLocalTime:
    def test_epsilon_occupation_mean(self):
        # target is the exact expectation of the eps-occupation functional:
        # the average of the occupation density E_0 over [-eps, eps]
        eps = 0.05
        sch = scheme(step=2.5e-4)
        est = km.estimate_moment(sch, km.LocalTime(0.0, eps=eps), 0.0, 1.0,
                                 n_paths=30000)
        profile = lambda z: np.array(
            [expected_local_time(float(v), 1.0) for v in np.atleast_1d(z)])
        target = km.integrate(
            km.indicator_measure(-eps, eps, 1.0 / (2 * eps)), profile)
        assert est.mean == pytest.approx(target, abs=4 * est.std_error + 0.01)

    def test_downcrossing_agrees_with_levy_value(self):
        sch = scheme(step=2e-5, seed=5)
        est = km.estimate_moment(sch, km.LocalTime(0.0, eps=0.05,
                                                   method="downcrossing"),
                                 0.0, 1.0, n_paths=4000)
        # slow O(eps) bias: allow a generous but finite band
        assert est.mean == pytest.approx(SQRT_2_OVER_PI,
                                         abs=4 * est.std_error + 0.12)

    @pytest.mark.slow
    def test_estimator_cross_agreement(self):
        # eps-occupation and downcrossing agree within combined error, where
        # the downcrossing step bias is Richardson-extrapolated from three
        # resolutions (its convergence in dt is slow, so the budget is wide)
        for eps in (0.02, 0.01):
            dc = []
            for dt in (4e-5, 2e-5, 1e-5):
                est = km.estimate_moment(
                    scheme(step=dt, seed=9),
                    km.LocalTime(0.0, eps=eps, method="downcrossing"),
                    0.0, 1.0, n_paths=3000)
                dc.append(est)
            d1 = dc[1].mean - dc[0].mean
            d2 = dc[2].mean - dc[1].mean
            ratio = d1 / d2 if d2 else 2.0
            dc_bias = abs(d2) / max(ratio - 1.0, 0.1)
            a = km.estimate_moment(scheme(step=1e-5, seed=9),
                                   km.LocalTime(0.0, eps=eps), 0.0, 1.0,
                                   n_paths=3000)
            combined = 3 * math.hypot(a.std_error, dc[2].std_error) \
                + dc_bias + 2.0 * eps
            assert abs(a.mean - dc[2].mean) <= combined

    @pytest.mark.slow
    def test_richardson_convergence(self):
        # halving dt and eps moves the mean by less than the extrapolated budget
        budget = km.richardson_bias(scheme(step=1e-3, seed=31),
                                    km.LocalTime(0.0, eps=0.1), 0.0, 1.0,
                                    n_paths=20000)
        fine = km.estimate_moment(scheme(step=5e-4, seed=87),
                                  km.LocalTime(0.0, eps=0.05), 0.0, 1.0,
                                  n_paths=20000)
        coarse = km.estimate_moment(scheme(step=1e-3, seed=88),
                                    km.LocalTime(0.0, eps=0.1), 0.0, 1.0,
                                    n_paths=20000)
        assert abs(fine.mean - coarse.mean) <= 3 * budget + \
            3 * math.hypot(fine.std_error, coarse.std_error)


class TestWarnings:
    def test_step_adjustment_flagged(self):
        est = km.estimate_moment(scheme(step=3e-4), km.Occupation(), 0.0, 1.0,
                                 n_paths=100)
        assert any("adjusted" in w for w in est.warnings)

    def test_eps_below_resolution_flagged(self):
        est = km.estimate_moment(scheme(step=1e-2),
                                 km.LocalTime(0.0, eps=0.01), 0.0, 1.0,
                                 n_paths=100)
        assert any("resolution" in w for w in est.warnings)


class TestAdditivity:
    def test_occupation_resummation(self):
        dev = km.check_additivity(scheme(), km.Occupation(), 0.0, 0.5, 0.5,
                                  n_paths=2000)
        assert dev < 1e-12

    def test_eps_occupation_resummation(self):
        dev = km.check_additivity(scheme(), km.LocalTime(0.0, eps=0.05),
                                  0.0, 0.5, 0.5, n_paths=2000)
        assert dev < 1e-12

    def test_downcrossing_straddle_bound(self):
        est = km.LocalTime(0.0, eps=0.05, method="downcrossing")
        dev = km.check_additivity(scheme(step=5e-4), est, 0.0, 0.5, 0.5,
                                  n_paths=2000)
        assert dev <= 2 * est.eps + 1e-12  # one straddling crossing


class TestDiscounted:
    def test_deterministic_clock(self):
        disc = km.Discounted(alpha=1.0, base=km.Occupation())
        est = km.estimate_discounted(scheme(step=2e-3, seed=4), disc, 0.0,
                                     n_paths=500)
        assert est.mean == pytest.approx(1.0, abs=5e-4)
        assert est.std_error < 2e-3  # truncation budget folded in

    def test_zero_weight(self):
        disc = km.Discounted(alpha=1.0, base=km.Occupation(),
                             weight=km.Density("constant", (0.0,)),
                             label="0")
        est = km.estimate_discounted(scheme(step=2e-3, seed=4), disc, 0.0,
                                     n_paths=200)
        assert est.mean == 0.0

    def test_local_time_matches_potential(self):
        # the Revuz identity at alpha = 1/2: target U_alpha mu_eps(0)
        eps, alpha = 0.05, 0.5
        disc = km.Discounted(alpha=alpha, base=km.LocalTime(0.0, eps=eps))
        est = km.estimate_discounted(scheme(step=1e-3, seed=6), disc, 0.0,
                                     n_paths=12000)
        bm = km.BrownianKernel()
        mu_eps = km.indicator_measure(-eps, eps, 1.0 / (2 * eps))
        target = km.potential_of_measure(bm, mu_eps, alpha, 0.0)
        assert abs(est.mean - target) <= 3 * est.std_error + 0.02


class TestKilledPaths:
    def test_survival_frequency_matches_kernel(self):
        kern = km.KilledBrownianKernel(-1.0, 1.0)
        sch = scheme(family="killed-brownian", domain=(-1.0, 1.0),
                     step=5e-4, killing_detection="bridge-corrected")
        alive = km.Terminal.constant(1.0, cemetery=0.0)
        est = km.estimate_moment(sch, km.Occupation(), 0.0, 1.0, powers=0,
                                 terminal=alive, n_paths=30000)
        target = km.survival_mass(kern, 1.0, 0.0)
        assert abs(est.mean - target) <= 3 * est.std_error + 0.01

    def test_grid_crossing_overestimates_survival(self):
        grid = scheme(family="killed-brownian", domain=(-1.0, 1.0), step=1e-3)
        bridge = scheme(family="killed-brownian", domain=(-1.0, 1.0),
                        step=1e-3, killing_detection="bridge-corrected")
        alive = km.Terminal.constant(1.0, cemetery=0.0)
        a = km.estimate_moment(grid, km.Occupation(), 0.0, 1.0, powers=0,
                               terminal=alive, n_paths=20000)
        b = km.estimate_moment(bridge, km.Occupation(), 0.0, 1.0, powers=0,
                               terminal=alive, n_paths=20000)
        assert a.mean > b.mean  # undetected excursions keep paths alive


class TestCompare:
    def test_exact_agreement(self):
        engine = km.MomentResult(1.0, 0.0)
        mc = km.McEstimate(1.0, 0.0, 100, "d")
        res = km.compare(engine, mc)
        assert res.z == 0.0 and res.verdict == "pass"

    def test_zero_uncertainty_mismatch_is_hard_fail(self):
        engine = km.MomentResult(1.0, 0.0)
        mc = km.McEstimate(2.0, 0.0, 100, "d")
        with pytest.raises(km.ConfigurationError):
            km.compare(engine, mc)

    def test_mismatched_problem_keys_refused(self):
        engine = km.MomentResult(1.0, 0.0, meta={"problem_key": "aaa"})
        mc = km.McEstimate(1.0, 0.1, 100, "d", meta={"problem_key": "bbb"})
        with pytest.raises(km.ConfigurationError):
            km.compare(engine, mc)

    def test_z_formula(self):
        engine = km.MomentResult(1.0, 0.003)
        mc = km.McEstimate(0.99, 0.004, 100, "d")
        res = km.compare(engine, mc)
        assert res.z == pytest.approx(0.01 / math.hypot(0.003, 0.004))

    def test_bias_budget_widens(self):
        engine = km.MomentResult(1.0, 0.0)
        mc = km.McEstimate(0.9, 0.01, 100, "d")
        assert km.compare(engine, mc).verdict == "fail"
        assert km.compare(engine, mc, bias_budget=0.05).verdict == "pass"


class TestSchemeValidation:
    def test_unknown_family(self):
        with pytest.raises(ValueError):
            km.PathScheme(family="ornstein")

    def test_killed_needs_domain(self):
        with pytest.raises(ValueError):
            km.PathScheme(family="killed-brownian")

    def test_needs_two_paths(self):
        with pytest.raises(ValueError):
            km.estimate_moment(scheme(), km.Occupation(), 0.0, 1.0, n_paths=1)
