"""Monte Carlo measure estimates and the base-derivative comparison.

Scalar raw-Python oracles re-run the classification loops on the same
block-keyed draws, so any disagreement isolates the vectorized dynamics
rather than the sampling plumbing.
"""

import json
import math

import numpy as np
import pytest

from skewdyn.core import build_map
from skewdyn.errors import (
    BaseOutsideDomain,
    CriticalHit,
    EmptySample,
    OriginPeriodic,
    PreconditionViolated,
    RateTooLarge,
    ZeroBase,
)
from skewdyn.gallery import basilica_map, chebyshev_map, nearfixed_map, siegel_map
from skewdyn.mc import draw_blocks, uniform_annulus, uniform_disk
from skewdyn.measure import (
    EstimateReport,
    decay_cells_csv,
    e_set_area,
    exclusion_area,
    exclusion_rate,
    fiber_base_derivative,
    reports_to_csv,
    slow_approach_stats,
)


def exclusion_fixture():
    # slow expansion near 0 spreads first-failure indices over many l
    return build_map(0.65, 2, [[-1.749, 1.0]])


def oracle_slow_fraction(map, alpha, burn_in, horizon, samples, seed):
    # same draws as the op, scalar dynamics
    def draw(gen, count):
        z = uniform_disk(gen, count, map.r0)
        w = uniform_disk(gen, count, map.escape_radius)
        return np.stack([z, w], axis=1)

    pts = draw_blocks(seed, "slow", samples, draw, 1)
    kept = 0
    good = 0
    for z0, w0 in pts:
        z, w = complex(z0), complex(w0)
        ok = True
        escaped = False
        for n in range(1, horizon + 1):
            w = map.fiber_value(z, w)
            z = z * map.lam
            if abs(w) > map.escape_radius:
                escaped = True
                break
            if n >= burn_in and abs(w) < math.exp(-alpha * n):
                ok = False
        if escaped:
            continue
        kept += 1
        good += ok
    return kept, good / kept


def oracle_first_failures(map, alpha, m, samples, seed, horizon):
    r_outer = abs(map.lam) ** m * map.r0
    r_inner = abs(map.lam) * r_outer

    def draw(gen, count):
        return uniform_annulus(gen, count, r_inner, r_outer)

    z0s = draw_blocks(seed, "exclusion", samples, draw, 1)
    out = []
    for z0 in z0s:
        thr0 = abs(z0) ** (map.k / map.degree)
        z, w = complex(z0), 0.0 + 0.0j
        first = 0
        for l in range(1, horizon + 1):
            w = map.fiber_value(z, w)
            z = z * map.lam
            if abs(w) <= thr0 * math.exp(-alpha * l):
                first = l
                break
            if abs(w) > map.escape_radius:
                break
        out.append(first)
    return out


class TestSlowApproach:
    def test_nearfixed_fraction_at_scale(self):
        rep = slow_approach_stats(nearfixed_map(0.5), 0.05, 50, 500, 10_000, seed=11)
        assert rep.quantity == "slow_fraction"
        assert rep.estimate >= 0.99
        assert rep.samples > 1000  # plenty of non-escaping mass retained
        assert 0.0 <= rep.std_error < 0.01

    def test_huge_alpha_gives_one(self):
        # threshold e^(-10 n) is below any attained orbit scale
        rep = slow_approach_stats(nearfixed_map(0.5), 10.0, 10, 100, 2000, seed=3)
        assert rep.estimate == 1.0

    def test_matches_scalar_oracle(self):
        map = nearfixed_map(0.5)
        rep = slow_approach_stats(map, 0.05, 10, 60, 500, seed=29)
        kept, frac = oracle_slow_fraction(map, 0.05, 10, 60, 500, 29)
        assert rep.samples == kept
        assert rep.estimate == pytest.approx(frac, abs=1e-15)

    def test_fraction_nondecreasing_in_alpha(self):
        fracs = [slow_approach_stats(nearfixed_map(0.5), a, 20, 200, 3000, seed=4).estimate
                 for a in (0.01, 0.05, 0.2)]
        assert fracs == sorted(fracs)
        assert fracs[0] < fracs[-1]

    def test_fraction_nonincreasing_in_horizon(self):
        fracs = [slow_approach_stats(siegel_map(0.5), 0.05, 50, h, 3000, seed=4).estimate
                 for h in (100, 200, 400)]
        assert all(a >= b for a, b in zip(fracs, fracs[1:]))
        assert 0.0 < fracs[0] < 1.0

    def test_basilica_raises_origin_periodic(self):
        with pytest.raises(OriginPeriodic):
            slow_approach_stats(basilica_map(0.5), 0.05, 50, 500, 100, seed=1)

    def test_zero_samples_raise(self):
        with pytest.raises(EmptySample):
            slow_approach_stats(nearfixed_map(0.5), 0.05, 50, 500, 0, seed=1)

    def test_chebyshev_full_escape_raises(self):
        # the non-escaping set over a measure-zero Julia interval has area 0
        with pytest.raises(EmptySample):
            slow_approach_stats(chebyshev_map(0.5), 0.05, 10, 200, 500, seed=2)

    def test_parameter_gates(self):
        m = nearfixed_map(0.5)
        with pytest.raises(PreconditionViolated):
            slow_approach_stats(m, 0.0, 10, 100, 10, seed=1)
        with pytest.raises(PreconditionViolated):
            slow_approach_stats(m, 0.1, 100, 100, 10, seed=1)

    def test_thread_count_is_invisible(self):
        m = nearfixed_map(0.5)
        a = slow_approach_stats(m, 0.05, 20, 100, 5000, seed=9, threads=1)
        b = slow_approach_stats(m, 0.05, 20, 100, 5000, seed=9, threads=8)
        assert a == b

    def test_report_json(self):
        rep = slow_approach_stats(nearfixed_map(0.5), 0.05, 10, 50, 200, seed=5)
        js = rep.to_json()
        assert sorted(js.keys()) == [
            "estimate", "fitted_exponent", "parameters", "quantity",
            "samples", "seed", "std_error",
        ]
        json.dumps(js)


class TestESetArea:
    def test_n_zero_closed_form(self):
        # E_0 is the unit disk; its fraction of B(0, R) is 1/R^2
        m = chebyshev_map(0.5)
        rep = e_set_area(m, 0.0, 0.3, 0, 50_000, seed=5)[0]
        exact = 1.0 / m.escape_radius**2
        assert abs(rep.estimate - exact) <= 4.0 * rep.std_error + 1e-6

    def test_siegel_decay_fit(self):
        reps = e_set_area(siegel_map(0.5), 0.01, 0.05, range(20, 201, 20),
                          100_000, seed=7)
        fit = reps[-1]
        assert fit.quantity == "decay_fit"
        assert fit.fitted_exponent is not None and fit.fitted_exponent > 0
        assert fit.parameters["r_squared"] >= 0.9
        fracs = {r.parameters["n"]: r.estimate for r in reps[:-1]}
        assert fracs[20] > fracs[60] > 0  # visible decay on populated cells

    def test_chebyshev_cells_are_empty(self):
        # hyperbolic expansion pushes the sublevel mass below any feasible
        # sample size; the honest result is all-zero cells and no fit
        reps = e_set_area(chebyshev_map(0.5), 0.01, 0.1, [20, 40], 100_000, seed=9)
        assert all(r.estimate == 0.0 for r in reps[:-1])
        assert reps[-1].fitted_exponent is None
        assert reps[-1].parameters["r_squared"] is None

    def test_zero_alpha_no_decay(self):
        reps = e_set_area(siegel_map(0.5), 0.01, 0.0, [40, 120, 200], 30_000, seed=13)
        fracs = [r.estimate for r in reps[:-1]]
        assert all(f > 0.01 for f in fracs)
        assert max(fracs) < 1.5 * min(fracs)

    def test_matches_scalar_oracle(self):
        map = siegel_map(0.5)
        samples, seed, n_target = 400, 31, 25
        rep = e_set_area(map, 0.01, 0.05, n_target, samples, seed)[0]

        def draw(gen, count):
            return uniform_disk(gen, count, map.escape_radius)

        ws = draw_blocks(seed, "eset", samples, draw, 1)
        hits = 0
        for w0 in ws:
            z, w = 0.01 + 0.0j, complex(w0)
            escaped = False
            for _ in range(n_target):
                w = map.fiber_value(z, w)
                z = z * map.lam
                if abs(w) > map.escape_radius:
                    escaped = True
                    break
            hits += (not escaped) and abs(w) < math.exp(-0.05 * n_target)
        assert rep.estimate == pytest.approx(hits / samples, abs=1e-15)

    def test_fractions_are_area_fractions(self):
        reps = e_set_area(siegel_map(0.5), 0.0, 0.05, [5, 10], 2000, seed=2)
        for r in reps[:-1]:
            assert 0.0 <= r.estimate <= 1.0

    def test_gates(self):
        m = chebyshev_map(0.5)
        with pytest.raises(BaseOutsideDomain):
            e_set_area(m, m.r0 * 1.1, 0.1, 10, 100, seed=1)
        with pytest.raises(EmptySample):
            e_set_area(m, 0.0, 0.1, 10, 0, seed=1)
        with pytest.raises(PreconditionViolated):
            e_set_area(m, 0.0, -0.1, 10, 100, seed=1)
        with pytest.raises(PreconditionViolated):
            e_set_area(m, 0.0, 0.1, [], 100, seed=1)


class TestExclusionArea:
    def test_rate_hypothesis_value(self):
        assert exclusion_rate(exclusion_fixture(), 0.1) == pytest.approx(
            math.exp(0.2) * 0.65, rel=1e-12)

    def test_decay_fit_at_scale(self):
        reps = exclusion_area(exclusion_fixture(), 0.1, 8, range(12, 79, 3),
                              100_000, seed=21)
        fit = reps[-1]
        assert fit.fitted_exponent is not None and fit.fitted_exponent > 0
        assert fit.parameters["r_squared"] >= 0.8
        assert fit.parameters["nonzero_cells"] >= 5

    def test_failures_follow_critical_orbit_phase(self):
        # c = -1.749 puts the critical orbit near a period-3 cycle whose
        # small member is revisited every third step, so first failures
        # land on l = 0 mod 3 and the off-phase cells stay empty
        reps = exclusion_area(exclusion_fixture(), 0.1, 8, list(range(1, 13)),
                              20_000, seed=6)
        fracs = {r.parameters["l"]: r.estimate for r in reps[:-1]}
        assert all(fracs[l] == 0.0 for l in range(1, 13) if l % 3 != 0)
        assert fracs[3] > 0.1
        assert fracs[3] > fracs[6] > fracs[9] > 0

    def test_partition_with_never_failing(self):
        reps = exclusion_area(exclusion_fixture(), 0.1, 8, list(range(1, 121)),
                              20_000, seed=17, horizon=120)
        total = sum(r.estimate for r in reps[:-1])
        never = reps[-1].parameters["never_failing_fraction"]
        assert total + never == pytest.approx(1.0, abs=1e-12)

    def test_matches_scalar_oracle(self):
        map = exclusion_fixture()
        firsts = oracle_first_failures(map, 0.1, 8, 300, 41, horizon=100)
        reps = exclusion_area(map, 0.1, 8, list(range(1, 101)), 300, seed=41,
                              horizon=100)
        fracs = {r.parameters["l"]: r.estimate for r in reps[:-1]}
        for l in range(1, 101):
            expect = sum(1 for f in firsts if f == l) / 300
            assert fracs[l] == pytest.approx(expect, abs=1e-15)

    def test_rate_too_large_raises(self):
        with pytest.raises(RateTooLarge):
            exclusion_area(build_map(0.9, 2, [[-2.0, 1.0]]), 0.1, 2, [5], 100, seed=1)

    def test_gates(self):
        m = exclusion_fixture()
        with pytest.raises(PreconditionViolated):
            exclusion_area(m, 0.1, -1, [5], 100, seed=1)
        with pytest.raises(PreconditionViolated):
            exclusion_area(m, 0.1, 2, [50], 100, seed=1, horizon=40)
        with pytest.raises(EmptySample):
            exclusion_area(m, 0.1, 2, [5], 0, seed=1)

    def test_thread_count_is_invisible(self):
        a = exclusion_area(exclusion_fixture(), 0.1, 8, [12, 15, 18], 20_000,
                           seed=3, threads=1)
        b = exclusion_area(exclusion_fixture(), 0.1, 8, [12, 15, 18], 20_000,
                           seed=3, threads=8)
        assert a == b
        assert reports_to_csv(a) == reports_to_csv(b)


class TestFiberBaseDerivative:
    def test_single_step_is_coefficient_derivative(self):
        rep = fiber_base_derivative(chebyshev_map(0.5), 0.003, 1)
        assert rep.x_l == 1.0  # c'(z) is identically 1 for c(z) = -2 + z
        assert rep.ratio == rep.x_l  # empty derivative product
        assert rep.fd_dps == 0

    def test_deep_grid_against_bound_and_difference(self):
        m = chebyshev_map(0.5)
        for z0 in np.geomspace(1e-4, 1e-2, 10):
            rep = fiber_base_derivative(m, float(z0), 40)
            assert rep.within_bound
            assert rep.deviation <= 0.01 * rep.bound  # far inside the half-margin
            assert rep.fd_rel_deviation <= 1e-5
            assert rep.recursion_vs_sum_rel <= 1e-10

    def test_target_uses_leading_term(self):
        m = chebyshev_map(0.5)
        rep = fiber_base_derivative(m, 0.002, 100)
        assert rep.target == pytest.approx(6.0 / 7.0, rel=1e-10)
        assert rep.recursion_vs_sum_rel <= 1e-10
        assert rep.within_bound

    def test_doubled_base_power_target(self):
        k2 = build_map(0.5, 2, [[-2.0, 0.0, 1.0]])
        rep = fiber_base_derivative(k2, 0.004, 30)
        assert rep.k == 2
        assert rep.target == pytest.approx(2.0 * (14.0 / 15.0) * 0.004, rel=1e-10)
        assert rep.within_bound
        assert rep.fd_rel_deviation <= 1e-10

    def test_double_precision_regime(self):
        m = chebyshev_map(0.5)
        rep = fiber_base_derivative(m, 0.005, 8)
        assert rep.fd_dps == 0
        assert rep.fd_step == pytest.approx(1e-9 * 0.005, rel=1e-12)
        # cancellation noise at the fixed step caps the attainable agreement
        assert rep.fd_rel_deviation <= 1e-4
        deep = fiber_base_derivative(m, 0.005, 9)
        assert deep.fd_dps >= 60

    def test_critical_passage_raises(self):
        # xi_1 = c0(0) + z0 = 0 exactly
        m = build_map(0.5, 2, [[-0.01, 1.0]])
        with pytest.raises(CriticalHit) as exc:
            fiber_base_derivative(m, 0.01, 3)
        assert exc.value.index == 1

    def test_gates(self):
        m = chebyshev_map(0.5)
        with pytest.raises(ZeroBase):
            fiber_base_derivative(m, 0.0, 5)
        with pytest.raises(BaseOutsideDomain):
            fiber_base_derivative(m, m.r0 * 2, 5)
        with pytest.raises(PreconditionViolated):
            fiber_base_derivative(m, 0.01, 0)
        gen = build_map(0.5, 2, [[-2.0, 1.0], [0.0]], mode="general")
        with pytest.raises(PreconditionViolated):
            fiber_base_derivative(gen, 0.01, 5)

    def test_json(self):
        rep = fiber_base_derivative(chebyshev_map(0.5), 0.003, 12)
        js = rep.to_json()
        assert js["l"] == 12 and js["k"] == 1
        assert js["within_bound"] is True
        json.dumps(js)


class TestSerialization:
    def test_csv_shape_and_determinism(self):
        reps = exclusion_area(exclusion_fixture(), 0.1, 8, [12, 15], 5000, seed=3)
        text = reports_to_csv(reps)
        lines = text.splitlines()
        assert lines[0] == "quantity,samples,estimate,std_error,fitted_exponent,seed,parameters"
        assert len(lines) == len(reps) + 1
        assert text == reports_to_csv(reps)
        # decay_fit row with no fit leaves the exponent cell blank
        empty = e_set_area(chebyshev_map(0.5), 0.01, 0.1, [20], 1000, seed=1)
        row = reports_to_csv(empty).splitlines()[-1]
        assert row.split(",")[4] == ""

    def test_decay_cells_csv(self):
        reps = exclusion_area(exclusion_fixture(), 0.1, 8, range(12, 40, 3),
                              20_000, seed=21)
        text = decay_cells_csv(reps)
        lines = text.splitlines()
        assert lines[0] == "l,log_fraction"
        assert len(lines) > 2
        for line in lines[1:]:
            l, lf = line.split(",")
            assert float(lf) < 0.0

    def test_std_error_is_indicator_formula(self):
        rep = slow_approach_stats(nearfixed_map(0.5), 0.02, 20, 150, 4000, seed=8)
        p, n = rep.estimate, rep.samples
        assert rep.std_error == pytest.approx(math.sqrt(p * (1 - p) / (n - 1)), rel=1e-12)

    def test_estimate_report_equality(self):
        a = EstimateReport("K_area", {"l": 1}, 10, 0.5, 0.1, None, 7)
        b = EstimateReport("K_area", {"l": 1}, 10, 0.5, 0.1, None, 7)
        assert a == b
