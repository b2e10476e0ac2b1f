"""Divergence constants, the reweighting program, and the f-divergence
certificates.

The solver is checked three independent ways: hand-solved instances with
closed-form optima, Lagrangian stationarity residuals recomputed from
scratch in the test, and the exhaustive grid oracle on a frozen corpus.
"""
import numpy as np
import pytest

from fedcert.fdiv import (
    DivergenceSpec,
    divergence_budgets,
    fdiv_cdf_bound,
    fdiv_mean_bound,
    make_divergence,
    solve_reweight,
    _binary_block_value,
)
from fedcert.nonrobust import cdf_bound, mean_bound
from fedcert.oracle import grid_reweight_oracle

from _corpus import reweight_instance

# omega = W(1): cap for KL at epsilon/delta = 1 is exp(omega) = 1/omega
_OMEGA = 0.5671432904097838


# ---------------------------------------------------------------- constants

def test_zero_budget_collapses_constants():
    for name in ("kl", "chi-square"):
        spec = make_divergence(name, 0.0, 0.1)
        assert spec.cap == 1.0
        assert spec.c1 == 0.0
        assert spec.c2 == 0.0
        assert spec.f_argmin == 1.0


def test_kl_cap_is_inverse_of_t_log_t():
    spec = make_divergence("kl", 0.1, 0.1)   # t log t = 1
    assert abs(spec.cap - 1.7632228343518968) < 1e-9
    assert abs(spec.cap - 1.0 / _OMEGA) < 1e-9
    # the cap saturates the budget
    assert abs(spec.cap * np.log(spec.cap) - 1.0) < 1e-9


def test_chi2_cap_closed_form():
    for eps, delta in [(0.1, 0.1), (0.2, 0.1), (0.05, 0.25), (0.3, 0.05)]:
        spec = make_divergence("chi-square", eps, delta)
        assert abs(spec.cap - (1.0 + np.sqrt(eps / delta))) < 1e-9


def test_chi2_constants_at_ratio_two():
    # cap = 1 + sqrt(2), so cap - 1/cap = 2 and (cap-1)^2 = 2: both constants
    # collapse to sqrt(2)
    spec = make_divergence("chi-square", 0.2, 0.1)
    assert abs(spec.c1 - np.sqrt(2.0)) < 1e-9
    assert abs(spec.c2 - np.sqrt(2.0)) < 1e-9


def test_c1_formula_chi2_cap_two():
    spec = make_divergence("chi-square", 0.1, 0.1)
    assert abs(spec.cap - 2.0) < 1e-9
    assert abs(spec.c1 - 1.5 / np.sqrt(2.0)) < 1e-9
    assert abs(spec.c2 - 1.0 / np.sqrt(2.0)) < 1e-9


def test_kl_c2_small_cap():
    # cap < e, so t log t is minimized at the left endpoint 1/cap = omega,
    # where f(omega) = -omega^2; the max sits at the right endpoint, f(cap)=1
    spec = make_divergence("kl", 0.1, 0.1)
    assert abs(spec.f_argmin - _OMEGA) < 1e-7
    want = (1.0 + _OMEGA ** 2) / np.sqrt(2.0)
    assert abs(spec.c2 - want) < 1e-8
    assert abs(spec.c2 - 0.9345487463994223) < 1e-9


def test_kl_c2_large_cap():
    # epsilon/delta = 3 puts 1/e inside [1/cap, cap]: min is -1/e, max is 3
    spec = make_divergence("kl", 0.3, 0.1)
    assert spec.cap > np.e
    assert abs(spec.f_argmin - 1.0 / np.e) < 1e-7
    want = (3.0 + 1.0 / np.e) / np.sqrt(2.0)
    assert abs(spec.c2 - want) < 1e-8


def test_make_divergence_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_divergence("hellinger", 0.1, 0.1)
    with pytest.raises(ValueError):
        make_divergence("kl", -0.01, 0.1)
    with pytest.raises(ValueError):
        make_divergence("kl", 0.1, 0.0)
    with pytest.raises(ValueError):
        make_divergence("kl", 0.1, 1.0)


def test_budget_formulas():
    spec = make_divergence("chi-square", 0.1, 0.1)
    K = 100
    s_mean = np.sqrt(np.log(1.0 / 0.1) / K)
    band, eps_b = divergence_budgets(spec, K, "mean")
    assert abs(band - spec.c1 * s_mean) < 1e-12
    assert abs(eps_b - (0.1 + spec.c2 * s_mean)) < 1e-12
    assert abs(band - 0.16094745197170102) < 1e-12
    assert abs(eps_b - 0.20729830131446736) < 1e-12

    s_cdf = np.sqrt(np.log(K / 0.1) / K)
    band_c, eps_c = divergence_budgets(spec, K, "cdf")
    assert abs(band_c - spec.c1 * s_cdf) < 1e-12
    assert abs(eps_c - (0.1 + spec.c2 * s_cdf)) < 1e-12
    assert band_c > band and eps_c > eps_b
    with pytest.raises(ValueError):
        divergence_budgets(spec, K, "median")


# ------------------------------------------------------------------ solver

def test_reweight_no_freedom_returns_uniform():
    q = np.array([0.3, 0.9, 0.1, 0.5])
    spec = make_divergence("kl", 0.1, 0.1)
    sol = solve_reweight(q, spec, 0.0, 0.0)
    assert np.allclose(sol.alpha, 1.0, atol=1e-12)
    assert abs(sol.objective - float(np.mean(q))) < 1e-12
    assert sol.status == "optimal"


def test_reweight_two_client_closed_form():
    # band = 0 pins mean(alpha) = 1, so alpha = (1+a, 1-a) and the chi-square
    # budget mean f = a^2 allows a = sqrt(1/2); objective 0.5 + 0.3 a
    spec = make_divergence("chi-square", 0.2, 0.1)
    sol = solve_reweight(np.array([0.8, 0.2]), spec, 0.5, 0.0)
    assert abs(sol.objective - (0.5 + 0.3 * np.sqrt(0.5))) < 1e-7
    assert abs(sol.alpha[0] - (1.0 + np.sqrt(0.5))) < 1e-6
    assert abs(sol.alpha[1] - (1.0 - np.sqrt(0.5))) < 1e-6
    assert sol.status == "optimal"


def test_reweight_three_client_indicator():
    # q = e_1, band = 0: alpha = (1+2a, 1-a, 1-a) with mean f = 2a^2 <= 1/2,
    # so alpha = (2, 1/2, 1/2) and the objective is 2/3
    spec = make_divergence("chi-square", 0.15, 0.1)
    q = np.array([1.0, 0.0, 0.0])
    sol = solve_reweight(q, spec, 0.5, 0.0)
    assert abs(sol.objective - 2.0 / 3.0) < 1e-7
    assert np.allclose(sol.alpha, [2.0, 0.5, 0.5], atol=1e-5)
    # the same instance through the indicator-block shortcut
    assert abs(_binary_block_value(1, 3, spec, 0.5, 0.0) - 2.0 / 3.0) < 1e-8
    # and through the exhaustive grid
    orc = grid_reweight_oracle(q, spec, 0.5, 0.0, step=2e-3)
    assert abs(sol.objective - orc) <= 2e-3


def test_reweight_solutions_feasible():
    rng = np.random.default_rng(np.random.SeedSequence(4151))
    for trial in range(50):
        K = int(rng.integers(2, 30))
        name = "kl" if trial % 2 else "chi-square"
        spec = make_divergence(name, float(rng.uniform(0.01, 0.3)), 0.1)
        q = rng.uniform(0.0, 1.0, K)
        band = float(rng.uniform(0.0, 0.4))
        eps_budget = float(rng.uniform(0.0, 0.6))
        sol = solve_reweight(q, spec, eps_budget, band)
        a = sol.alpha
        assert np.all(a >= -1e-9) and np.all(a <= spec.cap + 1e-9)
        assert abs(float(np.mean(a)) - 1.0) <= band + 1e-6
        assert float(np.mean(spec.f(a))) <= eps_budget + 1e-6
        assert abs(sol.objective - float(np.mean(a * q))) < 1e-12
        assert sol.status in ("optimal", "tolerance")


def test_reweight_kkt_residuals():
    # when the divergence multiplier eta is interior, the Lagrangian argmax
    # has a closed form per coordinate; recompute it from the reported
    # multipliers and check stationarity and complementary slackness
    rng = np.random.default_rng(np.random.SeedSequence(5252))
    checked = 0
    for trial in range(30):
        K = int(rng.integers(3, 25))
        name = "kl" if trial % 2 else "chi-square"
        spec = make_divergence(name, float(rng.uniform(0.04, 0.14)), 0.1)
        q = rng.uniform(0.0, 1.0, K)
        band = float(rng.uniform(0.02, 0.25))
        eps_budget = float(rng.uniform(0.03, 0.25))
        sol = solve_reweight(q, spec, eps_budget, band)
        if sol.status != "optimal" or not (1e-9 < sol.eta < 1e6):
            continue
        checked += 1
        if name == "kl":
            # d/da [a(q - tau) - eta a log a] = q - tau - eta (log a + 1)
            stat = np.exp((q - sol.tau) / sol.eta - 1.0)
        else:
            # d/da [a(q - tau) - eta (a-1)^2] = q - tau - 2 eta (a - 1)
            stat = 1.0 + (q - sol.tau) / (2.0 * sol.eta)
        stat = np.clip(stat, 0.0, spec.cap)
        assert np.allclose(sol.alpha, stat, atol=1e-6)
        # active budget under a positive multiplier
        assert abs(float(np.mean(spec.f(sol.alpha))) - eps_budget) < 1e-5
        if abs(sol.tau) > 1e-9:
            side = 1.0 + band if sol.tau > 0 else 1.0 - band
            assert abs(float(np.mean(sol.alpha)) - side) < 1e-5
    assert checked >= 8


def test_reweight_tracks_grid_oracle_subset():
    # fast slice of the frozen corpus; the acceptance suite runs all fifty
    cases = [(2, i, 1e-3) for i in range(4)] + [(3, i, 2e-3) for i in range(2)]
    for K, i, step in cases:
        name, spec, q, band, eps_budget = reweight_instance(K, i)
        sol = solve_reweight(q, spec, eps_budget, band)
        orc = grid_reweight_oracle(q, spec, eps_budget, band, step=step)
        assert abs(sol.objective - orc) <= 2e-3, (K, i, name)


# ------------------------------------------------------------- mean bound

def test_mean_bound_zero_shift_reduces_to_empirical():
    qv = np.array([0.12, 0.4, 0.33, 0.05, 0.2])
    n = np.full(5, 50)
    b = fdiv_mean_bound(qv, n, 0.1, 0.0, "kl", include_slack=False)
    assert abs(b.value - float(np.mean(qv))) < 1e-12
    plain = mean_bound(qv, n, 0.1, include_slack=False)
    assert abs(b.value - plain.value) < 1e-12


def test_mean_bound_monotone_in_epsilon():
    rng = np.random.default_rng(np.random.SeedSequence(633))
    qv = rng.uniform(0.0, 0.6, 40)
    n = np.full(40, 100)
    for name in ("kl", "chi-square"):
        prev = -np.inf
        for eps in (0.0, 0.02, 0.05, 0.1, 0.2):
            b = fdiv_mean_bound(qv, n, 0.1, eps, name)
            assert b.raw_value >= prev - 1e-10
            prev = b.raw_value


def test_mean_bound_slack_formula():
    rng = np.random.default_rng(np.random.SeedSequence(634))
    qv = rng.uniform(0.0, 0.5, 30)
    n = rng.integers(20, 200, 30)
    K, delta = 30, 0.05
    b = fdiv_mean_bound(qv, n, delta, 0.1, "chi-square")
    spec = make_divergence("chi-square", 0.1, delta)
    meta = spec.cap * np.sqrt(np.log((K + 3) / delta) / (2 * K))
    per_client = float(np.mean(np.sqrt(np.log((K + 3) / delta) / (2 * n))))
    assert abs(b.slack["meta"] - meta) < 1e-12
    assert abs(b.slack["per_client"] - per_client) < 1e-12
    assert abs(b.raw_value - (b.extra["program_value"] + meta + per_client)) < 1e-12
    assert b.value == min(b.raw_value, 1.0)


def test_mean_bound_dominates_plain_bound():
    rng = np.random.default_rng(np.random.SeedSequence(635))
    qv = rng.uniform(0.0, 0.4, 25)
    n = np.full(25, 80)
    plain = mean_bound(qv, n, 0.1)
    for eps in (0.01, 0.1):
        rob = fdiv_mean_bound(qv, n, 0.1, eps, "kl")
        assert rob.raw_value >= plain.raw_value - 1e-10


# -------------------------------------------------------------- cdf bound

def test_cdf_zero_shift_matches_plain_survival():
    rng = np.random.default_rng(np.random.SeedSequence(71))
    qv = rng.uniform(0.0, 1.0, 20)
    n = np.full(20, 60)
    grid = np.linspace(0.0, 1.0, 21)
    rob = fdiv_cdf_bound(qv, n, 0.1, 0.0, "kl", grid, include_slack=False)
    plain = cdf_bound(qv, n, 0.1, grid, include_slack=False)
    for lam in grid:
        assert abs(rob.at(lam) - plain.at(lam)) < 1e-12
        assert abs(rob.at(lam) - float(np.mean(qv >= lam))) < 1e-12


def test_cdf_bound_shape_and_extremes():
    rng = np.random.default_rng(np.random.SeedSequence(72))
    qv = rng.uniform(0.2, 0.6, 30)
    n = np.full(30, 100)
    grid = np.linspace(0.0, 1.0, 41)
    curve = fdiv_cdf_bound(qv, n, 0.1, 0.05, "chi-square", grid)
    assert np.all(np.diff(curve.bounds) <= 1e-12)
    assert np.all(curve.bounds <= 1.0) and np.all(curve.bounds >= 0.0)
    assert np.all(curve.raw >= 0.0)
    pad = curve.params["pad"]
    assert curve.at(2.0) == pytest.approx(min(pad, 1.0), abs=1e-12)
    # below the grid the curve makes no claim beyond the trivial one
    assert curve.at(-0.5) == 1.0


def test_cdf_pad_formula():
    qv = np.linspace(0.1, 0.7, 25)
    n = np.full(25, 90)
    K, delta, gap = 25, 0.1, 1.7
    curve = fdiv_cdf_bound(qv, n, delta, 0.05, "kl", [0.3, 0.5],
                           gap_constant=gap)
    want = (gap * np.sqrt(np.log(K / delta) / K)
            + np.sqrt(np.log(2 * (K + 2) / delta) / (2 * K)))
    assert abs(curve.params["pad"] - want) < 1e-12
    assert np.allclose(curve.bounds, np.minimum(curve.raw + want, 1.0))


def test_cdf_bound_dominates_empirical_survival():
    rng = np.random.default_rng(np.random.SeedSequence(73))
    qv = rng.uniform(0.0, 1.0, 40)
    n = np.full(40, 70)
    grid = np.linspace(0.0, 1.0, 31)
    curve = fdiv_cdf_bound(qv, n, 0.1, 0.08, "chi-square", grid,
                           include_slack=False)
    for lam in grid:
        assert curve.at(lam) >= float(np.mean(qv >= lam)) - 1e-12


def test_binary_block_values():
    spec = make_divergence("chi-square", 0.15, 0.1)
    assert _binary_block_value(0, 3, spec, 0.5, 0.0) == 0.0
    assert abs(_binary_block_value(1, 3, spec, 0.5, 0.0) - 2.0 / 3.0) < 1e-8
    # m=2: alpha = (3/2, 3/2, 0), mean f = (2/4 + 1)/3 = 1/2 exactly
    assert abs(_binary_block_value(2, 3, spec, 0.5, 0.0) - 1.0) < 1e-8
    # all-ones block: the band is the only constraint that bites
    spec2 = make_divergence("chi-square", 0.2, 0.1)
    assert abs(_binary_block_value(3, 3, spec2, 0.5, 0.25) - 1.25) < 1e-8
    assert abs(_binary_block_value(3, 3, spec2, 0.5, 0.0) - 1.0) < 1e-8
