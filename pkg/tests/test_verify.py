import math

import numpy as np
import pytest

from fpplab.errors import (ConcavityViolationError, InsufficientSampleError,
                           PositivityError)
from fpplab.model import RiskParams, generator_coefficients
from fpplab import affine
from fpplab.sim import (AffineOptimalStrategy, PerturbedStrategy,
                        SimulationConfig, ZeroStrategy, simulate)
from fpplab.spectral import (EigenfunctionSelection, ExpMixEigenfunction,
                             SpectralMeasure, WidderFunction)
from fpplab.verify import (affine_u_value_grad, distortion_roundtrip,
                           hjb_residual, martingale_test,
                           optimal_portfolio_residual)


def _affine_setup(fixture):
    market, spec, rp = fixture
    sol = affine.solve_riccati_closed_form(spec, rp, 1.0, affine.FORWARD)
    return market, spec, rp, sol


# ---------------------------------------------------------------------------
# HJB residual
# ---------------------------------------------------------------------------

def test_hjb_residual_small_for_affine_value_function(canonical_1f):
    market, spec, rp, sol = _affine_setup(canonical_1f)

    def V(t, x, y):
        return affine.evaluate_fpp(sol, rp, t, x, y)

    report = hjb_residual(V, market, rp, np.linspace(0.1, 0.9, 4),
                          [0.7, 1.0, 1.4], np.linspace(0.4, 1.6, 4).reshape(-1, 1),
                          fd_step=1e-3)
    assert report.max_abs_residual <= 1e-4


def test_hjb_residual_convergence_order(canonical_1f):
    market, spec, rp, sol = _affine_setup(canonical_1f)

    def V(t, x, y):
        return affine.evaluate_fpp(sol, rp, t, x, y)

    coarse = hjb_residual(V, market, rp, [0.3, 0.6], [1.0], [[0.8], [1.2]],
                          fd_step=1e-2)
    fine = hjb_residual(V, market, rp, [0.3, 0.6], [1.0], [[0.8], [1.2]],
                        fd_step=1e-3)
    slope = math.log10(coarse.max_abs_residual / fine.max_abs_residual)
    assert slope >= 1.8


def test_hjb_log_wealth_negative_control(canonical_1f):
    # V = log x is concave and increasing but solves a different equation:
    # the report must carry a non-trivial residual without raising.
    market, _, rp, _ = _affine_setup(canonical_1f)
    report = hjb_residual(lambda t, x, y: math.log(x), market, rp,
                          [0.5], [1.0], [[1.0]])
    assert report.max_abs_residual > 1e-3


def test_hjb_zero_sharpe_crra_value_is_exact():
    # lambda = 0 and u = 1: every term vanishes identically.
    rp = RiskParams(gamma=2.0, p=0.0)
    market, spec = affine.canonical_affine_market(
        M=[[-0.5]], w=[0.4], L=[0.1], Lambda=[0.0], lambda0=0.0,
        H=[0.0], rp=rp)
    sol = affine.solve_riccati_numeric(spec, rp, 1.0, affine.FORWARD)

    def V(t, x, y):
        return affine.evaluate_fpp(sol, rp, t, x, y)

    report = hjb_residual(V, market, rp, [0.2, 0.8], [0.5, 2.0], [[0.7]])
    assert report.max_abs_residual == 0.0


def test_hjb_rejects_convex_candidate(canonical_1f):
    market, _, rp, _ = _affine_setup(canonical_1f)
    with pytest.raises(ConcavityViolationError):
        hjb_residual(lambda t, x, y: x ** 2, market, rp, [0.5], [1.0], [[1.0]])


# ---------------------------------------------------------------------------
# Distortion round trip
# ---------------------------------------------------------------------------

def test_distortion_residuals_small_for_affine_solution(canonical_2f):
    market, spec, rp, sol = _affine_setup(canonical_2f)
    gen = generator_coefficients(market, rp)

    def u(t, y):
        return affine.evaluate_u_affine(sol, t, y)

    grid = np.stack(np.meshgrid(np.linspace(0.4, 1.6, 4),
                                np.linspace(0.4, 1.6, 3),
                                indexing="ij"), axis=-1).reshape(-1, 2)
    report = distortion_roundtrip(u, rp, gen, np.linspace(0.1, 0.9, 5), grid)
    assert report.nonlinear.max_abs_residual <= 1e-4
    assert report.linear.max_abs_residual <= 1e-4


def test_distortion_residuals_coincide_for_p_zero():
    # p = 0 forces q = 1 and g = u: the two reports are identical numbers.
    rp = RiskParams(gamma=2.0, p=0.0)
    market, spec = affine.canonical_affine_market(
        M=[[-0.5]], w=[0.4], L=[0.2], Lambda=[0.25], lambda0=0.05,
        H=[-0.3], rp=rp)
    sol = affine.solve_riccati_closed_form(spec, rp, 1.0, affine.FORWARD)
    gen = generator_coefficients(market, rp)

    def u(t, y):
        return affine.evaluate_u_affine(sol, t, y)

    report = distortion_roundtrip(u, rp, gen, np.linspace(0.1, 0.9, 4),
                                  np.linspace(0.5, 1.5, 4).reshape(-1, 1))
    assert report.nonlinear.max_abs_residual == report.linear.max_abs_residual


def test_distortion_exact_derivative_path_for_widder_mixture(heat_gen):
    # Exact eigenfunction derivatives drive the linear residual to roundoff
    # and the non-linear one below 1e-6.
    rp = RiskParams(gamma=2.0, p=0.25)
    y0 = np.array([0.0])
    nu = SpectralMeasure([0.3, 0.8], [0.6, 0.7], y0)
    funcs = tuple(ExpMixEigenfunction(0.5, math.sqrt(2 * z), -math.sqrt(2 * z), y0)
                  for z in nu.zetas)
    u = WidderFunction(nu, EigenfunctionSelection(funcs, y0))
    report = distortion_roundtrip(u, rp, heat_gen, np.linspace(0.1, 0.9, 5),
                                  np.linspace(-1.0, 1.0, 7).reshape(-1, 1))
    assert report.linear.fd_step == 0.0
    assert report.linear.max_abs_residual <= 1e-8
    assert report.nonlinear.max_abs_residual <= 1e-6


def test_distortion_rejects_nonpositive_u(heat_gen):
    rp = RiskParams(gamma=2.0, p=0.0)
    with pytest.raises(PositivityError):
        distortion_roundtrip(lambda t, y: -1.0, rp, heat_gen, [0.5], [[0.0]])


# ---------------------------------------------------------------------------
# Martingale diagnostics
# ---------------------------------------------------------------------------

def _martingale_setup(fixture, n_paths=2000, dt=2e-3):
    market, spec, rp = fixture
    sol = affine.solve_riccati_closed_form(spec, rp, 1.0, affine.FORWARD)
    cfg = SimulationConfig(dt=dt, horizon=1.0, n_paths=n_paths, seed=314,
                           record_stride=max(1, int(round(0.02 / dt))))
    feval = affine.fpp_evaluator(sol, rp)
    opt = AffineOptimalStrategy(sol, market, rp)
    return market, rp, cfg, feval, opt


def test_martingale_verdict_for_optimal_strategy(low_noise_1f):
    market, rp, cfg, feval, opt = _martingale_setup(low_noise_1f)
    bundle = simulate(market, cfg, opt, y0=[1.0])
    report = martingale_test(bundle, feval)
    assert report.verdict == "martingale-consistent"
    assert not report.heavy_tails


def test_supermartingale_verdict_for_zero_strategy(low_noise_1f):
    # pi = 0 with non-zero Sharpe ratio is strictly suboptimal: the drift of
    # U_t(X_t) is non-positive, so the verdict downgrades to supermartingale.
    market, rp, cfg, feval, _ = _martingale_setup(low_noise_1f, n_paths=4000)
    bundle = simulate(market, cfg, ZeroStrategy(market.n), y0=[1.0])
    report = martingale_test(bundle, feval)
    assert report.supermartingale_consistent


def test_martingale_verdicts_monotone_in_perturbation(low_noise_1f):
    # Growing the perturbation never upgrades the verdict back to martingale.
    market, rp, cfg, feval, opt = _martingale_setup(low_noise_1f, n_paths=3000)
    downgraded = False
    for delta in (0.1, 0.2, 0.4):
        bundle = simulate(market, cfg, PerturbedStrategy(opt, delta), y0=[1.0])
        report = martingale_test(bundle, feval)
        assert report.supermartingale_consistent
        if downgraded:
            assert not report.martingale_consistent
        downgraded = downgraded or not report.martingale_consistent
    assert downgraded


def test_martingale_requires_enough_paths(low_noise_1f):
    market, rp, cfg, feval, opt = _martingale_setup(low_noise_1f)
    small = SimulationConfig(dt=0.01, horizon=1.0, n_paths=50, seed=1,
                             record_stride=5)
    bundle = simulate(market, small, opt, y0=[1.0])
    with pytest.raises(InsufficientSampleError):
        martingale_test(bundle, feval)


# ---------------------------------------------------------------------------
# Optimal-portfolio identity
# ---------------------------------------------------------------------------

def test_portfolio_residual_zero_for_constructed_portfolio(canonical_1f):
    market, spec, rp, sol = _affine_setup(canonical_1f)
    for t in (0.0, 0.4, 0.9):
        for y in ([0.5], [1.0], [1.7]):
            pi = affine.optimal_portfolio_affine(sol, market, rp, t, y)
            res = optimal_portfolio_residual(market, rp,
                                             affine_u_value_grad(sol), t, y, pi)
            assert res <= 1e-10


def test_portfolio_residual_of_myopic_strategy_is_hedging_norm(canonical_1f):
    market, spec, rp, sol = _affine_setup(canonical_1f)
    t, y = 0.4, np.array([0.9])
    sig = market.sigma(y)
    myopic = np.linalg.solve(sig.T @ sig, market.mu(y)) / rp.gamma
    res = optimal_portfolio_residual(market, rp, affine_u_value_grad(sol),
                                     t, y, myopic)
    expected = (rp.q / rp.gamma) * np.linalg.norm(
        market.rho @ (market.kappa(y) @ sol.Phi(t)))
    assert res == pytest.approx(expected, rel=1e-12)
    assert res > 0


def test_portfolio_residual_p_zero_myopic_is_optimal():
    rp = RiskParams(gamma=2.0, p=0.0)
    market, spec = affine.canonical_affine_market(
        M=[[-0.5]], w=[0.4], L=[0.2], Lambda=[0.25], lambda0=0.05,
        H=[-0.3], rp=rp)
    sol = affine.solve_riccati_closed_form(spec, rp, 1.0, affine.FORWARD)
    y = np.array([0.9])
    sig = market.sigma(y)
    myopic = np.linalg.solve(sig.T @ sig, market.mu(y)) / rp.gamma
    res = optimal_portfolio_residual(market, rp, affine_u_value_grad(sol),
                                     0.4, y, myopic)
    assert res <= 1e-14


def test_optimal_allocation_independent_of_wealth(canonical_1f):
    market, spec, rp, sol = _affine_setup(canonical_1f)
    strat = AffineOptimalStrategy(sol, market, rp)
    Y = np.array([[0.8], [1.1]])
    base = strat.allocations(0.3, Y, np.full(2, 1.0))
    for x in (0.5, 2.0):
        np.testing.assert_array_equal(strat.allocations(0.3, Y, np.full(2, x)),
                                      base)
