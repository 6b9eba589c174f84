import math

import numpy as np
import pytest

from subrift.errors import FlowEscapeError, InconclusiveError, ZeroAcceptanceError
from subrift.fluctuation import covariance
from subrift.models import euclidean, heisenberg, sphere2
from subrift.montecarlo import (
    BridgeEnsemble,
    SdeConfig,
    acceptance_band,
    ball_volume,
    bridge_ensemble,
    concentration_stat,
    empirical_covariance,
    euclidean_log_density,
    kernel_estimate,
    rho_sweep,
    simulate_sde,
    simulate_tilted,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SdeConfig(0.1, N=50)
    with pytest.raises(ValueError):
        SdeConfig(0.1, N=100, grid=8)
    with pytest.raises(ValueError):
        SdeConfig(0.1, rho=0.0)
    with pytest.raises(ValueError):
        SdeConfig(0.1, scheme="milstein")
    assert np.allclose(SdeConfig(0.1, grid=4).times, [0, 0.25, 0.5, 0.75, 1])


def test_euclidean_sde_marginal():
    cfg = SdeConfig(0.2, N=100, n=20000, grid=4, seed=3)
    res = simulate_sde(euclidean(2), cfg, [1.0, -1.0])
    assert res.dropped == 0
    m = res.endpoints.mean(axis=0)
    cov = np.cov(res.endpoints.T)
    assert np.allclose(m, [1.0, -1.0], atol=5 * math.sqrt(0.2 / 20000))
    assert np.allclose(cov, 0.2 * np.eye(2), atol=0.01)


def test_heisenberg_vertical_symmetry():
    cfg = SdeConfig(0.5, N=100, n=20000, grid=4, seed=4)
    z = simulate_sde(heisenberg(), cfg, np.zeros(3)).endpoints[:, 2]
    assert abs(z.mean()) <= 5 * z.std() / math.sqrt(len(z))
    # Levy area variance: Var(z) = eps^2 / 4 for unit time
    assert abs(z.var() / 0.0625 - 1) < 0.05


def test_simulation_is_deterministic_and_thread_invariant():
    a = SdeConfig(0.1, N=100, n=5000, grid=4, seed=9, threads=1, scheme="heun")
    b = SdeConfig(0.1, N=100, n=5000, grid=4, seed=9, threads=3, scheme="heun")
    pa = simulate_sde(sphere2(), a, [0.2, 0.1]).paths
    assert np.array_equal(pa, simulate_sde(sphere2(), b, [0.2, 0.1]).paths)


def test_tilted_zero_noise_follows_geodesic(heis_curved):
    cfg = SdeConfig(0.0, N=1000, n=2, grid=8)
    res = simulate_tilted(heisenberg(), heis_curved, cfg)
    assert np.allclose(res.endpoints, heis_curved.y, atol=1e-3)


def test_escape_raises():
    cfg = SdeConfig(5.0, N=100, n=200, grid=4)
    with pytest.raises(FlowEscapeError):
        simulate_sde(sphere2(), cfg, [50.0, 0.0])


def test_exact_bridge_matches_brownian_bridge(euc2_sol):
    cfg = SdeConfig(0.1, N=200, n=20000, grid=4, seed=1)
    ens = bridge_ensemble(euclidean(2), euc2_sol, cfg)
    assert ens.exact and ens.acceptance_rate == 1.0 and np.allclose(ens.paths[:, [0, -1]], 0)
    for est in empirical_covariance(ens, [(0.25, 0.75), (0.5, 0.5)]):
        target = covariance(euc2_sol, est.s, est.t)
        assert np.all(np.abs(est.estimate - target) <= 5 * est.se)


def test_tilted_bridges_and_window(heis_straight):
    cfg = SdeConfig(0.05, N=200, n=20000, grid=4, seed=2, rho=1.0)
    ens = bridge_ensemble(heisenberg(), heis_straight, cfg)
    assert not ens.exact and 0 < ens.acceptance_rate < 1
    assert np.all(ens.endpoint_offsets <= 1.0)
    sub = ens.restrict(0.5)
    assert sub.n < ens.n and np.all(sub.endpoint_offsets <= 0.5)
    rows = rho_sweep(ens, covariance(heis_straight, 0.5, 0.5), 0.5, 0.5)
    assert [r.rho for r in rows] == [1.0, 0.5, 0.25]
    assert rows[0].n > rows[1].n > rows[2].n


def test_zero_acceptance(heis_straight):
    with pytest.raises(ZeroAcceptanceError):
        bridge_ensemble(heisenberg(), heis_straight, SdeConfig(0.05, N=100, n=5, grid=4, rho=1e-6))


def test_too_few_samples_inconclusive():
    ens = BridgeEnsemble(np.linspace(0, 1, 3), np.zeros((50, 3, 2)), 1.0, 0.1, 1.0, 50)
    with pytest.raises(InconclusiveError):
        empirical_covariance(ens, [(0.5, 0.5)])


def test_acceptance_band_shrinks_with_rho(heis_straight):
    b1 = acceptance_band(heis_straight, 0.5, 0.5, 1.0, n=50000)
    b2 = acceptance_band(heis_straight, 0.5, 0.5, 0.25, n=50000)
    assert np.all(np.diag(b2) <= np.diag(b1)) and b2.max() < 0.2 * b1.max()


def test_ball_volume():
    assert math.isclose(ball_volume(2, 1.0), math.pi)
    assert math.isclose(ball_volume(3, 2.0), 4 / 3 * math.pi * 8)


def test_euclidean_kernel_estimate(euc2_sol):
    cfg = SdeConfig(0.1, N=100, n=20000, grid=4, seed=5)
    row = kernel_estimate(euclidean(2), euc2_sol, cfg)
    exact = euclidean_log_density(2, euc2_sol.distance, 0.1)
    assert abs(row.value - exact) < 0.01
    assert row.target == pytest.approx(-0.5 * euc2_sol.distance**2)


def test_concentration_needs_three():
    ens = BridgeEnsemble(np.linspace(0, 1, 3), np.zeros((200, 3, 2)), 1.0, 0.1, 1.0, 200)
    with pytest.raises(InconclusiveError):
        concentration_stat([ens, ens])
    rep = concentration_stat([ens, ens, ens])
    assert rep.monotone and all(r.tail == 0 for r in rep.rows)


def test_kernel_estimate_matches_heat_constant(heis_straight):
    from subrift.secondvar import heat_constant

    eps = 0.02
    row = kernel_estimate(heisenberg(), heis_straight, SdeConfig(eps, N=200, n=20000, seed=6, grid=1))
    c = heat_constant(heisenberg(), heis_straight, 16).c
    ratio = math.exp(row.log_p_hat + 1.5 * math.log(eps) + 1 / (2 * eps)) / c
    assert abs(ratio - 1) <= 0.25
