import numpy as np
import pytest

from conftest import equator
from subrift.errors import InconclusiveError, NotRiemannianError, SingularJ1Error
from subrift.fluctuation import (
    assemble_kernel,
    covariance,
    importance_weight_check,
    interior_grid,
    normal_entry,
    reproducing_field,
    reproducing_pairing,
    riccati_solve,
    sample_bridge_fluctuations,
    sample_covariance,
    sde_sample,
)
from subrift.models import euclidean, heisenberg, sphere2
from subrift.secondvar import kernel_basis, second_variation


def sphere_oracle(L, s, t):
    """Equator of the unit sphere: tangential s(1-t), normal sin(Ls) sin(L(1-t)) / (L sin L)."""
    if s > t:
        return sphere_oracle(L, t, s).T
    tan = lambda r: np.array([-np.sin(L * r), np.cos(L * r)])
    nor = lambda r: np.array([np.cos(L * r), np.sin(L * r)])
    cn = np.sin(L * s) * np.sin(L * (1 - t)) / (L * np.sin(L))
    return s * (1 - t) * np.outer(tan(s), tan(t)) + cn * np.outer(nor(s), nor(t))


def test_euclidean_covariance_is_brownian_bridge(euc2_sol):
    for s in (0.1, 0.5, 0.8):
        for t in (0.2, 0.5, 0.9):
            assert np.allclose(covariance(euc2_sol, s, t), min(s, t) * (1 - max(s, t)) * np.eye(2), atol=1e-10)


@pytest.mark.parametrize("s,t", [(0.25, 0.75), (0.5, 0.5), (0.8, 0.3)])
def test_sphere_covariance_closed_form(sphere_L2, s, t):
    assert np.allclose(covariance(sphere_L2, s, t), sphere_oracle(2.0, s, t), atol=1e-8)


def test_covariance_symmetry_and_endpoints(heis_curved):
    C = covariance(heis_curved, 0.3, 0.6)
    assert np.allclose(C, covariance(heis_curved, 0.6, 0.3).T)
    assert np.allclose(covariance(heis_curved, 0.0, 0.5), 0.0)
    assert np.allclose(covariance(heis_curved, 0.5, 1.0), 0.0, atol=1e-12)
    with pytest.raises(ValueError):
        covariance(heis_curved, -0.1, 0.5)


def test_singular_j1_at_conjugate_point():
    with pytest.raises(SingularJ1Error):
        covariance(equator(np.pi), 0.5, 0.5)


def test_kernel_positive_and_sampler_matches(heis_curved):
    ker = assemble_kernel(heis_curved, G=15)
    assert ker.min_eig > 0 and ker.jitter == 0.0
    assert np.allclose(ker.times, interior_grid(15))
    assert np.allclose(ker.matrix, ker.matrix.T)
    assert np.allclose(ker.block(0.25, 0.75), covariance(heis_curved, 0.25, 0.75))
    v = sample_bridge_fluctuations(ker, 20000, seed=1)
    i = int(np.argmin(np.abs(ker.times - 0.5)))
    est, se = sample_covariance(v[:, i], v[:, i])
    assert np.all(np.abs(est - ker.blocks[i, i]) <= 5 * se + 1e-12)


def test_sampler_is_thread_invariant(euc2_sol):
    ker = assemble_kernel(euc2_sol, G=7)
    assert np.array_equal(
        sample_bridge_fluctuations(ker, 9000, seed=3, threads=1),
        sample_bridge_fluctuations(ker, 9000, seed=3, threads=3),
    )


def test_reproducing_field_is_column_of_covariance(heis_curved):
    beta = np.array([0.2, -1.0, 0.5])
    v = reproducing_field(heis_curved, beta, 0.4, [0.1, 0.4, 0.9])
    assert np.allclose(v[1], covariance(heis_curved, 0.4, 0.4) @ beta)


@pytest.mark.parametrize("which", ["heis", "sphere"])
def test_reproducing_property(which, heis_curved, sphere_off):
    sol = heis_curved if which == "heis" else sphere_off
    N = 16
    sv = second_variation(sol.model, sol, N)
    qs = kernel_basis(sol.model, sol, N, sv)
    rng = np.random.default_rng(11)
    for _ in range(3):
        c = qs.kernel_basis @ rng.standard_normal(qs.dim)
        beta = rng.standard_normal(sol.model.d)
        Q, pair = reproducing_pairing(sv, beta, 0.5, c)
        vnorm = np.abs(sv.field(c)).max()
        assert abs(Q - pair) <= 1e-3 * np.linalg.norm(beta) * vnorm


def test_riccati_euclidean(euc2_sol):
    rd = riccati_solve(euclidean(2), euc2_sol)
    for t in (0.1, 0.5, 0.9):
        i = int(round(t * (len(rd.t) - 1)))
        assert np.allclose(rd.A[i], -np.eye(2) / (1 - t), atol=1e-8)
    assert np.allclose(rd.R, 0.0)


@pytest.mark.parametrize("L", [1.0, 2.0])
def test_riccati_sphere_normal_entry(L):
    sol = equator(L)
    rd = riccati_solve(sphere2(), sol)
    ne = normal_entry(sphere2(), sol, rd.A)
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        i = int(round(t * (len(rd.t) - 1)))
        assert abs(ne[i] + L / np.tan(L * (1 - t))) <= 1e-4
    assert rd.residual < 1e-6


def test_parallel_frame_is_orthonormal(sphere_off):
    from subrift.geometry import metric

    rd = riccati_solve(sphere2(), sphere_off)
    g = metric(sphere2(), sphere_off.path.x)
    gram = np.einsum("tia,tij,tjb->tab", rd.E, g, rd.E)
    assert np.allclose(gram, np.eye(2), atol=1e-8)
    # A is g-self-adjoint away from the pinned end
    gA = (g @ rd.A)[:-1]
    assert np.allclose(gA, np.swapaxes(gA, 1, 2), atol=1e-6 * np.abs(gA).max())


def test_riccati_requires_riemannian(heis_straight):
    with pytest.raises(NotRiemannianError):
        riccati_solve(heisenberg(), heis_straight)


def test_sde_and_weights_agree_with_cholesky(sphere_L2):
    rd = riccati_solve(sphere2(), sphere_L2)
    target = covariance(sphere_L2, 0.5, 0.5)
    v = sde_sample(rd, 20000, [0.5, 1.0], seed=2)
    assert np.allclose(v[:, 1], 0.0)
    est, se = sample_covariance(v[:, 0], v[:, 0])
    # Euler bias is O(1/N) with N = 1000 nodes
    assert np.all(np.abs(est - target) <= 5 * se + 5e-3)
    rep = importance_weight_check(rd, 20000, seed=2)
    assert rep.ess > 1000
    assert np.all(np.abs(rep.estimate - target) <= 5 * rep.se + 5e-3)
    # the unweighted bridge is the flat answer 1/4 in the parallel frame
    assert abs(np.trace(rep.flat_estimate) - 0.5) < 0.02


def test_sde_without_noise_stays_at_zero(sphere_L1):
    rd = riccati_solve(sphere2(), sphere_L1)
    assert np.allclose(sde_sample(rd, 10, [0.5], noise=False), 0.0)


def test_importance_weights_inconclusive_when_degenerate(sphere_L2):
    rd = riccati_solve(sphere2(), sphere_L2)
    with pytest.raises(InconclusiveError):
        importance_weight_check(rd, 50)
