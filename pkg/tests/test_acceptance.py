"""Acceptance criteria 1-16. Each test prints one PASS/FAIL line, repeated in the terminal summary."""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, equator, hyperbolic_line
from subrift import fluctuation as fl
from subrift import montecarlo as mc
from subrift.cli import run
from subrift.fluctuation import covariance
from subrift.hamflow import jacobi_integral_identity
from subrift.models import (
    diffusivity,
    euclidean,
    heisenberg,
    hyperbolic2,
    sphere2,
    sreX,
    sreY,
    structure_equivalence_probe,
)
from subrift.secondvar import first_variation, heat_constant, kernel_basis, q_spectrum, second_variation
from subrift.shooting import classify, solve_geodesic

pytestmark = pytest.mark.acceptance


def report(k: int, title: str, ok: bool, detail: str, t0: float) -> None:
    line = f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{time.perf_counter() - t0:.1f}s]"
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def test_criterion_01_euclidean_covariance(euc2_sol):
    t0 = time.perf_counter()
    grid = np.linspace(0, 1, 11)
    err = max(
        np.abs(covariance(euc2_sol, s, t) - min(s, t) * (1 - max(s, t)) * np.eye(2)).max() for s in grid for t in grid
    )
    report(1, "euclidean covariance s(1-t)I", err <= 1e-10, f"max error {err:.2e}", t0)


def test_criterion_02_symplectic_symmetry(euc2_sol, sphere_L1, hyper_L1, heis_straight):
    t0 = time.perf_counter()
    worst = 0.0
    for sol in (euc2_sol, sphere_L1, hyper_L1, heis_straight):
        J1, K0 = sol.jacobi.J[-1], sol.jacobi.K[0]
        assert sol.path.N == 1000
        worst = max(worst, np.linalg.norm(J1 - K0.T) / np.linalg.norm(J1))
    report(2, "J_1 = K_0^T", worst <= 1e-7, f"max relative gap {worst:.2e}", t0)


def test_criterion_03_integral_identity(sphere_off, hyper_L1):
    t0 = time.perf_counter()
    worst = 0.0
    for sol in (sphere_off, hyper_L1):
        for t in (0.25, 0.5, 0.75):
            i = int(round(t * sol.path.N))
            rhs = jacobi_integral_identity(sol.model, sol.path, sol.jacobi, i)
            worst = max(worst, np.abs(rhs - sol.jacobi.J[i]).max())
    report(3, "J_t = K_t int K^-1 a K^-T K_0^T", worst <= 1e-6, f"max error {worst:.2e}", t0)


def test_criterion_04_conjugate_time():
    t0 = time.perf_counter()
    rep = classify(sphere2(), equator(3.5))
    err = abs(rep.first_conjugate_time - math.pi / 3.5)
    report(4, "first conjugate time pi/L", err <= 1e-4 and not rep.outside_cut_locus, f"error {err:.2e}", t0)


def test_criterion_05_riccati(euc2_sol, sphere_L2):
    t0 = time.perf_counter()
    rd = fl.riccati_solve(euclidean(2), euc2_sol)
    ts = np.round(np.arange(1, 10) / 10, 10)
    idx = np.rint(ts * (len(rd.t) - 1)).astype(int)
    e_err = max(np.abs(rd.A[i] + np.eye(2) / (1 - t)).max() for i, t in zip(idx, ts))
    L = 2.0
    rs = fl.riccati_solve(sphere2(), sphere_L2)
    ne = fl.normal_entry(sphere2(), sphere_L2, rs.A)
    s_err = max(abs(ne[i] + L / math.tan(L * (1 - t))) for i, t in zip(idx, ts))
    ok = e_err <= 1e-8 and s_err <= 1e-4
    report(5, "Riccati A_t", ok, f"euclidean {e_err:.2e}, sphere normal entry {s_err:.2e}", t0)


def test_criterion_06_spectrum(euc2_sol, heis_straight):
    t0 = time.perf_counter()
    e = q_spectrum(euclidean(2), euc2_sol, 16).mu
    e_dev = float(np.abs(e - 1).max())
    m_near = q_spectrum(sphere2(), equator(math.pi - 0.05), 32).mu_min
    m_far = q_spectrum(sphere2(), equator(2.0), 32).mu_min
    h16 = q_spectrum(heisenberg(), heis_straight, 16).mu_min
    h32 = q_spectrum(heisenberg(), heis_straight, 32).mu_min
    ok = e_dev <= 1e-9 and m_near < 0.05 and m_far > 0.3 and h32 > 0.1 and abs(h16 - h32) <= 0.02 * h32
    detail = (
        f"euclidean |mu-1| {e_dev:.1e}; sphere mu_min(pi-0.05)={m_near:.4f}, mu_min(2)={m_far:.3f}; "
        f"heisenberg mu_min {h16:.4f} -> {h32:.4f}"
    )
    report(6, "second-variation spectrum", ok, detail, t0)


def test_criterion_07_first_variation(heis_curved):
    t0 = time.perf_counter()
    sv = second_variation(heisenberg(), heis_curved, 16)
    qs = kernel_basis(heisenberg(), heis_curved, 16, sv)
    rng = np.random.default_rng(7)
    hnorm = math.sqrt(heis_curved.energy)
    worst = 0.0
    for _ in range(20):
        c = qs.kernel_basis @ rng.standard_normal(qs.dim)
        k = sv.control(c)
        worst = max(worst, abs(first_variation(heisenberg(), heis_curved, k, sv)) / (hnorm * math.sqrt(k.norm2)))
    report(7, "first variation vanishes on the kernel", worst <= 1e-8, f"max |L(k)|/(|h||k|) {worst:.2e}", t0)


def test_criterion_08_reproducing(heis_curved, sphere_off):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(8)
    for sol in (heis_curved, sphere_off):
        sv = second_variation(sol.model, sol, 16)
        qs = kernel_basis(sol.model, sol, 16, sv)
        for _ in range(10):
            c = qs.kernel_basis @ rng.standard_normal(qs.dim)
            beta = rng.standard_normal(sol.model.d)
            s = rng.integers(1, 16) / 16
            Q, pair = fl.reproducing_pairing(sv, beta, s, c)
            vnorm = math.sqrt(sv.control(c).norm2)
            worst = max(worst, abs(Q - pair) / (np.linalg.norm(beta) * vnorm))
    report(8, "reproducing property", worst <= 1e-3, f"max relative defect {worst:.2e}", t0)


def test_criterion_09_heat_constant(euc2_sol, heis_curved):
    t0 = time.perf_counter()
    c_e = heat_constant(euclidean(2), euc2_sol, 8).c
    e_err = abs(c_e - 1 / (2 * math.pi))
    # t^{d/2} e^{d^2/2t} p(t) for the exact Gaussian kernel (2 pi t)^{-1} e^{-d^2/2t}
    d2 = euc2_sol.distance**2
    ratios = [t * math.exp(d2 / (2 * t)) * math.exp(-d2 / (2 * t)) / (2 * math.pi * t) for t in (1.0, 0.1, 0.01)]
    g_err = max(abs(r - c_e) for r in ratios)
    h32 = heat_constant(heisenberg(), heis_curved, 32).c
    h64 = heat_constant(heisenberg(), heis_curved, 64).c
    rel = abs(h64 - h32) / abs(h64)
    ok = e_err <= 1e-6 and g_err <= 1e-6 and rel <= 0.01
    report(9, "heat constant", ok, f"euclidean error {e_err:.1e}, Gaussian identity {g_err:.1e}, heisenberg N32->64 {rel:.2e}", t0)


def test_criterion_10_clt_exact(euc2_sol):
    t0 = time.perf_counter()
    cfg = mc.SdeConfig(0.1, N=200, n=20000, seed=10, grid=4)
    ens = mc.bridge_ensemble(euclidean(2), euc2_sol, cfg)
    worst = 0.0
    for est in mc.empirical_covariance(ens, [(0.25, 0.75), (0.5, 0.5)]):
        z = np.abs(est.estimate - covariance(euc2_sol, est.s, est.t)) / est.se
        worst = max(worst, float(z.max()))
    report(10, "CLT, exact Euclidean bridge", ens.exact and worst <= 3, f"max deviation {worst:.2f} SE", t0)


@pytest.fixture(scope="module")
def heis_bridges(heis_straight):
    """Heisenberg bridge proposals at eps and eps/2, window rho = 1 so smaller windows reuse them."""
    out = {}
    for eps, n in ((0.05, 200000), (0.025, 400000)):
        cfg = mc.SdeConfig(eps, N=200, n=n, seed=11, rho=1.0, grid=8)
        out[eps] = mc.bridge_ensemble(heisenberg(), heis_straight, cfg)
    return out


def test_criterion_11_clt_subriemannian(heis_straight, heis_bridges):
    t0 = time.perf_counter()
    ens = heis_bridges[0.05]
    target = covariance(heis_straight, 0.5, 0.5)
    est = mc.empirical_covariance(ens.restrict(0.5), [(0.5, 0.5)])[0]
    band = mc.acceptance_band(heis_straight, 0.5, 0.5, 0.5)
    excess = (np.abs(est.estimate - target) - band) / est.se
    sweep = mc.rho_sweep(ens, target, 0.5, 0.5, (1.0, 0.5, 0.25))
    disc = [r.discrepancy for r in sweep]
    sweep_ok = all(b <= a + 2 * math.hypot(r.se, q.se) for (a, r), (b, q) in zip(zip(disc, sweep), zip(disc[1:], sweep[1:])))
    worst = np.unravel_index(np.argmax(excess), excess.shape)
    ok = ens.proposals >= 200000 and float(excess.max()) <= 5 and sweep_ok
    detail = (
        f"{ens.proposals} proposals, {est.n} accepted; max (|dev|-band)/SE {excess.max():.2f} at entry {tuple(int(i) for i in worst)} "
        f"(limit 5); rho sweep {', '.join(f'{d:.3f}' for d in disc)}"
    )
    report(11, "CLT, heisenberg bridges", ok, detail, t0)


def test_criterion_11_diagnostic_eps_extrapolation(heis_straight, heis_bridges):
    """Not a criterion: the eps-linear bias cancels in 2 C(eps/2) - C(eps)."""
    target = covariance(heis_straight, 0.5, 0.5)
    a = mc.empirical_covariance(heis_bridges[0.05].restrict(0.5), [(0.5, 0.5)])[0]
    b = mc.empirical_covariance(heis_bridges[0.025].restrict(0.5), [(0.5, 0.5)])[0]
    band = mc.acceptance_band(heis_straight, 0.5, 0.5, 0.5)
    rich = 2 * b.estimate - a.estimate
    se = np.sqrt(4 * b.se**2 + a.se**2)
    excess = (np.abs(rich - target) - band) / se
    print(f"criterion 11 diagnostic: eps-extrapolated max (|dev|-band)/SE {excess.max():.2f}")
    assert excess.max() <= 5


def test_criterion_12_representations(sphere_L2):
    t0 = time.perf_counter()
    n = 20000
    ker = fl.assemble_kernel(sphere_L2, 63)
    i = int(np.argmin(np.abs(ker.times - 0.5)))
    v = fl.sample_bridge_fluctuations(ker, n, seed=12)
    chol = fl.sample_covariance(v[:, i], v[:, i])
    rd = fl.riccati_solve(sphere2(), sphere_L2)
    w = fl.sde_sample(rd, n, [0.5], seed=12)
    sde = fl.sample_covariance(w[:, 0], w[:, 0])
    rep = fl.importance_weight_check(rd, n, seed=12)
    ests = {"cholesky": chol, "sde": sde, "weighted": (rep.estimate, rep.se)}
    worst = 0.0
    names = list(ests)
    for p in range(3):
        for q in range(p + 1, 3):
            (a, sa), (b, sb) = ests[names[p]], ests[names[q]]
            worst = max(worst, float((np.abs(a - b) / np.sqrt(sa**2 + sb**2)).max()))
    report(12, "Cholesky / Riccati SDE / weighted flat bridge", worst <= 5, f"max pairwise gap {worst:.2f} SE, ESS {rep.ess:.0f}", t0)


def test_criterion_13_varadhan(euc2_sol, heis_straight):
    t0 = time.perf_counter()
    eps_list = (0.2, 0.1, 0.05, 0.02)
    rows = mc.varadhan_estimate(euclidean(2), None, None, eps_list, mc.SdeConfig(0.2, N=100, n=20000, seed=13, grid=1), sol=euc2_sol)
    e_err = max(abs(r.value - mc.euclidean_log_density(2, euc2_sol.distance, r.eps)) for r in rows)
    hrows = mc.varadhan_estimate(heisenberg(), None, None, eps_list, mc.SdeConfig(0.2, N=200, n=20000, seed=13, grid=1), sol=heis_straight)
    gaps = [abs(r.value - r.target) for r in hrows]
    ok = e_err <= 0.05 and gaps[-1] <= 0.15 and gaps[-1] < gaps[0]
    detail = f"euclidean max error {e_err:.4f}; heisenberg eps log p = " + ", ".join(f"{r.value:.3f}" for r in hrows)
    report(13, "Varadhan asymptotics", ok, detail, t0)


def test_criterion_14_concentration(euc2_sol, heis_straight):
    t0 = time.perf_counter()
    out = []
    for model, sol in ((euclidean(2), euc2_sol), (heisenberg(), heis_straight)):
        ens = [mc.bridge_ensemble(model, sol, mc.SdeConfig(e, N=200, n=20000, seed=14, rho=0.5, grid=40)) for e in (0.2, 0.1, 0.05)]
        out.append(mc.concentration_stat(ens, 0.5))
    ok = all(r.monotone for r in out)
    detail = "; ".join(f"{m} tails " + ", ".join(f"{row.tail:.4f}" for row in r.rows) for m, r in zip(("euclidean", "heisenberg"), out))
    report(14, "concentration", ok, detail, t0)


def test_criterion_15_frame_independence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(15)
    pts = rng.uniform(-1, 1, (20, 2))
    gap_a = float(np.abs(diffusivity(sreX(), pts) - diffusivity(sreY(), pts)).max())
    probe = structure_equivalence_probe(sreX(), sreY(), pts[:5], N=1000)
    x, y = np.array([-0.5, 0.5]), np.array([0.5, 0.6])
    cx = heat_constant(sreX(), solve_geodesic(sreX(), x, y), 16).c
    cy = heat_constant(sreY(), solve_geodesic(sreY(), x, y), 16).c
    gap_c = abs(cx - cy) / abs(cx)
    ok = gap_a <= 1e-12 and probe.max_flow_gap <= 1e-8 and gap_c <= 0.01
    report(15, "sreX vs sreY", ok, f"diffusivity {gap_a:.1e}, flow {probe.max_flow_gap:.1e}, heat constant {gap_c:.1e}", t0)


CLI_RUNS = [
    ["geodesic", "--model", "heisenberg", "--x", "0,0,0", "--y", "1,0.3,0.1", "--starts", "8"],
    ["conjugate", "--model", "heisenberg", "--x", "0,0,0", "--p0", "1,0.2,1.5", "--intervals", "8"],
    ["qspec", "--model", "heisenberg", "--x", "0,0,0", "--p0", "1,0.2,1.5", "--intervals", "8"],
    ["heat-const", "--model", "heisenberg", "--x", "0,0,0", "--p0", "1,0.2,1.5", "--intervals", "8"],
    ["fluctuate", "--model", "sphere2", "--x", "1,0", "--p0", "0,2", "--n", "200", "--grid", "15"],
    ["verify-clt", "--model", "heisenberg", "--x", "0,0,0", "--p0", "1,0,0", "--n", "4000", "--eps", "0.1"],
    ["varadhan", "--model", "heisenberg", "--x", "0,0,0", "--p0", "1,0,0", "--n", "2000", "--eps", "0.2,0.1"],
]


def test_criterion_16_determinism(tmp_path):
    t0 = time.perf_counter()
    bad = []
    for args in CLI_RUNS:
        out = tmp_path / args[0]
        snaps = []
        for _ in range(2):
            code = run([*args, "--seed", "16", "--out", str(out)])
            snaps.append((code, {p.name: p.read_bytes() for p in sorted(out.iterdir())}))
        if snaps[0][0] != 0 or snaps[0] != snaps[1]:
            bad.append(args[0])
    report(16, "byte-identical reruns", not bad, f"{len(CLI_RUNS)} subcommands, mismatched: {bad or 'none'}", t0)
