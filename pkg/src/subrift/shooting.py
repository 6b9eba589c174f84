"""Geodesic two-point problem by multistart damped Newton shooting, plus cut-locus diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergenceError
from .hamflow import (
    BicharPath,
    JacobiData,
    PhasePoint,
    _integrate,
    flow,
    hamiltonian,
    jacobi_pair,
)
from .models import Model, diffusivity


@dataclass
class ShootingOptions:
    starts: int = 32
    N: int = 1000
    tol_bvp: float = 1e-10
    max_iter: int = 60
    seed: int = 0
    dedupe_tol: float = 1e-4
    coarse_N: int = 100
    max_backtracks: int = 30


@dataclass
class Candidate:
    p0: np.ndarray
    energy: float
    residual: float
    start_index: int


@dataclass
class GeodesicSolution:
    model: Model
    x: np.ndarray
    y: np.ndarray
    lambda0: PhasePoint
    path: BicharPath
    jacobi: JacobiData
    energy: float
    distance: float
    residual: float
    minimal: bool
    multiplicity: int
    n_minimal: int = 1
    energy_gap: float | None = None
    candidates: list = field(default_factory=list)

    @property
    def lambda1(self) -> PhasePoint:
        return self.path.lambda1


@dataclass
class CutLocusReport:
    detJ1: float
    min_singular_J1: float
    first_conjugate_time: float | None
    symmetric_residual: float
    regular: bool
    outside_cut_locus: bool
    min_eig_C1bar: float
    multiplicity: int
    unique_minimal: bool
    energy_gap: float | None
    tol_conj: float

    def to_dict(self) -> dict:
        return {
            "detJ1": self.detJ1,
            "min_singular_J1": self.min_singular_J1,
            "first_conjugate_time": self.first_conjugate_time,
            "symmetric_residual": self.symmetric_residual,
            "regular": self.regular,
            "outside_cut_locus": self.outside_cut_locus,
            "min_eig_C1bar": self.min_eig_C1bar,
            "multiplicity": self.multiplicity,
            "unique_minimal": self.unique_minimal,
            "energy_gap_proxy": self.energy_gap,
            "tol_conj": self.tol_conj,
        }


def shoot(model: Model, x, p0, N: int = 1000):
    """Endpoint of the projected flow and J_1 for a single initial covector."""
    d = model.d
    rec = _integrate(
        model,
        np.asarray(x, dtype=float)[None],
        np.asarray(p0, dtype=float)[None],
        N,
        tangents=(np.zeros((1, d, d)), np.eye(d)[None]),
        record=False,
    )
    xf, _, tx, _, _ = rec["final"]
    return xf[0], tx[0]


def _shoot_batch(model, x, P, N, jac=True):
    B, d = P.shape
    X = np.broadcast_to(x, (B, d))
    tang = (np.zeros((B, d, d)), np.broadcast_to(np.eye(d), (B, d, d))) if jac else None
    rec = _integrate(model, X, P, N, tangents=tang, record=False, mask_escapes=True)
    xf, _, tx, _, _ = rec["final"]
    return xf, tx, rec["failed"]


def _initial_momenta(model, x, y, opts: ShootingOptions) -> np.ndarray:
    d = model.d
    delta = y - x
    target = float(delta @ delta)
    a = diffusivity(model, x)
    line = np.linalg.lstsq(a, delta, rcond=None)[0]
    rng = np.random.default_rng(opts.seed)
    starts = [line]
    for g in rng.standard_normal((opts.starts - 1, d)):
        starts.append(g)
    P = np.array(starts)
    H = 0.5 * np.einsum("bi,bij,bj->b", P, np.broadcast_to(a, (len(P), d, d)), P)
    scale = np.where(H > 1e-300, np.sqrt(target / np.maximum(2 * H, 1e-300)), 1.0)
    # random starts cycle through energy multipliers 1, 4, 16, 64: in sub-Riemannian
    # directions the distance scales like |y - x|^(1/2), so 2H = |y - x|^2 undershoots
    spread = 2.0 ** (np.arange(len(P)) % 4)
    spread[0] = 1.0
    return P * (scale * spread)[:, None]


def _newton(model, x, y, P, N, opts, iters, tol):
    """Batched damped Newton on p0 -> endpoint - y. Returns (P, residual norms, alive).

    Starts that fail to halve their residual over 8 iterations are dropped.
    """
    end, J, failed = _shoot_batch(model, x, P, N)
    alive = ~failed
    res = np.where(alive, np.linalg.norm(end - y, axis=1), np.inf)
    history = [res.copy()]
    for it in range(iters):
        if it >= 8:
            alive &= (res <= tol) | (res < 0.5 * history[-8])
        active = alive & (res > tol)
        if not active.any():
            break
        idx = np.flatnonzero(active)
        step = np.zeros((len(idx), model.d))
        for k, i in enumerate(idx):
            try:
                step[k] = np.linalg.lstsq(J[i], y - end[i], rcond=1e-8)[0]
            except np.linalg.LinAlgError:
                alive[i] = False
        # evaluate the backtracking ladder lam = 2^-k in chunks of 8 per batched call
        newP = P[idx].copy()
        pending = np.ones(len(idx), dtype=bool)
        for k0 in range(0, opts.max_backtracks + 1, 8):
            sub = np.flatnonzero(pending)
            if len(sub) == 0:
                break
            ks = np.arange(k0, min(k0 + 8, opts.max_backtracks + 1))
            lam = 0.5 ** ks
            trial = P[idx[sub]][:, None, :] + lam[None, :, None] * step[sub][:, None, :]
            e2, _, f2 = _shoot_batch(model, x, trial.reshape(-1, model.d), N, jac=False)
            r2 = np.where(f2, np.inf, np.linalg.norm(e2 - y, axis=1)).reshape(len(sub), len(ks))
            ok = (r2 < res[idx[sub]][:, None] * (1 - 1e-4 * lam[None, :]) + 1e-15) | (r2 <= opts.tol_bvp)
            for row, j in enumerate(sub):
                hit = np.flatnonzero(ok[row])
                if len(hit):
                    newP[j] = trial[row, hit[0]]
                    pending[j] = False
        # starts whose line search failed are dropped
        alive[idx[pending]] = False
        P = P.copy()
        P[idx] = newP
        end, J, failed = _shoot_batch(model, x, P, N)
        alive &= ~failed
        res = np.where(alive, np.linalg.norm(end - y, axis=1), np.inf)
        history.append(res.copy())
    return P, res, alive


def solve_geodesic(model: Model, x, y, opts: ShootingOptions | None = None) -> GeodesicSolution:
    opts = opts or ShootingOptions()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = model.d
    if np.array_equal(x, y):
        p0 = np.zeros(d)
        return _finish(model, x, y, p0, 0.0, [Candidate(p0, 0.0, 0.0, 0)], opts)
    P = _initial_momenta(model, x, y, opts)
    coarse = min(opts.coarse_N, opts.N)
    scale = 1.0 + np.linalg.norm(y - x)
    P, res, alive = _newton(model, x, y, P, coarse, opts, opts.max_iter, 1e-8 * scale)
    # polish near-converged candidates at the full resolution
    near = alive & (res < 1e-4 * scale)
    if not near.any():
        raise NoConvergenceError("no shooting start converged", candidates=[])
    Pn = []
    for p in P[near]:
        if not any(np.linalg.norm(p - q) <= opts.dedupe_tol for q in Pn):
            Pn.append(p)
    Pn = np.array(Pn)
    Pn, resn, aliven = _newton(model, x, y, Pn, opts.N, opts, 20, opts.tol_bvp)
    conv = aliven & (resn <= opts.tol_bvp)
    if not conv.any():
        partial = [Candidate(p, 2 * hamiltonian(model, (x, p)), r, int(i)) for i, (p, r) in enumerate(zip(Pn, resn))]
        raise NoConvergenceError("Newton polishing did not reach tol_bvp", candidates=partial)
    start_idx = np.flatnonzero(conv)
    cands = []
    for i, p, r in zip(start_idx, Pn[conv], resn[conv]):
        if any(np.linalg.norm(p - c.p0) <= opts.dedupe_tol for c in cands):
            continue
        cands.append(Candidate(p.copy(), 2 * hamiltonian(model, (x, p)), float(r), int(i)))
    cands.sort(key=lambda c: (c.energy, c.start_index))
    return _finish(model, x, y, cands[0].p0, cands[0].residual, cands, opts)


def _finish(model, x, y, p0, residual, cands, opts) -> GeodesicSolution:
    path = flow(model, (x, p0), 1.0, opts.N)
    jac = jacobi_pair(model, path)
    energy = 2.0 * hamiltonian(model, (x, p0))
    best = cands[0].energy
    n_min = sum(1 for c in cands if c.energy <= best * (1 + 1e-9) + 1e-300)
    gap = None
    if len(cands) > n_min:
        gap = cands[n_min].energy - best
    return GeodesicSolution(
        model=model,
        x=x,
        y=y,
        lambda0=PhasePoint(x.copy(), np.asarray(p0, dtype=float)),
        path=path,
        jacobi=jac,
        energy=energy,
        distance=float(np.sqrt(energy)),
        residual=float(np.linalg.norm(path.x[-1] - y)),
        minimal=energy <= best * (1 + 1e-9) + 1e-300,
        multiplicity=len(cands),
        n_minimal=n_min,
        energy_gap=gap,
        candidates=cands,
    )


def solution_from_covector(model: Model, x, p0, N: int = 1000) -> GeodesicSolution:
    """Wrap a given bicharacteristic (no boundary-value solve) as a solution record.

    Minimality and multiplicity are not examined: minimal is reported True and
    multiplicity 1, so callers must treat those flags as unchecked.
    """
    x = np.asarray(x, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    path = flow(model, (x, p0), 1.0, N)
    jac = jacobi_pair(model, path)
    energy = 2.0 * hamiltonian(model, (x, p0))
    return GeodesicSolution(
        model, x, path.x[-1].copy(), PhasePoint(x.copy(), p0.copy()), path, jac,
        energy, float(np.sqrt(energy)), 0.0, True, 1,
        candidates=[Candidate(p0.copy(), energy, 0.0, 0)],
    )


def distance(model: Model, x, y, opts: ShootingOptions | None = None) -> float:
    return solve_geodesic(model, x, y, opts).distance


# ------------------------------------------------------------ classification


def _relative_smin(J: np.ndarray) -> np.ndarray:
    s = np.linalg.svd(J, compute_uv=False)
    return s[..., -1] / np.maximum(s[..., 0], 1e-300)


def _refine_conjugate(model, sol, i, h, kind):
    """Locate the conjugate time inside [t_i, t_i + h] using fine re-integration from t_i."""
    d = model.d
    path = sol.path
    tx0 = sol.jacobi.J[i][None]
    tp0 = sol.jacobi.Jp[i][None]
    x0 = path.x[i][None]
    p0 = path.p[i][None]

    def f(tau):
        if tau <= 0:
            J = tx0[0]
        else:
            n = max(4, int(np.ceil(tau / h * 16)))
            r = _integrate(model, x0, p0, n, tau, tangents=(tx0, tp0), record=False)
            J = r["final"][2][0]
        if kind == "det":
            return float(np.linalg.det(J))
        return float(_relative_smin(J))

    lo, hi = 0.0, h
    if kind == "det":
        flo = f(lo)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = f(mid)
            if np.sign(fm) == np.sign(flo):
                lo, flo = mid, fm
            else:
                hi = mid
            if hi - lo < 1e-13:
                break
        tstar = 0.5 * (lo + hi)
        return path.t[i] + tstar, f(tstar)
    # golden-section search for a minimum of the relative singular value
    gr = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c1 = b - gr * (b - a)
    c2 = a + gr * (b - a)
    f1, f2 = f(c1), f(c2)
    for _ in range(80):
        if f1 < f2:
            b, c2, f2 = c2, c1, f1
            c1 = b - gr * (b - a)
            f1 = f(c1)
        else:
            a, c1, f1 = c1, c2, f2
            c2 = a + gr * (b - a)
            f2 = f(c2)
        if b - a < 1e-12:
            break
    tstar = 0.5 * (a + b)
    return path.t[i] + tstar, f(tstar)


def first_conjugate_time(model: Model, sol: GeodesicSolution, tol_conj: float = 1e-6) -> float | None:
    """Smallest t in (0, 1] where J_t is singular, or None.

    Candidates are sign changes of det J_t on the grid (simple conjugate points)
    and grid-local minima of sigma_min/sigma_max below 1e-2; each is refined on
    the bracketing step by re-integration and accepted if the refined relative
    singular value is below tol_conj.
    """
    J = sol.jacobi.J
    t = sol.jacobi.t
    N = len(t) - 1
    h = t[1] - t[0]
    rel = _relative_smin(J)
    det = np.linalg.det(J)
    start = 2  # J_t ~ t a(x) near 0: skip the trivial zero at t = 0
    for i in range(start, N + 1):
        if rel[i] <= tol_conj:
            return float(t[i]) if i == start else _refined_or(t, i - 1, model, sol, h, "smin", tol_conj, t[i])
        if i < N and np.sign(det[i]) != np.sign(det[i + 1]) and det[i] != 0:
            tc, _ = _refine_conjugate(model, sol, i, h, "det")
            return float(tc)
        if 0 < i < N and rel[i] < 1e-2 and rel[i] <= rel[i - 1] and rel[i] <= rel[i + 1]:
            for j in (i - 1, i):
                tc, val = _refine_conjugate(model, sol, j, h, "smin")
                if val <= tol_conj and t[j] <= tc <= t[j] + h:
                    return float(tc)
    return None


def _refined_or(t, j, model, sol, h, kind, tol, default):
    tc, val = _refine_conjugate(model, sol, j, h, kind)
    return float(tc) if val <= tol else float(default)


def classify(model: Model, sol: GeodesicSolution, tol_conj: float = 1e-6, tol_reg: float = 1e-10) -> CutLocusReport:
    J1 = sol.jacobi.J[-1]
    s = np.linalg.svd(J1, compute_uv=False)
    scale = max(s[0], 1e-300)
    tconj = first_conjugate_time(model, sol, tol_conj)
    ev = np.linalg.eigvalsh(sol.jacobi.C1bar)
    regular = bool(ev[0] > tol_reg * max(ev[-1], 1e-300))
    unique = sol.minimal and sol.n_minimal == 1
    nonconj = s[-1] > tol_conj * scale and (tconj is None or tconj >= 1.0 - 1e-9)
    if tconj is not None and tconj >= 1.0 - 1e-9 and s[-1] > tol_conj * scale:
        tconj = None
    return CutLocusReport(
        detJ1=float(np.linalg.det(J1)),
        min_singular_J1=float(s[-1]),
        first_conjugate_time=tconj,
        symmetric_residual=sol.jacobi.symmetric_residual,
        regular=regular,
        outside_cut_locus=bool(unique and nonconj),
        min_eig_C1bar=float(ev[0]),
        multiplicity=sol.multiplicity,
        unique_minimal=bool(unique),
        energy_gap=sol.energy_gap,
        tol_conj=tol_conj,
    )
