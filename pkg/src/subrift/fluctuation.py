"""Limiting Gaussian law of rescaled bridge fluctuations around a minimal geodesic.

The covariance is C(s, t) = J_s J_1^-1 K_t^T for s <= t and C(t, s) = C(s, t)^T.
Samples are drawn by dense Cholesky on a uniform interior grid. On Riemannian
models the same law is also produced by the covariant SDE
    nabla v = tau db + A v dt,   A = (nabla K) K^-1,
and by reweighting a parallel-transported flat Brownian bridge with
exp(1/2 int <v, R v> dt). Both are written in a parallel orthonormal frame
E_t along the geodesic, where nabla becomes d/dt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import CholeskyError, InconclusiveError, NotRiemannianError, SingularJ1Error
from .geometry import christoffel, curvature_operator, metric
from .hamflow import hermite
from .models import Model
from .shooting import GeodesicSolution

JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


def _j1_inverse(sol: GeodesicSolution) -> np.ndarray:
    J1 = sol.jacobi.J[-1]
    s = np.linalg.svd(J1, compute_uv=False)
    if s[-1] <= 1e-10 * max(s[0], 1e-300):
        raise SingularJ1Error(f"J_1 is singular (sigma_min/sigma_max = {s[-1] / max(s[0], 1e-300):.2e})")
    return np.linalg.inv(J1)


def covariance(sol: GeodesicSolution, s: float, t: float) -> np.ndarray:
    """C(s, t) = J_s J_1^-1 K_t^T (transposed when s > t)."""
    if not (0.0 <= s <= 1.0 and 0.0 <= t <= 1.0):
        raise ValueError("times must lie in [0, 1]")
    if s > t:
        return covariance(sol, t, s).T
    inv = _j1_inverse(sol)
    jac = sol.jacobi
    return jac.J_at(s) @ inv @ jac.K_at(t).T


@dataclass
class FluctuationKernel:
    times: np.ndarray  # interior grid, G points
    blocks: np.ndarray  # (G, G, d, d)
    chol: np.ndarray  # lower factor of the (G d) x (G d) matrix
    jitter: float
    min_eig: float

    @property
    def d(self) -> int:
        return self.blocks.shape[-1]

    @property
    def matrix(self) -> np.ndarray:
        G, d = len(self.times), self.d
        return np.swapaxes(self.blocks, 1, 2).reshape(G * d, G * d)

    def block(self, s: float, t: float) -> np.ndarray:
        i = int(np.argmin(np.abs(self.times - s)))
        j = int(np.argmin(np.abs(self.times - t)))
        return self.blocks[i, j]


def interior_grid(G: int) -> np.ndarray:
    return np.arange(1, G + 1) / (G + 1)


def assemble_kernel(sol: GeodesicSolution, G: int = 63) -> FluctuationKernel:
    """Covariance blocks on t_i = i/(G+1), Cholesky with a diagonal jitter ladder."""
    times = interior_grid(G)
    inv = _j1_inverse(sol)
    jac = sol.jacobi
    Js = np.array([jac.J_at(s) for s in times])
    Ks = np.array([jac.K_at(s) for s in times])
    left = Js @ inv  # J_s J_1^-1
    full = np.einsum("sij,tkj->stik", left, Ks)  # J_s J_1^-1 K_t^T for every pair
    upper = np.triu(np.ones((G, G), dtype=bool))
    blocks = np.where(upper[:, :, None, None], full, np.swapaxes(np.swapaxes(full, 0, 1), 2, 3))
    d = blocks.shape[-1]
    mat = np.swapaxes(blocks, 1, 2).reshape(G * d, G * d)
    mat = 0.5 * (mat + mat.T)
    min_eig = float(np.linalg.eigvalsh(mat)[0])
    scale = max(float(np.max(np.diag(mat))), 1e-300)
    for jit in JITTERS:
        try:
            L = np.linalg.cholesky(mat + jit * scale * np.eye(G * d))
        except np.linalg.LinAlgError:
            continue
        return FluctuationKernel(times, blocks, L, jit, min_eig)
    raise CholeskyError(f"covariance not positive definite after jitter 1e-6 (min eig {min_eig:.3e})")


def sample_bridge_fluctuations(
    kernel: FluctuationKernel,
    n: int,
    seed: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """n Gaussian paths on the kernel grid, shape (n, G, d)."""
    G, d = len(kernel.times), kernel.d

    def draw(gen, _i, size):
        z = gen.standard_normal((size, G * d))
        return z @ kernel.chol.T

    parts = rngmod.map_batches(draw, n, seed, "bridge-cholesky", threads)
    return np.concatenate(parts).reshape(n, G, d)


def reproducing_field(sol: GeodesicSolution, beta, s: float, times) -> np.ndarray:
    """v^{beta,s}_t = C(t, s) beta at the given times, shape (len(times), d)."""
    beta = np.asarray(beta, dtype=float)
    return np.array([covariance(sol, float(t), s) @ beta for t in np.atleast_1d(times)])


def reproducing_pairing(sv, beta, s: float, c) -> tuple[float, float]:
    """(Q(v, v^{beta,s}), <beta, v_s>) for the kernel field v of coefficients c.

    sv is a secondvar.SecondVariation; s must be a control node so the kink of
    v^{beta,s} sits on an interval boundary. The partner control is rebuilt
    from the field as k(lambda, v^{beta,s}).
    """
    beta = np.asarray(beta, dtype=float)
    N = sv.N
    if abs(s * N - round(s * N)) > 1e-12:
        raise ValueError("s must be a multiple of 1/N")
    jac = sv.jacobi
    inv = _j1_inverse(sv.sol)
    ks = round(s * N) * sv.M  # fine index of s
    a = inv @ jac.K[ks].T @ beta  # t <= s: J_t a
    b = inv.T @ jac.J[ks].T @ beta  # t >= s: K_t b
    w = np.empty((N, sv.M + 1, sv.model.d))
    wd = np.empty_like(w)
    for q in range(N):
        rows = sv.idx[q]
        if (q + 1) * sv.M <= ks:
            w[q], wd[q] = jac.J[rows] @ a, jac.Jdot[rows] @ a
        else:
            w[q], wd[q] = jac.K[rows] @ b, jac.Kdot[rows] @ b
    rw = sv.control_from_field(w, wd)
    v = sv.field(c)
    Q = sv.q_general_blocks(v[sv.idx], sv.rates_nodes(c), w, rw)
    return Q, float(beta @ v[ks])


# ------------------------------------------------------------ Riemannian representations


@dataclass
class RiemannianData:
    t: np.ndarray
    E: np.ndarray  # parallel orthonormal frame, columns, (n, d, d)
    A: np.ndarray  # coordinate A_t = (nabla K_t) K_t^-1, last node is -inf and left NaN
    Ahat: np.ndarray  # A in the frame E
    R: np.ndarray  # coordinate curvature operator v -> R(v, xdot) xdot
    Rhat: np.ndarray
    residual: float  # Riccati residual on t <= 0.9
    extras: dict = field(default_factory=dict)

    @property
    def tau(self) -> np.ndarray:
        """Parallel transport from gamma_0 to gamma_t, E_t E_0^-1."""
        return self.E @ np.linalg.inv(self.E[0])


def _sqrtm_spd(a: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(a)
    return (U * np.sqrt(w)) @ U.T


def riccati_solve(model: Model, sol: GeodesicSolution) -> RiemannianData:
    """A_t, R_t and a parallel orthonormal frame along the geodesic of a Riemannian model."""
    if not model.riemannian:
        raise NotRiemannianError(f"{model.name} is not Riemannian (m != d or degenerate a)")
    path, jac = sol.path, sol.jacobi
    t = path.t
    n = len(t)
    dt = t[1] - t[0]
    xdot = np.einsum("tl,tld->td", path.hdot, model.values(path.x))
    gam = christoffel(model, path.x)  # (n, d, d, d)
    Gx = np.einsum("tijk,tj->tik", gam, xdot)  # Gamma(xdot, .)

    # parallel frame E' = -Gamma(xdot) E by RK4; midpoint positions by Hermite interpolation
    a0 = np.einsum("li,lj->ij", *(2 * (model.values(path.x[0]),)))
    E = np.empty((n, model.d, model.d))
    E[0] = _sqrtm_spd(a0)
    mid_x = np.array([hermite(t, path.x, xdot, 0.5 * (t[i] + t[i + 1])) for i in range(n - 1)])
    mid_xd = np.einsum("tl,tld->td", _mid_hdot(model, path, mid_x), model.values(mid_x))
    Gm = np.einsum("tijk,tj->tik", christoffel(model, mid_x), mid_xd)
    for i in range(n - 1):
        k1 = -Gx[i] @ E[i]
        k2 = -Gm[i] @ (E[i] + 0.5 * dt * k1)
        k3 = -Gm[i] @ (E[i] + 0.5 * dt * k2)
        k4 = -Gx[i + 1] @ (E[i] + dt * k3)
        E[i + 1] = E[i] + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    K, Kd = jac.K, jac.Kdot
    A = np.full_like(K, np.nan)
    body = slice(0, n - 1)
    A[body] = (Kd[body] + Gx[body] @ K[body]) @ np.linalg.inv(K[body])
    Einv = np.linalg.inv(E)
    Ahat = Einv @ A @ E
    R = curvature_operator(model, path.x, xdot)
    Rhat = Einv @ R @ E
    Ahat[body] = 0.5 * (Ahat[body] + np.swapaxes(Ahat[body], 1, 2))
    Rhat = 0.5 * (Rhat + np.swapaxes(Rhat, 1, 2))

    # Riccati residual in coordinates, nabla A = A' + [Gamma(xdot), A], five-point A' on t <= 0.9
    stop = int(round(0.9 * (n - 1)))
    i = np.arange(2, stop)
    dA = (-A[i + 2] + 8 * A[i + 1] - 8 * A[i - 1] + A[i - 2]) / (12 * dt)
    res = dA + Gx[i] @ A[i] - A[i] @ Gx[i] + A[i] @ A[i] + R[i]
    scale = 1.0 + np.linalg.norm(A[i], axis=(1, 2)) ** 2
    residual = float(np.max(np.linalg.norm(res, axis=(1, 2)) / scale))
    return RiemannianData(t, E, A, Ahat, R, Rhat, residual)


def _mid_hdot(model: Model, path, mid_x):
    # momentum at midpoints by averaging; hdot = <p, X_l(x)>
    mid_p = 0.5 * (path.p[1:] + path.p[:-1])
    return np.einsum("tld,td->tl", model.values(mid_x), mid_p)


def normal_entry(model: Model, sol: GeodesicSolution, mats: np.ndarray) -> np.ndarray:
    """g(n, M n) along the path for a g-unit normal n of a 2D geodesic and coordinate operators M."""
    path = sol.path
    xdot = np.einsum("tl,tld->td", path.hdot, model.values(path.x))
    g = metric(model, path.x)
    rot = np.array([-xdot[:, 1], xdot[:, 0]]).T
    nvec = rot - np.einsum("ti,tij,tj->t", rot, g, xdot)[:, None] * xdot / np.einsum("ti,tij,tj->t", xdot, g, xdot)[:, None]
    nvec /= np.sqrt(np.einsum("ti,tij,tj->t", nvec, g, nvec))[:, None]
    return np.einsum("ti,tij,tjk,tk->t", nvec, g, mats, nvec)


def _node_index(t: np.ndarray, s: float) -> int:
    i = int(round(s * (len(t) - 1)))
    if abs(t[i] - s) > 1e-12:
        raise ValueError(f"time {s} is not a node of the path grid")
    return i


def sde_sample(
    rdata: RiemannianData,
    n: int,
    times,
    seed: int = 0,
    noise: bool = True,
    threads: int = 1,
) -> np.ndarray:
    """Euler paths of dv = db + A v dt in the parallel frame, mapped back to coordinates.

    Uses the path grid of rdata as the Euler grid; the last value is pinned to 0.
    Returns values at the requested times, shape (n, len(times), d).
    """
    t = rdata.t
    N = len(t) - 1
    dt = t[1] - t[0]
    d = rdata.E.shape[-1]
    cols = [_node_index(t, s) for s in np.atleast_1d(times)]
    Ah = rdata.Ahat

    def run(gen, _i, size):
        v = np.zeros((size, d))
        out = np.zeros((size, len(cols), d))
        want = {c: j for j, c in enumerate(cols)}
        for k in range(N):
            if k in want:
                out[:, want[k]] = v
            db = gen.standard_normal((size, d)) * np.sqrt(dt) if noise else 0.0
            v = v + v @ Ah[k].T * dt + db
        if N in want:
            out[:, want[N]] = 0.0
        return out

    parts = rngmod.map_batches(run, n, seed, "riccati-sde", threads)
    vh = np.concatenate(parts)
    return np.einsum("cij,ncj->nci", rdata.E[cols], vh)


@dataclass
class WeightReport:
    estimate: np.ndarray  # (d, d) covariance at (s, t)
    se: np.ndarray
    ess: float
    max_log_weight: float
    flat_estimate: np.ndarray
    n: int


def flat_bridges(gen, size: int, N: int, d: int) -> np.ndarray:
    """Standard Brownian bridges z_t = b_t - t b_1 on N+1 nodes, shape (size, N+1, d)."""
    inc = gen.standard_normal((size, N, d)) * np.sqrt(1.0 / N)
    b = np.concatenate([np.zeros((size, 1, d)), np.cumsum(inc, axis=1)], axis=1)
    tt = np.linspace(0.0, 1.0, N + 1)
    return b - tt[None, :, None] * b[:, -1:, :]


def importance_weight_check(
    rdata: RiemannianData,
    n: int,
    s: float = 0.5,
    t: float = 0.5,
    seed: int = 0,
    threads: int = 1,
) -> WeightReport:
    """Self-normalized estimate of C(s, t) from flat bridges weighted by exp(1/2 int <v, R v>)."""
    tt = rdata.t
    N = len(tt) - 1
    d = rdata.E.shape[-1]
    i, j = _node_index(tt, s), _node_index(tt, t)
    w_trap = np.full(N + 1, 1.0 / N)
    w_trap[[0, -1]] *= 0.5
    Rh = rdata.Rhat

    def run(gen, _b, size):
        z = flat_bridges(gen, size, N, d)
        quad = np.einsum("n,snd,nde,sne->s", w_trap, z, Rh, z, optimize=True)
        return 0.5 * quad, z[:, i], z[:, j]

    parts = rngmod.map_batches(run, n, seed, "flat-bridge-is", threads)
    logw = np.concatenate([p[0] for p in parts])
    zi = np.concatenate([p[1] for p in parts])
    zj = np.concatenate([p[2] for p in parts])
    lmax = float(logw.max())
    w = np.exp(logw - lmax)
    wn = w / w.sum()
    ess = float(1.0 / np.sum(wn**2))
    if ess < 100:
        raise InconclusiveError(f"effective sample size {ess:.1f} < 100")
    prod = np.einsum("si,sj->sij", zi, zj)
    est_hat = np.einsum("s,sij->ij", wn, prod)
    # delta-method SE of a ratio estimator
    resid = prod - est_hat
    se_hat = np.sqrt(np.einsum("s,sij->ij", wn**2, resid**2))
    Ei, Ej = rdata.E[i], rdata.E[j]
    est = Ei @ est_hat @ Ej.T
    se = np.sqrt((Ei**2) @ se_hat**2 @ (Ej**2).T)
    flat = Ei @ prod.mean(axis=0) @ Ej.T
    return WeightReport(est, se, ess, lmax, flat, n)


def sample_covariance(a: np.ndarray, b: np.ndarray, batches: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """E[a b^T] for zero-mean samples (n, d) with batch-means standard errors."""
    n = a.shape[0]
    prod = np.einsum("si,sj->sij", a, b)
    est = prod.mean(axis=0)
    k = max(2, min(batches, n))
    means = np.array([chunk.mean(axis=0) for chunk in np.array_split(prod, k)])
    se = means.std(axis=0, ddof=1) / np.sqrt(k)
    return est, se
