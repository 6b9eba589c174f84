"""Monte Carlo for the small-noise diffusion: plain and tilted SDE paths, bridges, estimators.

The diffusion with generator eps * L is
    dx = sqrt(eps) sum_l X_l(x) dB^l + eps X~_0(x) dt,
with X~_0 the Ito drift. Tilting by the geodesic control h adds sum_l X_l(x) hdot_l dt,
which centres paths on the geodesic. Bridges are approximated by accepting tilted
paths whose endpoint lands within rho * sqrt(eps) of y (chart norm). Euclidean
models use the exact Brownian bridge instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import FlowEscapeError, InconclusiveError, ZeroAcceptanceError
from .hamflow import flow
from .models import Model, diffusivity, ito_drift
from .shooting import GeodesicSolution, ShootingOptions, solve_geodesic

ESCAPE_BOUND = 1e6
MAX_DROP = 1e-3


@dataclass
class SdeConfig:
    eps: float
    N: int = 200
    n: int = 10000
    seed: int = 0
    rho: float = 0.5
    grid: int = 8
    scheme: str = "euler"  # "euler" or "heun" (predictor-corrector on the drift only)
    threads: int = 1

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError("eps must be nonnegative")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.N < 100:
            raise ValueError("N must be at least 100")
        if self.N % self.grid:
            raise ValueError("grid must divide N")
        if self.scheme not in ("euler", "heun"):
            raise ValueError(f"unknown scheme {self.scheme!r}")

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid + 1)


@dataclass
class SdeResult:
    endpoints: np.ndarray  # (n_kept, d)
    paths: np.ndarray  # (n_kept, grid+1, d)
    times: np.ndarray
    dropped: int
    girsanov: np.ndarray | None = None  # int hdot . dB per kept path, tilted runs only


def _outside(model: Model, x: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(x).all(axis=1) | (np.abs(x).max(axis=1) > ESCAPE_BOUND)
    if model.validity_radius is not None:
        bad |= np.linalg.norm(x, axis=1) >= model.validity_radius
    return bad


def _simulate(model: Model, x0, cfg: SdeConfig, purpose: str, hdot: np.ndarray | None) -> SdeResult:
    x0 = np.asarray(x0, dtype=float)
    d, m, N = model.d, model.m, cfg.N
    dt = 1.0 / N
    sq = math.sqrt(cfg.eps)
    stride = N // cfg.grid

    def drift(x, k):
        b = cfg.eps * ito_drift(model, x) if cfg.eps > 0 else np.zeros_like(x)
        if hdot is not None:
            b = b + np.einsum("l,bld->bd", hdot[k], model.values(x))
        return b

    def run(gen, _i, size):
        x = np.broadcast_to(x0, (size, d)).copy()
        dead = np.zeros(size, dtype=bool)
        rec = np.empty((size, cfg.grid + 1, d))
        rec[:, 0] = x
        gw = np.zeros(size)
        with np.errstate(all="ignore"):
            for k in range(N):
                dB = gen.standard_normal((size, m)) * math.sqrt(dt)
                vals = model.values(x)
                noise = sq * np.einsum("bl,bld->bd", dB, vals)
                b0 = drift(x, k)
                if cfg.scheme == "heun":
                    xp = x + b0 * dt + noise
                    x_new = x + 0.5 * (b0 + drift(xp, k + 1)) * dt + noise
                else:
                    x_new = x + b0 * dt + noise
                if hdot is not None:
                    gw += dB @ hdot[k]
                bad = _outside(model, x_new) & ~dead
                dead |= bad
                x_new[dead] = x[dead]
                x = x_new
                if (k + 1) % stride == 0:
                    rec[:, (k + 1) // stride] = x
        return rec[~dead], gw[~dead], int(dead.sum())

    parts = rngmod.map_batches(run, cfg.n, cfg.seed, purpose, cfg.threads)
    paths = np.concatenate([p[0] for p in parts])
    gw = np.concatenate([p[1] for p in parts])
    dropped = sum(p[2] for p in parts)
    if dropped > MAX_DROP * cfg.n:
        raise FlowEscapeError(
            f"{dropped} of {cfg.n} paths escaped (limit {MAX_DROP:.1%})", count=dropped
        )
    return SdeResult(paths[:, -1].copy(), paths, cfg.times, dropped, gw if hdot is not None else None)


def simulate_sde(model: Model, cfg: SdeConfig, x) -> SdeResult:
    """Euler-Maruyama paths of the untilted diffusion from x."""
    return _simulate(model, x, cfg, "sde", None)


def _control_rates(model: Model, sol: GeodesicSolution, N: int) -> np.ndarray:
    path = flow(model, sol.lambda0, 1.0, N)
    return path.hdot


def simulate_tilted(model: Model, sol: GeodesicSolution, cfg: SdeConfig) -> SdeResult:
    """Paths of d gamma = sum X_l hdot_l dt + sqrt(eps) sum X_l dB + eps X~_0 dt from sol.x."""
    hdot = _control_rates(model, sol, cfg.N)
    return _simulate(model, sol.x, cfg, "tilted", hdot)


def geodesic_on_grid(model: Model, sol: GeodesicSolution, times: np.ndarray) -> np.ndarray:
    N = sol.path.N
    idx = np.rint(times * N).astype(int)
    if np.any(np.abs(idx / N - times) > 1e-12):
        raise ValueError("ensemble grid is not a subgrid of the geodesic grid")
    return sol.path.x[idx]


# ------------------------------------------------------------ bridges


@dataclass
class BridgeEnsemble:
    times: np.ndarray
    paths: np.ndarray  # rescaled fluctuations (n, grid+1, d)
    acceptance_rate: float
    eps: float
    rho: float
    proposals: int
    dropped: int = 0
    exact: bool = False
    endpoint_offsets: np.ndarray | None = None  # rescaled |gamma_1^eps - y| of accepted paths

    @property
    def n(self) -> int:
        return self.paths.shape[0]

    def restrict(self, rho: float) -> "BridgeEnsemble":
        """Sub-ensemble with a smaller acceptance window, reusing the same proposals."""
        if self.exact or rho >= self.rho:
            return self
        keep = self.endpoint_offsets <= rho
        return BridgeEnsemble(
            self.times, self.paths[keep], float(keep.sum()) / self.proposals, self.eps, rho,
            self.proposals, self.dropped, False, self.endpoint_offsets[keep],
        )


def exact_euclidean_bridges(d: int, cfg: SdeConfig) -> BridgeEnsemble:
    """z_t = b_t - t b_1 sampled exactly on the grid; the rescaling makes eps irrelevant."""
    times = cfg.times
    steps = np.diff(times)

    def run(gen, _i, size):
        inc = gen.standard_normal((size, len(steps), d)) * np.sqrt(steps)[None, :, None]
        b = np.concatenate([np.zeros((size, 1, d)), np.cumsum(inc, axis=1)], axis=1)
        return b - times[None, :, None] * b[:, -1:, :]

    paths = np.concatenate(rngmod.map_batches(run, cfg.n, cfg.seed, "exact-bridge", cfg.threads))
    return BridgeEnsemble(times, paths, 1.0, cfg.eps, cfg.rho, cfg.n, 0, True, np.zeros(cfg.n))


def bridge_ensemble(model: Model, sol: GeodesicSolution, cfg: SdeConfig, exact: bool | None = None) -> BridgeEnsemble:
    """Rescaled fluctuations (omega - gamma)/sqrt(eps) of approximate x -> y bridges."""
    if exact is None:
        exact = model.flat and model.name.startswith("euclidean")
    if exact:
        return exact_euclidean_bridges(model.d, cfg)
    if cfg.eps <= 0:
        raise ValueError("bridges need eps > 0")
    res = simulate_tilted(model, sol, cfg)
    gam = geodesic_on_grid(model, sol, cfg.times)
    scaled = (res.paths - gam[None]) / math.sqrt(cfg.eps)
    off = np.linalg.norm(scaled[:, -1], axis=1)
    keep = off <= cfg.rho
    if not keep.any():
        raise ZeroAcceptanceError(f"no path accepted out of {cfg.n} (eps={cfg.eps}, rho={cfg.rho})")
    return BridgeEnsemble(
        cfg.times, scaled[keep], float(keep.sum()) / cfg.n, cfg.eps, cfg.rho, cfg.n,
        res.dropped, False, off[keep],
    )


@dataclass
class CovarianceEstimate:
    s: float
    t: float
    estimate: np.ndarray
    se: np.ndarray
    n: int


def _time_index(times: np.ndarray, s: float) -> int:
    i = int(np.argmin(np.abs(times - s)))
    if abs(times[i] - s) > 1e-12:
        raise ValueError(f"time {s} is not on the ensemble grid")
    return i


def empirical_covariance(ens: BridgeEnsemble, pairs, batches: int = 16) -> list[CovarianceEstimate]:
    """Sample covariance of (v_s, v_t) blocks with batch-means standard errors."""
    n = ens.n
    if n < 100:
        raise InconclusiveError(f"only {n} accepted samples (need 100)")
    out = []
    mean = ens.paths.mean(axis=0)
    for s, t in pairs:
        a = ens.paths[:, _time_index(ens.times, s)] - mean[_time_index(ens.times, s)]
        b = ens.paths[:, _time_index(ens.times, t)] - mean[_time_index(ens.times, t)]
        prod = np.einsum("si,sj->sij", a, b)
        est = prod.sum(axis=0) / (n - 1)
        means = np.array([c.mean(axis=0) for c in np.array_split(prod, batches)])
        se = means.std(axis=0, ddof=1) / math.sqrt(batches)
        out.append(CovarianceEstimate(float(s), float(t), est, se, n))
    return out


def acceptance_band(sol: GeodesicSolution, s: float, t: float, rho: float, n: int = 200000, seed: int = 0) -> np.ndarray:
    """Gaussian-model size of the window bias, |M_s Cov(Y_1 | |Y_1| <= rho) M_t^T| entrywise.

    Y is the linearized tilted fluctuation, Y_t = u_t int_0^t u_r^-1 X dB_r, and
    M_s = Cov(Y_s, Y_1) C1bar^-1. Conditioning on Y_1 = 0 exactly removes the term.
    """
    jac, path = sol.jacobi, sol.path
    u = jac.u
    uinv = np.linalg.inv(u)
    a = diffusivity(sol.model, path.x)
    integrand = uinv @ a @ np.swapaxes(uinv, 1, 2)
    dt = path.t[1] - path.t[0]
    cum = np.concatenate([np.zeros((1,) + integrand.shape[1:]), np.cumsum(0.5 * dt * (integrand[1:] + integrand[:-1]), axis=0)])
    C1bar = jac.C1bar
    inv = np.linalg.inv(C1bar)

    def M(r):
        i = int(round(r * path.N))
        return u[i] @ cum[i] @ u[-1].T @ inv

    gen = rngmod.stream(seed, "acceptance-band")
    y = gen.standard_normal((n, C1bar.shape[0])) @ np.linalg.cholesky(C1bar).T
    inside = y[np.linalg.norm(y, axis=1) <= rho]
    cond = inside.T @ inside / max(len(inside), 1)
    return np.abs(M(s) @ cond @ M(t).T)


@dataclass
class SweepRow:
    rho: float
    n: int
    discrepancy: float
    se: float


def rho_sweep(ens: BridgeEnsemble, target: np.ndarray, s: float, t: float, rhos=(1.0, 0.5, 0.25)) -> list[SweepRow]:
    """Frobenius distance of the (s, t) covariance estimate to target for shrinking windows."""
    rows = []
    for r in sorted(rhos, reverse=True):
        sub = ens.restrict(r)
        est = empirical_covariance(sub, [(s, t)])[0]
        rows.append(SweepRow(r, sub.n, float(np.linalg.norm(est.estimate - target)), float(np.linalg.norm(est.se))))
    return rows


# ------------------------------------------------------------ heat kernel and Varadhan


def ball_volume(d: int, r: float) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * r**d


@dataclass
class VaradhanRow:
    eps: float
    value: float  # eps * log p_hat
    se: float
    target: float  # -d(x, y)^2 / 2
    hits: int
    p_hat: float
    log_p_hat: float


def kernel_estimate(
    model: Model,
    sol: GeodesicSolution,
    cfg: SdeConfig,
    r_kde: float | None = None,
    laplace_order: int = 2,
) -> VaradhanRow:
    """Ball-average estimate of p(eps, x, y) from tilted paths.

    Each path gets its Girsanov weight exp(-int hdot dB / sqrt(eps) - |h|^2 / 2 eps)
    and the factor exp((<lambda_1, z> + z^T H z / 2) / eps), z = gamma_1 - y,
    which undoes the variation of exp(-d(x, .)^2 / 2 eps) across the ball to
    second order. H = Jp_1 J_1^-1 is the Hessian of d(x, .)^2 / 2 at y
    (laplace_order=1 drops it). Logs are kept throughout since the weights
    underflow at small eps.
    """
    eps = cfg.eps
    r = 0.4 * math.sqrt(eps) if r_kde is None else r_kde
    res = simulate_tilted(model, sol, cfg)
    y = sol.path.x[-1]
    lam1 = sol.path.p[-1]
    off = res.endpoints - y
    hits = np.linalg.norm(off, axis=1) <= r
    energy = sol.energy
    target = -0.5 * energy
    nh = int(hits.sum())
    if nh == 0:
        raise InconclusiveError(f"no endpoint within the kernel ball at eps={eps}")
    z = off[hits]
    logw = -res.girsanov[hits] / math.sqrt(eps) + z @ lam1 / eps
    if laplace_order >= 2:
        H = sol.jacobi.Jp[-1] @ np.linalg.inv(sol.jacobi.J[-1])
        H = 0.5 * (H + H.T)
        logw += 0.5 * np.einsum("si,ij,sj->s", z, H, z) / eps
    shift = float(logw.max())
    w = np.zeros(len(res.endpoints))
    w[hits] = np.exp(logw - shift)
    n = len(w)
    mean = float(w.mean())
    se_rel = float(w.std(ddof=1) / math.sqrt(n) / mean)
    log_p = math.log(mean) + shift - energy / (2 * eps) - math.log(ball_volume(model.d, r))
    return VaradhanRow(eps, eps * log_p, eps * se_rel, target, nh, math.exp(log_p) if log_p > -700 else 0.0, log_p)


def varadhan_estimate(
    model: Model,
    x,
    y,
    eps_list,
    cfg: SdeConfig,
    sol: GeodesicSolution | None = None,
    r_kde: float | None = None,
    laplace_order: int = 2,
) -> list[VaradhanRow]:
    """Table of eps * log p_hat(eps, x, y) against -d(x, y)^2 / 2."""
    if sol is None:
        sol = solve_geodesic(model, np.asarray(x, float), np.asarray(y, float), ShootingOptions(seed=cfg.seed))
    rows = []
    for eps in eps_list:
        c = SdeConfig(eps, cfg.N, cfg.n, cfg.seed, cfg.rho, cfg.grid, cfg.scheme, cfg.threads)
        rows.append(kernel_estimate(model, sol, c, r_kde, laplace_order))
    return rows


def euclidean_log_density(d: int, dist: float, eps: float) -> float:
    """eps * log of the Gaussian density (2 pi eps)^{-d/2} exp(-dist^2 / 2 eps)."""
    return -0.5 * dist**2 - 0.5 * d * eps * math.log(2 * math.pi * eps)


# ------------------------------------------------------------ concentration


@dataclass
class ConcentrationRow:
    eps: float
    tail: float
    se: float
    n: int


@dataclass
class ConcentrationReport:
    r: float
    rows: list = field(default_factory=list)

    @property
    def monotone(self) -> bool:
        """Tail fraction non-increasing as eps decreases, up to 2 combined SE."""
        rows = sorted(self.rows, key=lambda q: -q.eps)
        return all(
            b.tail <= a.tail + 2 * math.hypot(a.se, b.se) for a, b in zip(rows, rows[1:])
        )


def concentration_stat(ensembles, r: float = 0.5) -> ConcentrationReport:
    """Fraction of bridges whose sup_t |v_t| sqrt(eps) reaches r, per eps."""
    ensembles = list(ensembles)
    if len(ensembles) < 3:
        raise InconclusiveError("need ensembles at three or more eps values")
    rep = ConcentrationReport(r)
    for ens in ensembles:
        if ens.n < 100:
            raise InconclusiveError(f"ensemble at eps={ens.eps} has only {ens.n} paths")
        sup = np.linalg.norm(ens.paths, axis=2).max(axis=1) * math.sqrt(ens.eps)
        frac = float(np.mean(sup >= r))
        rep.rows.append(ConcentrationRow(ens.eps, frac, math.sqrt(max(frac * (1 - frac), 0.0) / ens.n), ens.n))
    return rep
