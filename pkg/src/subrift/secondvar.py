"""Endpoint map of the control system, its derivatives, and the second variation q on ker d phi_1.

Controls are piecewise linear on N uniform intervals (piecewise-constant rates).
Coordinates for a control k are the Cameron-Martin orthonormal coefficients
c[i, l] = dk[i, l] / sqrt(dt), so the Cameron-Martin inner product is the dot
product of coefficient vectors.

The geodesic control h itself is not piecewise constant. It is resolved on a
fine grid of N*M steps (M substeps per control interval), on which the
variation fields v = d phi(k) and all integrals are computed with composite
Simpson rules per interval. Only the variations are discretized, so the
discrete spectrum is a Galerkin approximation of q on K.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson

from .errors import CutLocusError, FlowEscapeError, RankDeficiencyError
from .hamflow import ControlGrid, JacobiData, _integrate, flow, jacobi_pair
from .models import Model, ito_drift
from .shooting import GeodesicSolution

__all__ = [
    "ControlGrid",
    "SecondVariation",
    "QSpectrum",
    "HeatConstant",
    "endpoint_map",
    "endpoint_derivative",
    "second_variation",
    "first_variation",
    "kernel_basis",
    "q_form",
    "q_spectrum",
    "heat_constant",
]


# ------------------------------------------------------------ control system


def _control_rhs(model, x, rates, xb=None, pb=None):
    """phi' = sum_l X_l(phi) (rate_l + <p_b, X_l(x_b)>) with an optional co-integrated base flow."""
    v = model.values(x)
    r = rates
    out_b = (None, None)
    if xb is not None:
        vb, jb, _ = model.frame(xb, 1)
        c = np.einsum("bld,bd->bl", vb, pb)
        r = r + c
        pj = np.einsum("bi,blij->blj", pb, jb)
        out_b = (np.einsum("bl,bld->bd", c, vb), -np.einsum("bl,blj->bj", c, pj))
    return np.einsum("bl,bld->bd", r, v), out_b


def endpoint_map(
    model: Model,
    x,
    h: ControlGrid,
    substeps: int = 1,
    base: GeodesicSolution | None = None,
) -> np.ndarray:
    """phi(x, h) at the N+1 control nodes, RK4 with constant rate on each (sub)interval.

    With base, the control is base geodesic control + h, the base rate being
    evaluated exactly at every RK4 stage from the co-integrated bicharacteristic.
    """
    x = np.asarray(x, dtype=float)[None]
    rates = h.rates
    n_int = h.N
    dt = 1.0 / (n_int * substeps)
    xb = pb = None
    if base is not None:
        xb = base.lambda0.x[None].copy()
        pb = base.lambda0.p[None].copy()
    out = [x[0].copy()]
    for i in range(n_int):
        r = rates[i][None]
        for _ in range(substeps):
            if xb is None:
                k1 = _control_rhs(model, x, r)[0]
                k2 = _control_rhs(model, x + 0.5 * dt * k1, r)[0]
                k3 = _control_rhs(model, x + 0.5 * dt * k2, r)[0]
                k4 = _control_rhs(model, x + dt * k3, r)[0]
                x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            else:
                k1, (a1, b1) = _control_rhs(model, x, r, xb, pb)
                k2, (a2, b2) = _control_rhs(model, x + 0.5 * dt * k1, r, xb + 0.5 * dt * a1, pb + 0.5 * dt * b1)
                k3, (a3, b3) = _control_rhs(model, x + 0.5 * dt * k2, r, xb + 0.5 * dt * a2, pb + 0.5 * dt * b2)
                k4, (a4, b4) = _control_rhs(model, x + dt * k3, r, xb + dt * a3, pb + dt * b3)
                x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                xb = xb + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
                pb = pb + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
            if not np.all(np.isfinite(x)) or np.abs(x).max() > 1e6:
                raise FlowEscapeError("controlled path left the escape bound")
        out.append(x[0].copy())
    return np.array(out)


def endpoint_derivative(model: Model, x, h: ControlGrid, k: ControlGrid, substeps: int = 1) -> np.ndarray:
    """Variation v = d/de phi(x, h + e k) at e = 0, on the N+1 nodes.

    Integrates the coupled system (phi, v) with v' = sum grad X_l(phi) v hdot_l + X_l(phi) kdot_l
    using the same RK4 scheme as endpoint_map.
    """
    x = np.asarray(x, dtype=float)
    hr, kr = h.rates, k.rates
    dt = 1.0 / (h.N * substeps)

    def rhs(phi, v, hrate, krate):
        vals, jac, _ = model.frame(phi, 1)
        dphi = hrate @ vals
        dv = np.einsum("l,lij,j->i", hrate, jac, v) + krate @ vals
        return dphi, dv

    phi = x.copy()
    v = np.zeros_like(x)
    out = [v.copy()]
    for i in range(h.N):
        for _ in range(substeps):
            a1, b1 = rhs(phi, v, hr[i], kr[i])
            a2, b2 = rhs(phi + 0.5 * dt * a1, v + 0.5 * dt * b1, hr[i], kr[i])
            a3, b3 = rhs(phi + 0.5 * dt * a2, v + 0.5 * dt * b2, hr[i], kr[i])
            a4, b4 = rhs(phi + dt * a3, v + dt * b3, hr[i], kr[i])
            phi = phi + dt / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            v = v + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        out.append(v.copy())
    return np.array(out)


# ------------------------------------------------------------ second variation


def _simpson_weights(M: int) -> np.ndarray:
    w = np.ones(M + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


@dataclass
class SecondVariation:
    """Discretized first/second derivative data of the endpoint map along a geodesic."""

    model: Model
    sol: GeodesicSolution
    N: int
    M: int
    t: np.ndarray  # fine nodes, N*M + 1
    x: np.ndarray
    p: np.ndarray
    hdot: np.ndarray  # (nf, m)
    u: np.ndarray
    uinv: np.ndarray
    jacobi: JacobiData  # Jacobi data on the fine grid
    idx: np.ndarray  # (N, M+1) node indices of each interval
    wloc: np.ndarray  # (M+1,) local Simpson weights times fine step
    wglob: np.ndarray  # (nf,) composite weights
    V: np.ndarray  # (nf, d, N*m) variation fields of the basis controls
    D: np.ndarray  # (d, N*m) d phi_1 in coefficient coordinates
    S: np.ndarray  # (N*m, N*m) <lambda_1, d^2 phi_1(e_a, e_b)>
    hcoef: np.ndarray  # (N*m,) coefficients of the projection of h
    frame_vals: np.ndarray
    frame_jac: np.ndarray
    frame_hess: np.ndarray

    @property
    def m(self) -> int:
        return self.model.m

    @property
    def dt(self) -> float:
        return 1.0 / self.N

    def coef(self, k: ControlGrid) -> np.ndarray:
        if k.N != self.N:
            raise ValueError(f"control has {k.N} intervals, expected {self.N}")
        return (k.values / np.sqrt(self.dt)).reshape(-1)

    def control(self, c: np.ndarray) -> ControlGrid:
        return ControlGrid(np.asarray(c).reshape(self.N, self.m) * np.sqrt(self.dt))

    def rates_nodes(self, c: np.ndarray) -> np.ndarray:
        """Per-interval node rates (N, M+1, m) of a coefficient vector."""
        r = np.asarray(c).reshape(self.N, self.m) / np.sqrt(self.dt)
        return np.broadcast_to(r[:, None, :], (self.N, self.M + 1, self.m))

    def field(self, c: np.ndarray) -> np.ndarray:
        """Variation field v(k) at the fine nodes."""
        return self.V @ np.asarray(c)

    def kernel_residual(self, c: np.ndarray) -> float:
        c = np.asarray(c)
        return float(np.linalg.norm(self.D @ c) / max(np.linalg.norm(self.D) * np.linalg.norm(c), 1e-300))

    def second_derivative(self, c1: np.ndarray, c2: np.ndarray) -> np.ndarray:
        """Vector d^2 phi_1(k1, k2) = u_1 int u_t^-1 {sum hdot_l grad^2 X_l(v1, v2) + grad X_l v1 kdot2_l + grad X_l v2 kdot1_l} dt."""
        v1, v2 = self.field(c1), self.field(c2)
        r1, r2 = self.rates_nodes(c1), self.rates_nodes(c2)
        return self._second_general(v1, r1, v2, r2)

    def _second_general(self, v1, r1, v2, r2):
        J, H = self.frame_jac, self.frame_hess
        hv = np.einsum("nl,nlijk,nj,nk->ni", self.hdot, H, v1, v2, optimize=True)
        Jv1 = np.einsum("nlij,nj->nli", J, v1)
        Jv2 = np.einsum("nlij,nj->nli", J, v2)
        idx = self.idx
        f = (
            hv[idx]
            + np.einsum("qali,qal->qai", Jv1[idx], r2)
            + np.einsum("qali,qal->qai", Jv2[idx], r1)
        )
        f = np.einsum("qaij,qaj->qai", self.uinv[idx], f)
        integral = np.einsum("a,qai->i", self.wloc, f)
        return self.u[-1] @ integral

    def q_general(self, v1, r1, v2, r2) -> float:
        """q(k1, k2) for controls given by fine-node fields v and per-interval node rates r."""
        return self.q_general_blocks(v1[self.idx], r1, v2[self.idx], r2)

    def q_general_blocks(self, v1, r1, v2, r2) -> float:
        """As q_general with fields already split per interval, (N, M+1, d)."""
        idx = self.idx
        inner = float(np.einsum("a,qal,qal->", self.wloc, r1, r2))
        p = self.p[idx]
        J, H = self.frame_jac[idx], self.frame_hess[idx]
        hv = np.einsum("qal,qai,qalijk,qaj,qak->qa", self.hdot[idx], p, H, v1, v2, optimize=True)
        P = np.einsum("qai,qalij->qalj", p, J)
        pv1 = np.einsum("qalj,qaj->qal", P, v1)
        pv2 = np.einsum("qalj,qaj->qal", P, v2)
        f = hv + np.einsum("qal,qal->qa", pv1, r2) + np.einsum("qal,qal->qa", pv2, r1)
        return inner - float(np.einsum("a,qa->", self.wloc, f))

    def control_from_field(self, v: np.ndarray, vdot: np.ndarray) -> np.ndarray:
        """Per-interval node rates of k(lambda, v): kdot_l = <p, grad X_l v> + <eta, X_l>.

        eta solves a(gamma) eta = vdot - sum grad X_l v hdot_l - sum X_l <p, grad X_l v>
        in the least-squares sense. v and vdot are given at the fine nodes as
        (N, M+1, d) arrays so that kinks at interval boundaries are respected.
        """
        idx = self.idx
        X = self.frame_vals[idx]
        J = self.frame_jac[idx]
        p = self.p[idx]
        hd = self.hdot[idx]
        pJv = np.einsum("qai,qalij,qaj->qal", p, J, v)
        rhs = vdot - np.einsum("qal,qalij,qaj->qai", hd, J, v) - np.einsum("qali,qal->qai", X, pJv)
        a = np.einsum("qali,qalj->qaij", X, X)
        flat_a = a.reshape(-1, a.shape[-2], a.shape[-1])
        flat_r = rhs.reshape(-1, rhs.shape[-1])
        eta = np.stack([np.linalg.lstsq(A, r, rcond=1e-12)[0] for A, r in zip(flat_a, flat_r)]).reshape(rhs.shape)
        return pJv + np.einsum("qali,qai->qal", X, eta)


def _fine_substeps(N: int, min_fine: int = 1024) -> int:
    M = max(2, int(np.ceil(min_fine / N)))
    return M + (M % 2)


def second_variation(model: Model, sol: GeodesicSolution, N: int, M: int | None = None) -> SecondVariation:
    """Assemble the discretized endpoint derivative D and second-derivative form S."""
    M = M or _fine_substeps(N)
    nf = N * M
    m, d = model.m, model.d
    path = flow(model, sol.lambda0, 1.0, nf)
    jac = jacobi_pair(model, path)
    t = path.t
    vals, J, H = model.frame(path.x, 2)
    u = jac.u
    uinv = np.linalg.inv(u)
    hdot = path.hdot
    idx = np.arange(N)[:, None] * M + np.arange(M + 1)[None, :]
    dtf = 1.0 / nf
    wloc = _simpson_weights(M) * dtf
    wglob = np.zeros(nf + 1)
    np.add.at(wglob, idx, np.broadcast_to(wloc, idx.shape))
    sq = np.sqrt(1.0 / N)

    # f_l(t) = u_t^-1 X_l(gamma_t): (nf+1, d, m)
    f = np.einsum("nij,nlj->nil", uinv, vals)
    W = np.zeros((nf + 1, d, N, m))
    for i in range(N):
        seg = f[idx[i]]
        cum = cumulative_simpson(seg, dx=dtf, axis=0, initial=0.0)
        W[idx[i], :, i, :] = cum
        W[idx[i][-1] + 1 :, :, i, :] = cum[-1]
    V = np.einsum("nij,njA->niA", u, W.reshape(nf + 1, d, N * m)) / sq
    D = V[-1]

    p = path.p
    G = np.einsum("nl,nb,nlbjk->njk", hdot, p, H, optimize=True)  # Hessian of <p, sum hdot_l X_l>
    GV = np.einsum("njk,nkA->njA", G, V)
    T1 = np.einsum("n,njA,njB->AB", wglob, V, GV)
    P = np.einsum("ni,nlij->nlj", p, J)  # (nf+1, m, d)
    R = np.einsum("nlj,njA->nlA", P, V)  # (nf+1, m, N*m)
    Bint = np.einsum("a,qalA->qlA", wloc, R[idx])  # (N, m, N*m)
    Bmat = Bint.reshape(N * m, N * m).T / sq
    S = T1 + Bmat + Bmat.T
    S = 0.5 * (S + S.T)
    hcoef = np.einsum("a,qal->ql", wloc, hdot[idx]).reshape(-1) / sq
    return SecondVariation(
        model, sol, N, M, t, path.x, p, hdot, u, uinv, jac, idx, wloc, wglob, V, D, S, hcoef,
        vals, J, H,
    )


@dataclass
class QSpectrum:
    N: int
    kernel_basis: np.ndarray  # (N*m, dim K) orthonormal coefficient vectors
    rank: int
    singular_values: np.ndarray
    mu: np.ndarray | None = None  # ascending eigenvalues of q on K
    eigvecs: np.ndarray | None = None  # (N*m, dim K) coefficient vectors e_n
    lambda1: np.ndarray | None = None
    sv: SecondVariation | None = None

    @property
    def dim(self) -> int:
        return self.kernel_basis.shape[1]

    @property
    def mu_min(self) -> float:
        return float(self.mu[0])


def _sv_for(model, sol, N, sv):
    if sv is not None and sv.N == N:
        return sv
    return second_variation(model, sol, N)


def kernel_basis(model: Model, sol: GeodesicSolution, N: int, sv: SecondVariation | None = None, rel_tol: float = 1e-10) -> QSpectrum:
    sv = _sv_for(model, sol, N, sv)
    U, s, Vt = np.linalg.svd(sv.D, full_matrices=True)
    rank = int(np.sum(s > rel_tol * max(s[0], 1e-300))) if s.size and s[0] > 0 else 0
    if rank < model.d:
        raise RankDeficiencyError(
            f"d phi_1 has rank {rank} < {model.d}: the path is not regular"
        )
    Z = Vt[rank:].T
    return QSpectrum(N, Z, rank, s, lambda1=sv.p[-1].copy(), sv=sv)


def first_variation(model: Model, sol: GeodesicSolution, k: ControlGrid, sv: SecondVariation | None = None) -> float:
    """L = 2 <h, k> in the Cameron-Martin inner product."""
    sv = _sv_for(model, sol, k.N, sv)
    return float(2.0 * sv.hcoef @ sv.coef(k))


def q_form(
    model: Model,
    sol: GeodesicSolution,
    k: ControlGrid,
    k2: ControlGrid | None = None,
    sv: SecondVariation | None = None,
    route: str = "ode",
    tol: float = 1e-8,
) -> float:
    """q(k, k2) = <k, k2> - <lambda_1, d^2 phi_1(k, k2)> for kernel controls."""
    k2 = k if k2 is None else k2
    sv = _sv_for(model, sol, k.N, sv)
    c1, c2 = sv.coef(k), sv.coef(k2)
    for c in (c1, c2):
        if sv.kernel_residual(c) > tol:
            raise ValueError("control is not in ker d phi_1 (projection residual too large)")
    if route == "ode":
        return float(c1 @ c2 - sv.p[-1] @ sv.second_derivative(c1, c2))
    if route == "fd":
        return float(c1 @ c2 - sv.p[-1] @ second_derivative_fd(model, sv, k, k2))
    raise ValueError(f"unknown route {route!r}")


def second_derivative_fd(model: Model, sv: SecondVariation, k: ControlGrid, k2: ControlGrid | None = None, eps: float = 1e-3) -> np.ndarray:
    """d^2 phi_1(k, k2) by central second differences with one Richardson step (polarized if k2 given)."""

    def quad(kk):
        def dd(e):
            fp = endpoint_map(model, sv.sol.x, kk * e, sv.M, base=sv.sol)[-1]
            fm = endpoint_map(model, sv.sol.x, kk * (-e), sv.M, base=sv.sol)[-1]
            f0 = endpoint_map(model, sv.sol.x, kk * 0.0, sv.M, base=sv.sol)[-1]
            return (fp - 2 * f0 + fm) / e**2

        a, b = dd(eps), dd(eps / 2)
        return b + (b - a) / 3.0

    if k2 is None or k2 is k:
        return quad(k)
    return 0.25 * (quad(k + k2) - quad(k + k2 * -1.0))


def q_spectrum(model: Model, sol: GeodesicSolution, N: int, sv: SecondVariation | None = None) -> QSpectrum:
    qs = kernel_basis(model, sol, N, sv)
    Z = qs.kernel_basis
    S = qs.sv.S
    qK = Z.T @ (np.eye(S.shape[0]) - S) @ Z
    qK = 0.5 * (qK + qK.T)
    mu, E = np.linalg.eigh(qK)
    qs.mu = mu
    qs.eigvecs = Z @ E
    return qs


@dataclass
class HeatConstant:
    c: float
    detC1bar: float
    Z1: np.ndarray
    trace_term: float  # <lambda_1, u_1 int u_t^-1 sum grad X_l X_l dt>
    spectral_factor: float
    log_spectral_factor: float
    mu: np.ndarray
    tail_max_dev: float
    c_unit_weight: float  # same assembly with exp(<lambda_1, Z1>/2) and no trace term
    c_extrapolated: float | None = None  # Richardson combination of N and N/2 (log scale)

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "detC1bar": self.detC1bar,
            "Z1": [float(z) for z in self.Z1],
            "trace_term": self.trace_term,
            "spectral_factor": self.spectral_factor,
            "tail_max_dev": self.tail_max_dev,
            "c_half_drift_weight": self.c_unit_weight,
            "c_extrapolated": self.c_extrapolated,
            "mu": [float(m) for m in self.mu],
        }


def heat_constant(
    model: Model,
    sol: GeodesicSolution,
    N: int,
    sv: SecondVariation | None = None,
    extrapolate: bool = False,
) -> HeatConstant:
    """Small-time constant c with p(t, x, y) ~ c t^{-d/2} exp(-d(x, y)^2 / 2t).

    c = (2 pi)^{-d/2} det(C1bar)^{-1/2} exp(<lambda_1, Z1> - T/2) prod mu_n^{-1/2}
    where Z1 = u_1 int u_t^-1 X~_0 dt uses the Ito drift and
    T = <lambda_1, u_1 int u_t^-1 sum grad X_l X_l dt> converts the discrete
    (pathwise) eigenvalue product into the Ito-form expectation.

    The discrete spectral product has an O(1/N) error, so with extrapolate the
    value 2 log c(N) - log c(N/2) is also reported.
    """
    qs = q_spectrum(model, sol, N, sv)
    mu = qs.mu
    if mu[0] <= 0:
        raise CutLocusError(f"second variation not positive on the kernel (mu_min={mu[0]:.3e})")
    jac = sol.jacobi
    path = sol.path
    d = model.d
    uinv = np.linalg.inv(jac.u)
    u1 = jac.u[-1]
    xt = ito_drift(model, path.x)
    Z1 = u1 @ np.trapezoid(np.einsum("nij,nj->ni", uinv, xt), path.t, axis=0)
    vals, J, _ = model.frame(path.x, 1)
    corr = np.einsum("nlij,nlj->ni", J, vals)
    Tvec = u1 @ np.trapezoid(np.einsum("nij,nj->ni", uinv, corr), path.t, axis=0)
    lam1 = path.p[-1]
    T = float(lam1 @ Tvec)
    det = float(np.linalg.det(jac.C1bar))
    logsf = -0.5 * float(np.sum(np.log(mu)))
    pref = (2 * np.pi) ** (-d / 2) / np.sqrt(det)
    c = pref * np.exp(float(lam1 @ Z1) - 0.5 * T + logsf)
    c_alt = pref * np.exp(0.5 * float(lam1 @ Z1) + logsf)
    ntail = max(0, len(mu) - 4 * d)
    tail = np.sort(np.abs(mu - 1.0))[:ntail]
    return HeatConstant(
        c=float(c),
        detC1bar=det,
        Z1=Z1,
        trace_term=T,
        spectral_factor=float(np.exp(logsf)),
        log_spectral_factor=logsf,
        mu=mu,
        tail_max_dev=float(tail.max()) if tail.size else 0.0,
        c_unit_weight=float(c_alt),
        c_extrapolated=_extrapolated(model, sol, N, float(c)) if extrapolate else None,
    )


def _extrapolated(model, sol, N, c):
    if N < 4 or N % 2:
        raise ValueError("extrapolation needs an even N >= 4")
    coarse = heat_constant(model, sol, N // 2).c
    return float(np.exp(2 * np.log(c) - np.log(coarse)))
