"""Bicharacteristic flow of H(x, p) = 1/2 <p, a(x) p> and its Jacobi maps.

The ODE is
    x' = sum_l <p, X_l> X_l,     p' = -sum_l <p, X_l> grad_x <p, X_l>,
integrated by fixed-step classical RK4. The same integrator carries the
linearization (for the Jacobi maps J_t, K_t) and the fundamental matrix u_t of
du = sum_l grad X_l(gamma_t) u hdot^l dt along the projected path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FlowEscapeError, LinearizationError, NonFiniteError
from .models import Model, diffusivity

ESCAPE_BOUND = 1e6


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    p: np.ndarray

    @classmethod
    def of(cls, lam) -> "PhasePoint":
        if isinstance(lam, PhasePoint):
            return lam
        x, p = lam
        return cls(np.asarray(x, dtype=float), np.asarray(p, dtype=float))


@dataclass(frozen=True)
class ControlGrid:
    """Piecewise-linear control h with h_0 = 0, stored as N increments in R^m."""

    values: np.ndarray

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def dt(self) -> float:
        return 1.0 / self.N

    @property
    def rates(self) -> np.ndarray:
        """hdot on each interval, shape (N, m)."""
        return self.values * self.N

    def inner(self, other: "ControlGrid") -> float:
        """Cameron-Martin inner product sum <dh, dk> / dt."""
        return float(np.sum(self.values * other.values) * self.N)

    @property
    def norm2(self) -> float:
        return self.inner(self)

    def path(self) -> np.ndarray:
        """h at the N+1 nodes."""
        return np.vstack([np.zeros(self.m), np.cumsum(self.values, axis=0)])

    def __add__(self, other: "ControlGrid") -> "ControlGrid":
        return ControlGrid(self.values + other.values)

    def __mul__(self, c: float) -> "ControlGrid":
        return ControlGrid(self.values * c)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, N: int, m: int) -> "ControlGrid":
        return cls(np.zeros((N, m)))


@dataclass
class BicharPath:
    model: Model
    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    H0: float
    hdot: np.ndarray  # (N+1, m), <p_t, X_l(x_t)>

    @property
    def N(self) -> int:
        return len(self.t) - 1

    @property
    def lambda0(self) -> PhasePoint:
        return PhasePoint(self.x[0].copy(), self.p[0].copy())

    @property
    def lambda1(self) -> PhasePoint:
        return PhasePoint(self.x[-1].copy(), self.p[-1].copy())

    def controls(self) -> ControlGrid:
        """Control increments on the flow grid (trapezoid rule on hdot)."""
        dt = 1.0 / self.N
        return ControlGrid(0.5 * dt * (self.hdot[1:] + self.hdot[:-1]))

    def energy_quadrature(self) -> float:
        """Trapezoid value of int <p, a p> dt; equals 2 H0 up to quadrature error."""
        e = np.sum(self.hdot**2, axis=1)
        return float(np.trapezoid(e, self.t))


@dataclass
class JacobiData:
    t: np.ndarray
    J: np.ndarray
    Jdot: np.ndarray
    K: np.ndarray
    Kdot: np.ndarray
    u: np.ndarray
    C1: np.ndarray
    C1bar: np.ndarray
    Jp: np.ndarray  # momentum part of the forward variation, pairs with J

    @property
    def symmetric_residual(self) -> float:
        return float(np.linalg.norm(self.J[-1] - self.K[0].T))

    def J_at(self, s: float) -> np.ndarray:
        return hermite(self.t, self.J, self.Jdot, s)

    def K_at(self, s: float) -> np.ndarray:
        return hermite(self.t, self.K, self.Kdot, s)


def hermite(t: np.ndarray, y: np.ndarray, yd: np.ndarray, s: float) -> np.ndarray:
    """Cubic Hermite interpolation of grid data with known derivatives."""
    n = len(t) - 1
    if s <= t[0]:
        return y[0].copy()
    if s >= t[-1]:
        return y[-1].copy()
    h = t[1] - t[0]
    i = min(int((s - t[0]) / h), n - 1)
    tau = (s - t[i]) / h
    if tau < 1e-13:
        return y[i].copy()
    h00 = 2 * tau**3 - 3 * tau**2 + 1
    h10 = tau**3 - 2 * tau**2 + tau
    h01 = -2 * tau**3 + 3 * tau**2
    h11 = tau**3 - tau**2
    return h00 * y[i] + h10 * h * yd[i] + h01 * y[i + 1] + h11 * h * yd[i + 1]


def hamiltonian(model: Model, lam) -> float:
    lam = PhasePoint.of(lam)
    v = model.values(lam.x)
    return float(0.5 * np.sum((v @ lam.p) ** 2))


# ------------------------------------------------------------ RK4 core


def _rhs(model: Model, x, p, tx=None, tp=None, u=None):
    """Right-hand side for batched state; shapes x, p (B, d), tx, tp (B, d, k), u (B, d, d)."""
    order = 2 if tx is not None else 1
    v, jx, hx = model.frame(x, order)
    c = np.einsum("bld,bd->bl", v, p)
    xdot = np.einsum("bl,bld->bd", c, v)
    pj = np.einsum("bi,blij->blj", p, jx)  # d_j <p, X_l>
    pdot = -np.einsum("bl,blj->bj", c, pj)
    amat = np.einsum("bl,blij->bij", c, jx)  # sum_l hdot^l grad X_l
    out = [xdot, pdot, None, None, None]
    if tx is not None:
        dc = np.einsum("bld,bdk->blk", v, tp) + np.einsum("blj,bjk->blk", pj, tx)
        dxd = np.einsum("blk,bld->bdk", dc, v) + amat @ tx
        ph = np.einsum("bi,blijm->bljm", p, hx)
        g = np.einsum("bl,bljm->bjm", c, ph)
        dpd = -(np.einsum("blk,blj->bjk", dc, pj) + np.swapaxes(amat, 1, 2) @ tp + g @ tx)
        out[2], out[3] = dxd, dpd
    if u is not None:
        out[4] = amat @ u
    return out


def _integrate(
    model: Model,
    x0: np.ndarray,
    p0: np.ndarray,
    N: int,
    T: float = 1.0,
    tangents: tuple | None = None,
    with_u: bool = False,
    record: bool = True,
    bound: float = ESCAPE_BOUND,
    mask_escapes: bool = False,
):
    """Batched RK4. Returns dict of node arrays (time axis first when recorded).

    With mask_escapes, rows that leave the bound are frozen and flagged in
    out["failed"] instead of raising.
    """
    if N < 2:
        raise ValueError("need at least 2 steps")
    x = np.array(x0, dtype=float)
    p = np.array(p0, dtype=float)
    B, d = x.shape
    tx = tp = u = None
    if tangents is not None:
        tx = np.array(tangents[0], dtype=float)
        tp = np.array(tangents[1], dtype=float)
    if with_u:
        u = np.broadcast_to(np.eye(d), (B, d, d)).copy()
    dt = T / N
    failed = np.zeros(B, dtype=bool)
    rec = {}

    def store(i, state, deriv):
        for key, val in zip(("x", "p", "tx", "tp", "u"), state):
            if val is not None:
                rec.setdefault(key, np.empty((N + 1,) + val.shape))[i] = val
        if deriv[2] is not None:
            rec.setdefault("txdot", np.empty((N + 1,) + deriv[2].shape))[i] = deriv[2]

    def add(state, k, h):
        return [None if s is None else s + h * ks for s, ks in zip(state, k)]

    state = [x, p, tx, tp, u]
    with np.errstate(all="ignore"):
        k1 = _rhs(model, *state)
        for i in range(N):
            if record:
                store(i, state, k1)
            k2 = _rhs(model, *add(state, k1, 0.5 * dt))
            k3 = _rhs(model, *add(state, k2, 0.5 * dt))
            k4 = _rhs(model, *add(state, k3, dt))
            new = [
                None if s is None else s + (dt / 6.0) * (a + 2 * b + 2 * c + e)
                for s, a, b, c, e in zip(state, k1, k2, k3, k4)
            ]
            bad = ~(np.isfinite(new[0]).all(1) & np.isfinite(new[1]).all(1))
            bad |= (np.abs(new[0]).max(1) > bound) | (np.abs(new[1]).max(1) > bound)
            for s in new[2:]:
                if s is not None:
                    bad |= ~np.isfinite(s).reshape(B, -1).all(1)
            if bad.any():
                if not mask_escapes:
                    if not (np.isfinite(new[0]).all() and np.isfinite(new[1]).all()):
                        raise NonFiniteError(f"non-finite state at t={(i + 1) * dt:.6g}")
                    raise FlowEscapeError(
                        f"bicharacteristic left the bound {bound:g} at t={(i + 1) * dt:.6g}",
                        t=(i + 1) * dt,
                    )
                failed |= bad
                for s_new, s_old in zip(new, state):
                    if s_new is not None:
                        s_new[bad] = s_old[bad]
            state = new
            k1 = _rhs(model, *state)
            if bad.any():
                for arr in k1:
                    if arr is not None:
                        arr[failed] = 0.0
        if record:
            store(N, state, k1)
    rec["final"] = state
    rec["failed"] = failed
    return rec


def flow(model: Model, lam0, T: float = 1.0, N: int = 1000, bound: float = ESCAPE_BOUND) -> BicharPath:
    lam0 = PhasePoint.of(lam0)
    rec = _integrate(model, lam0.x[None], lam0.p[None], N, T, bound=bound)
    x = rec["x"][:, 0]
    p = rec["p"][:, 0]
    v = model.values(x)
    hdot = np.einsum("tld,td->tl", v, p)
    t = np.linspace(0.0, T, N + 1)
    return BicharPath(model, t, x, p, hamiltonian(model, lam0), hdot)


def jacobi_pair(model: Model, path: BicharPath) -> JacobiData:
    """J_t, K_t, u_t, C_1 and C1bar = u_1 C_1 u_1^T along a unit-time path."""
    d = model.d
    N = path.N
    eye = np.eye(d)
    zero = np.zeros((1, d, d))
    fwd = _integrate(
        model, path.x[:1], path.p[:1], N, 1.0, tangents=(zero, eye[None]), with_u=True
    )
    bwd = _integrate(
        model, path.x[-1:], path.p[-1:], N, -1.0, tangents=(zero, -eye[None])
    )
    J = fwd["tx"][:, 0]
    Jdot = fwd["txdot"][:, 0]
    K = bwd["tx"][::-1, 0]
    Kdot = bwd["txdot"][::-1, 0]
    u = fwd["u"][:, 0]
    cond = np.linalg.cond(u)
    if not np.all(np.isfinite(cond)) or cond.max() > 1e14:
        raise LinearizationError("u_t is numerically singular")
    w = np.linalg.inv(u)
    a = diffusivity(model, path.x)
    integrand = w @ a @ np.swapaxes(w, 1, 2)
    C1 = np.trapezoid(integrand, path.t, axis=0)
    C1 = 0.5 * (C1 + C1.T)
    C1bar = u[-1] @ C1 @ u[-1].T
    C1bar = 0.5 * (C1bar + C1bar.T)
    return JacobiData(path.t, J, Jdot, K, Kdot, u, C1, C1bar, fwd["tp"][:, 0])


def hamiltonian_drift_report(path: BicharPath) -> float:
    v = path.model.values(path.x)
    H = 0.5 * np.sum(np.einsum("tld,td->tl", v, path.p) ** 2, axis=1)
    return float(np.max(np.abs(H - path.H0)) / (1.0 + path.H0))


def jacobi_integral_identity(model: Model, path: BicharPath, jac: JacobiData, i: int) -> np.ndarray:
    """K_t (int_0^t K_s^-1 a(x_s) K_s^-T ds) K_0^T at node i, Simpson rule (i even).

    Equals J_t whenever K_s is invertible on [0, t].
    """
    if i % 2:
        raise ValueError("node index must be even for the Simpson rule")
    if i == 0:
        return np.zeros_like(jac.J[0])
    kinv = np.linalg.inv(jac.K[: i + 1])
    a = diffusivity(model, path.x[: i + 1])
    f = kinv @ a @ np.swapaxes(kinv, 1, 2)
    w = np.ones(i + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    integral = np.einsum("n,nij->ij", w * (path.t[1] - path.t[0]) / 3.0, f)
    return jac.K[i] @ integral @ jac.K[0].T
