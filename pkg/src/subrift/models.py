"""Sub-Riemannian models on a single chart of R^d and the builtin model zoo.

A model is a frame of m vector fields X_1..X_m with exact first and second
derivatives, plus an optional drift X_0. The generator is
L = 1/2 sum X_l^2 + X_0 and the diffusivity is a(x) = sum X_l(x) X_l(x)^T.

Array conventions (leading batch axes "..." allowed everywhere):
    values     (..., m, d)        V[..., l, i]       = X_l^i
    jacobians  (..., m, d, d)     J[..., l, i, j]    = d_j X_l^i
    hessians   (..., m, d, d, d)  H[..., l, i, j, k] = d_j d_k X_l^i
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dual
from .errors import ModelEvaluationError

# (x, order) -> (values, jacobians or None, hessians or None)
StackedFn = Callable[[np.ndarray, int], tuple]


@dataclass(frozen=True)
class VectorField:
    """A single vector field with value/Jacobian/Hessian callables on (..., d) arrays."""

    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    name: str = ""

    @classmethod
    def from_components(cls, fn: dual.FieldFn, d: int, name: str = "") -> "VectorField":
        """Build from a value-only function; derivatives come from hyper-dual numbers.

        fn receives a list of d coordinate arrays and returns d components.
        """

        def value(x):
            x = np.asarray(x, dtype=float)
            out = fn([x[..., i] for i in range(d)])
            return np.stack([np.broadcast_to(np.asarray(c, dtype=float), x.shape[:-1]) for c in out], -1)

        def jacobian(x):
            return dual.derivatives(fn, x, d)[1]

        def hessian(x):
            return dual.derivatives(fn, x, d)[2]

        return cls(value, jacobian, hessian, name)


@dataclass(frozen=True)
class Model:
    name: str
    d: int
    m: int
    stacked: StackedFn
    drift: VectorField | None = None
    riemannian: bool = False
    flat: bool = False
    validity_radius: float | None = None
    chart: str = ""
    oracle: dict = field(default_factory=dict)

    def values(self, x: np.ndarray) -> np.ndarray:
        return self.stacked(np.asarray(x, dtype=float), 0)[0]

    def frame(self, x: np.ndarray, order: int = 2) -> tuple:
        return self.stacked(np.asarray(x, dtype=float), order)

    def drift_value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.drift is None:
            return np.zeros_like(x)
        return self.drift.value(x)

    @classmethod
    def from_fields(
        cls,
        name: str,
        d: int,
        fields: Sequence[VectorField],
        drift: VectorField | None = None,
        **kwargs,
    ) -> "Model":
        fields = tuple(fields)

        def stacked(x, order):
            v = np.stack([f.value(x) for f in fields], -2)
            j = np.stack([f.jacobian(x) for f in fields], -3) if order >= 1 else None
            h = np.stack([f.hessian(x) for f in fields], -4) if order >= 2 else None
            return v, j, h

        return cls(name=name, d=d, m=len(fields), stacked=stacked, drift=drift, **kwargs)

    @classmethod
    def from_functions(
        cls,
        name: str,
        d: int,
        fields: Sequence[dual.FieldFn],
        drift: dual.FieldFn | None = None,
        **kwargs,
    ) -> "Model":
        """User model from value-only component functions (derivatives by hyper-duals)."""
        vf = [VectorField.from_components(f, d, f"X{i + 1}") for i, f in enumerate(fields)]
        dr = VectorField.from_components(drift, d, "X0") if drift is not None else None
        return cls.from_fields(name, d, vf, dr, **kwargs)


@dataclass(frozen=True)
class FrameEval:
    values: np.ndarray
    jacobians: np.ndarray
    hessians: np.ndarray


def eval_frame(model: Model, x) -> FrameEval:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ModelEvaluationError("non-finite evaluation point")
    v, j, h = model.frame(x, 2)
    for arr in (v, j, h):
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad)[0][x.ndim - 1])
            raise ModelEvaluationError(f"non-finite output from field {idx + 1}", idx)
    asym = np.abs(h - np.swapaxes(h, -1, -2)).max(initial=0.0)
    if asym > 1e-10 * (1.0 + np.abs(h).max(initial=0.0)):
        raise ModelEvaluationError("Hessian not symmetric in derivative slots")
    return FrameEval(v, j, h)


def diffusivity(model: Model, x) -> np.ndarray:
    v = model.values(x)
    return np.einsum("...li,...lj->...ij", v, v)


def ito_drift(model: Model, x) -> np.ndarray:
    """X~_0 = X_0 + 1/2 sum_l (grad X_l) X_l."""
    x = np.asarray(x, dtype=float)
    v, j, _ = model.frame(x, 1)
    return model.drift_value(x) + 0.5 * np.einsum("...lij,...lj->...i", j, v)


@dataclass
class EquivalenceReport:
    max_diffusivity_gap: float
    max_flow_gap: float


def structure_equivalence_probe(
    model_a: Model,
    model_b: Model,
    points,
    covectors=None,
    N: int = 1000,
) -> EquivalenceReport:
    """Compare two frames: diffusivity gap on the points and bicharacteristic endpoint gap.

    Flows start at each point with the matching covector (default: a fixed
    pseudo-random unit covector per point).
    """
    from .hamflow import flow

    if model_a.d != model_b.d:
        raise ValueError("dimension mismatch")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    gap_a = float(np.abs(diffusivity(model_a, pts) - diffusivity(model_b, pts)).max())
    if covectors is None:
        g = np.random.default_rng(0).standard_normal(pts.shape)
        covectors = g / np.linalg.norm(g, axis=1, keepdims=True)
    cov = np.atleast_2d(np.asarray(covectors, dtype=float))
    gap_f = 0.0
    for x, p in zip(pts, cov):
        ea = flow(model_a, (x, p), 1.0, N).x[-1]
        eb = flow(model_b, (x, p), 1.0, N).x[-1]
        gap_f = max(gap_f, float(np.abs(ea - eb).max()))
    return EquivalenceReport(gap_a, gap_f)


# ---------------------------------------------------------------- zoo


def _zeros(shape):
    return np.zeros(shape)


def euclidean(d: int = 2) -> Model:
    def stacked(x, order):
        b = x.shape[:-1]
        v = np.broadcast_to(np.eye(d), b + (d, d)).copy()
        j = _zeros(b + (d, d, d)) if order >= 1 else None
        h = _zeros(b + (d, d, d, d)) if order >= 2 else None
        return v, j, h

    return Model(
        name=f"euclidean{d}" if d != 2 else "euclidean",
        d=d,
        m=d,
        stacked=stacked,
        riemannian=True,
        flat=True,
        chart="identity",
        oracle={"curvature": 0.0},
    )


def _conformal(name, s, ds, d2s, drift, curvature, validity, chart):
    """Two-dimensional frame X_l = s(x) e_l; metric s^-2 times Euclidean."""
    eye = np.eye(2)

    def stacked(x, order):
        b = x.shape[:-1]
        sv = s(x)
        v = sv[..., None, None] * eye
        j = h = None
        if order >= 1:
            # J[l, i, j] = delta_li d_j s
            j = eye[:, :, None] * ds(x)[..., None, None, :]
        if order >= 2:
            h = np.broadcast_to(
                eye[:, :, None, None] * d2s(x)[..., None, None, :, :], b + (2, 2, 2, 2)
            ).copy()
        return v, j, h

    return Model(
        name=name,
        d=2,
        m=2,
        stacked=stacked,
        drift=drift,
        riemannian=True,
        validity_radius=validity,
        chart=chart,
        oracle={"curvature": curvature},
    )


def sphere2() -> Model:
    """Unit round sphere in stereographic coordinates from the north pole.

    X_l = (1+|x|^2)/2 e_l, so a = ((1+|x|^2)/2)^2 I. The origin is the south pole
    and the unit circle is the equator (where the chart is isometric). The
    drift -x(1+|x|^2)/4 makes the generator half the Laplace-Beltrami operator.
    The chart misses only the north pole (|x| -> infinity).
    """

    def s(x):
        return 0.5 * (1.0 + np.sum(x * x, -1))

    def drift_value(x):
        return -0.5 * s(x)[..., None] * x

    def drift_jac(x):
        return -0.5 * (s(x)[..., None, None] * np.eye(2) + x[..., :, None] * x[..., None, :])

    def drift_hess(x):
        # d_j d_k (-(1/2) s x_i) = -(1/2)(delta_ij x_k + delta_ik x_j + delta_jk x_i)
        e = np.eye(2)
        return -0.5 * (
            e[:, :, None] * x[..., None, None, :]
            + e[:, None, :] * x[..., None, :, None]
            + e[None, :, :] * x[..., :, None, None]
        )

    return _conformal(
        "sphere2",
        s,
        lambda x: x,
        lambda x: np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)),
        VectorField(drift_value, drift_jac, drift_hess, "X0"),
        1.0,
        None,
        "stereographic from the north pole; covers the sphere minus one point",
    )


def hyperbolic2() -> Model:
    """Hyperbolic plane (curvature -1) in the Poincare disk |x| < 1.

    X_l = (1-|x|^2)/2 e_l; drift x(1-|x|^2)/4 gives half the Laplace-Beltrami operator.
    """

    def s(x):
        return 0.5 * (1.0 - np.sum(x * x, -1))

    def drift_value(x):
        return 0.5 * s(x)[..., None] * x

    def drift_jac(x):
        return 0.5 * (s(x)[..., None, None] * np.eye(2) - x[..., :, None] * x[..., None, :])

    def drift_hess(x):
        e = np.eye(2)
        return -0.5 * (
            e[:, :, None] * x[..., None, None, :]
            + e[:, None, :] * x[..., None, :, None]
            + e[None, :, :] * x[..., :, None, None]
        )

    return _conformal(
        "hyperbolic2",
        s,
        lambda x: -x,
        lambda x: np.broadcast_to(-np.eye(2), x.shape[:-1] + (2, 2)),
        VectorField(drift_value, drift_jac, drift_hess, "X0"),
        -1.0,
        1.0,
        "Poincare disk; valid for |x| < 1",
    )


def heisenberg() -> Model:
    """X1 = d_x - (y/2) d_z, X2 = d_y + (x/2) d_z on R^3."""

    def stacked(x, order):
        b = x.shape[:-1]
        v = np.zeros(b + (2, 3))
        v[..., 0, 0] = 1.0
        v[..., 0, 2] = -0.5 * x[..., 1]
        v[..., 1, 1] = 1.0
        v[..., 1, 2] = 0.5 * x[..., 0]
        j = h = None
        if order >= 1:
            j = np.zeros(b + (2, 3, 3))
            j[..., 0, 2, 1] = -0.5
            j[..., 1, 2, 0] = 0.5
        if order >= 2:
            h = np.zeros(b + (2, 3, 3, 3))
        return v, j, h

    return Model("heisenberg", 3, 2, stacked, chart="exponential coordinates")


def grushin() -> Model:
    """X1 = d_x1, X2 = x1 d_x2; rank drops on the line x1 = 0."""

    def stacked(x, order):
        b = x.shape[:-1]
        v = np.zeros(b + (2, 2))
        v[..., 0, 0] = 1.0
        v[..., 1, 1] = x[..., 0]
        j = h = None
        if order >= 1:
            j = np.zeros(b + (2, 2, 2))
            j[..., 1, 1, 0] = 1.0
        if order >= 2:
            h = np.zeros(b + (2, 2, 2, 2))
        return v, j, h

    return Model("grushin", 2, 2, stacked, chart="identity")


def _flat_bump(x):
    """g(x) = exp(-1/|x|) with derivatives; all vanish at 0."""
    ax = np.abs(x)
    safe = ax > 1e-3  # below this exp(-1/|x|) underflows to zero
    xs = np.where(safe, x, 1.0)
    axs = np.abs(xs)
    g = np.where(safe, np.exp(-1.0 / axs), 0.0)
    g1 = np.where(safe, np.sign(xs) * g / xs**2, 0.0)
    g2 = np.where(safe, g / xs**4 - 2.0 * g / axs**3, 0.0)
    return g, g1, g2


def _sre(signed: bool) -> Model:
    def stacked(x, order):
        b = x.shape[:-1]
        g, g1, g2 = _flat_bump(x[..., 0])
        if signed:
            sg = np.sign(x[..., 0])
            g, g1, g2 = sg * g, sg * g1, sg * g2
        v = np.zeros(b + (3, 2))
        v[..., 0, 0] = x[..., 1]
        v[..., 1, 1] = 1.0
        v[..., 2, 0] = g
        j = h = None
        if order >= 1:
            j = np.zeros(b + (3, 2, 2))
            j[..., 0, 0, 1] = 1.0
            j[..., 2, 0, 0] = g1
        if order >= 2:
            h = np.zeros(b + (3, 2, 2, 2))
            h[..., 2, 0, 0, 0] = g2
        return v, j, h

    name = "sreY" if signed else "sreX"
    return Model(name, 2, 3, stacked, chart="identity")


def sreX() -> Model:
    """Frame y d_x, d_y, exp(-1/|x|) d_x."""
    return _sre(False)


def sreY() -> Model:
    """Frame y d_x, d_y, sgn(x) exp(-1/|x|) d_x; same diffusivity as sreX."""
    return _sre(True)


ZOO = {
    "euclidean": euclidean,
    "sphere2": sphere2,
    "hyperbolic2": hyperbolic2,
    "heisenberg": heisenberg,
    "grushin": grushin,
    "sreX": sreX,
    "sreY": sreY,
}


def get_model(name: str, d: int | None = None) -> Model:
    """Look up a zoo model by name; euclidean takes its dimension from d (default 2)."""
    if name not in ZOO:
        raise KeyError(f"unknown model {name!r}; choose from {sorted(ZOO)}")
    if name == "euclidean":
        return euclidean(d or 2)
    model = ZOO[name]()
    if d is not None and d != model.d:
        raise ValueError(f"model {name} has dimension {model.d}, got points of dimension {d}")
    return model
