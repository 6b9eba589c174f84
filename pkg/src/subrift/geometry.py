"""Levi-Civita connection and curvature of the chart metric g = a^{-1} (Riemannian models).

Everything is assembled analytically from the frame values, Jacobians and
Hessians, so no finite differencing is involved:
    d_k a   = sum_l (d_k X_l) X_l^T + X_l (d_k X_l)^T
    d_k g   = -g (d_k a) g
    d_kl g  = g a_k g a_l g + g a_l g a_k g - g a_kl g
"""

from __future__ import annotations

import numpy as np

from .errors import NotRiemannianError
from .models import Model


def _metric_derivatives(model: Model, x: np.ndarray):
    v, j, h = model.frame(np.asarray(x, dtype=float), 2)
    a = np.einsum("...li,...lj->...ij", v, v)
    # da[..., k, i, j] = d_k a_ij
    dX = np.moveaxis(j, -1, -3)  # (..., k, l, i) = d_k X_l^i
    da = np.einsum("...kli,...lj->...kij", dX, v)
    da = da + np.swapaxes(da, -1, -2)
    # dda[..., k, m, i, j] = d_k d_m a_ij
    hX = np.moveaxis(h, (-2, -1), (-4, -3))  # (..., k, m, l, i)
    t1 = np.einsum("...kmli,...lj->...kmij", hX, v)
    t2 = np.einsum("...kli,...mlj->...kmij", dX, dX)
    dda = t1 + t2
    dda = dda + np.swapaxes(dda, -1, -2)
    ev = np.linalg.eigvalsh(a)
    if np.any(ev[..., 0] <= 1e-14 * np.maximum(ev[..., -1], 1e-300)):
        raise NotRiemannianError(f"{model.name}: diffusivity is not positive definite")
    g = np.linalg.inv(a)
    return a, g, da, dda


def christoffel(model: Model, x) -> np.ndarray:
    """Gamma[..., i, j, k] = Gamma^i_{jk}."""
    return _connection(model, x)[0]


def _connection(model: Model, x):
    a, g, da, dda = _metric_derivatives(model, x)
    # dg[..., k, i, j] = d_k g_ij
    dg = -np.einsum("...ip,...kpq,...qj->...kij", g, da, g)
    # lower Christoffel: Gl[..., m, j, k] = 1/2 (d_j g_mk + d_k g_mj - d_m g_jk)
    Gl = 0.5 * (
        np.einsum("...jmk->...mjk", dg) + np.einsum("...kmj->...mjk", dg) - dg
    )
    gamma = np.einsum("...im,...mjk->...ijk", a, Gl)
    # second derivatives of g: ddg[..., k, l, i, j]
    gak = np.einsum("...ip,...kpq->...kiq", g, da)  # g a_k
    term = np.einsum("...kip,...lpq,...qj->...klij", gak, gak, g)
    ddg = term + np.swapaxes(term, -3, -4) - np.einsum("...ip,...klpq,...qj->...klij", g, dda, g)
    # d_l of lower Christoffel: dGl[..., l, m, j, k]
    dGl = 0.5 * (
        np.einsum("...ljmk->...lmjk", ddg) + np.einsum("...lkmj->...lmjk", ddg) - ddg
    )
    dgamma = np.einsum("...lim,...mjk->...ijkl", da, Gl) + np.einsum("...im,...lmjk->...ijkl", a, dGl)
    return gamma, dgamma, g


def riemann(model: Model, x) -> np.ndarray:
    """R[..., i, j, k, l] = R^i_{jkl}, with R(d_k, d_l) d_j = R^i_{jkl} d_i."""
    G, dG, _ = _connection(model, x)
    r = np.einsum("...iljk->...ijkl", dG) - np.einsum("...ikjl->...ijkl", dG)
    r = r + np.einsum("...ikm,...mlj->...ijkl", G, G) - np.einsum("...ilm,...mkj->...ijkl", G, G)
    return r


def metric(model: Model, x) -> np.ndarray:
    a = np.einsum("...li,...lj->...ij", *(2 * (model.values(x),)))
    return np.linalg.inv(a)


def sectional_curvature(model: Model, x, u, v) -> float:
    R = riemann(model, x)
    g = metric(model, x)
    Ruv_v = np.einsum("ijkl,j,k,l->i", R, v, u, v)
    num = u @ g @ Ruv_v
    den = (u @ g @ u) * (v @ g @ v) - (u @ g @ v) ** 2
    return float(num / den)


def curvature_operator(model: Model, x, xdot) -> np.ndarray:
    """Matrix of v -> R(v, xdot) xdot, shape (..., d, d)."""
    R = riemann(model, x)
    return np.einsum("...ijkl,...j,...l->...ik", R, xdot, xdot)
