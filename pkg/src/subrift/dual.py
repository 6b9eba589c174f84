"""Second-order forward-mode differentiation with hyper-dual numbers.

A hyper-dual number a + b1*e1 + b2*e2 + b12*e1e2 with e1^2 = e2^2 = 0 carries
exact first derivatives in two seed directions and the mixed second derivative.
Components are numpy arrays, so a batch of points is differentiated at once.
User vector fields written with numpy ufuncs work unchanged.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def _chain(x: "HyperDual", f0, f1, f2) -> "HyperDual":
    # f(a + d) with derivatives f1 = f'(a), f2 = f''(a)
    return HyperDual(
        f0,
        f1 * x.b1,
        f1 * x.b2,
        f1 * x.b12 + f2 * x.b1 * x.b2,
    )


class HyperDual:
    __slots__ = ("a", "b1", "b2", "b12")
    __array_priority__ = 1000

    def __init__(self, a, b1=0.0, b2=0.0, b12=0.0):
        self.a = np.asarray(a, dtype=float)
        self.b1 = np.asarray(b1, dtype=float)
        self.b2 = np.asarray(b2, dtype=float)
        self.b12 = np.asarray(b12, dtype=float)

    @staticmethod
    def lift(v) -> "HyperDual":
        return v if isinstance(v, HyperDual) else HyperDual(v)

    def __repr__(self) -> str:
        return f"HyperDual({self.a!r}, {self.b1!r}, {self.b2!r}, {self.b12!r})"

    # arithmetic
    def __add__(self, o):
        o = HyperDual.lift(o)
        return HyperDual(self.a + o.a, self.b1 + o.b1, self.b2 + o.b2, self.b12 + o.b12)

    __radd__ = __add__

    def __neg__(self):
        return HyperDual(-self.a, -self.b1, -self.b2, -self.b12)

    def __pos__(self):
        return self

    def __sub__(self, o):
        return self + (-HyperDual.lift(o))

    def __rsub__(self, o):
        return HyperDual.lift(o) - self

    def __mul__(self, o):
        o = HyperDual.lift(o)
        return HyperDual(
            self.a * o.a,
            self.a * o.b1 + self.b1 * o.a,
            self.a * o.b2 + self.b2 * o.a,
            self.a * o.b12 + self.b1 * o.b2 + self.b2 * o.b1 + self.b12 * o.a,
        )

    __rmul__ = __mul__

    def reciprocal(self) -> "HyperDual":
        inv = 1.0 / self.a
        return _chain(self, inv, -inv * inv, 2.0 * inv**3)

    def __truediv__(self, o):
        return self * HyperDual.lift(o).reciprocal()

    def __rtruediv__(self, o):
        return HyperDual.lift(o) * self.reciprocal()

    def __pow__(self, n):
        if isinstance(n, HyperDual):
            return np.exp(n * np.log(self))
        n = float(n)
        if n == 0.0:
            return HyperDual(np.ones_like(self.a))
        if n == 1.0:
            return self
        if n == 2.0:
            return self * self
        a = self.a
        return _chain(self, a**n, n * a ** (n - 1), n * (n - 1) * a ** (n - 2))

    def __rpow__(self, base):
        return np.exp(self * np.log(float(base)))

    # comparisons act on the real part, enough for branch selection
    def __lt__(self, o):
        return self.a < HyperDual.lift(o).a

    def __le__(self, o):
        return self.a <= HyperDual.lift(o).a

    def __gt__(self, o):
        return self.a > HyperDual.lift(o).a

    def __ge__(self, o):
        return self.a >= HyperDual.lift(o).a

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        if ufunc in _BINARY:
            x, y = inputs
            return _BINARY[ufunc](x, y)
        if ufunc not in _UNARY:
            return NotImplemented
        (x,) = inputs
        return _UNARY[ufunc](HyperDual.lift(x))


def _sqrt(x):
    r = np.sqrt(x.a)
    return _chain(x, r, 0.5 / r, -0.25 / (r * x.a))


def _exp(x):
    e = np.exp(x.a)
    return _chain(x, e, e, e)


def _log(x):
    return _chain(x, np.log(x.a), 1.0 / x.a, -1.0 / x.a**2)


def _sin(x):
    s, c = np.sin(x.a), np.cos(x.a)
    return _chain(x, s, c, -s)


def _cos(x):
    s, c = np.sin(x.a), np.cos(x.a)
    return _chain(x, c, -s, -c)


def _tan(x):
    t = np.tan(x.a)
    sec2 = 1.0 + t * t
    return _chain(x, t, sec2, 2.0 * t * sec2)


def _sinh(x):
    s, c = np.sinh(x.a), np.cosh(x.a)
    return _chain(x, s, c, s)


def _cosh(x):
    s, c = np.sinh(x.a), np.cosh(x.a)
    return _chain(x, c, s, c)


def _tanh(x):
    t = np.tanh(x.a)
    s2 = 1.0 - t * t
    return _chain(x, t, s2, -2.0 * t * s2)


def _arctan(x):
    d = 1.0 / (1.0 + x.a**2)
    return _chain(x, np.arctan(x.a), d, -2.0 * x.a * d * d)


def _abs(x):
    s = np.sign(x.a)
    return _chain(x, np.abs(x.a), s, np.zeros_like(x.a))


def _square(x):
    return x * x


_UNARY = {
    np.sqrt: _sqrt,
    np.exp: _exp,
    np.log: _log,
    np.sin: _sin,
    np.cos: _cos,
    np.tan: _tan,
    np.sinh: _sinh,
    np.cosh: _cosh,
    np.tanh: _tanh,
    np.arctan: _arctan,
    np.absolute: _abs,
    np.square: _square,
    np.negative: lambda x: -x,
}

_BINARY = {
    np.add: lambda x, y: HyperDual.lift(x) + y,
    np.subtract: lambda x, y: HyperDual.lift(x) - y,
    np.multiply: lambda x, y: HyperDual.lift(x) * y,
    np.true_divide: lambda x, y: HyperDual.lift(x) / y,
    np.power: lambda x, y: HyperDual.lift(x) ** y,
}


FieldFn = Callable[[Sequence], Sequence]


def _component(v, shape) -> HyperDual:
    v = HyperDual.lift(v)
    return HyperDual(
        np.broadcast_to(v.a, shape),
        np.broadcast_to(v.b1, shape),
        np.broadcast_to(v.b2, shape),
        np.broadcast_to(v.b12, shape),
    )


def derivatives(fn: FieldFn, x: np.ndarray, d: int):
    """Value, Jacobian and Hessian of a componentwise field at points x.

    fn takes a length-d sequence of coordinates (arrays or hyper-duals) and
    returns a length-d sequence. x has shape (..., d). Returns arrays of shapes
    (..., d), (..., d, d) with jac[..., i, j] = d_j f_i, and (..., d, d, d) with
    hess[..., i, j, k] = d_j d_k f_i.
    """
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    val = np.zeros(shape + (d,))
    jac = np.zeros(shape + (d, d))
    hess = np.zeros(shape + (d, d, d))
    zeros = np.zeros(shape)
    ones = np.ones(shape)
    for j in range(d):
        for k in range(j, d):
            args = [
                HyperDual(
                    x[..., i],
                    ones if i == j else zeros,
                    ones if i == k else zeros,
                    zeros,
                )
                for i in range(d)
            ]
            out = [_component(c, shape) for c in fn(args)]
            for i, c in enumerate(out):
                if j == 0 and k == 0:
                    val[..., i] = c.a
                if k == j:
                    jac[..., i, j] = c.b1
                hess[..., i, j, k] = c.b12
                hess[..., i, k, j] = c.b12
    return val, jac, hess
