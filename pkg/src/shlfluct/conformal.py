"""Slit maps of the upper half-plane and the integrals built from them.

The slit map ``phi_x(z) = x + sqrt((z - x)**2 - 1)`` sends the upper
half-plane minus the vertical unit slit ``[x, x + i]`` back onto the
half-plane.  Throughout, ``w = z - x`` and ``s(w)`` denotes the root of
``w**2 - 1`` with nonnegative imaginary part; on the real axis the sign
is the one for which ``s(w) -> w`` at infinity.

The scalar kernels are compiled with numba so that the event-driven
simulation in :mod:`shlfluct.process` can call them from its inner loop.
The quadrature routines at the bottom are the independent oracle layer;
they never call the closed-form drift.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit
from scipy import integrate

# |w| beyond which increment and derivative switch to their Laurent series.
SERIES_RADIUS = 100.0
# |w| beyond which the root is evaluated as w * sqrt(1 - w**-2).
BRANCH_RADIUS = 2.0

_SERIES_R2 = SERIES_RADIUS * SERIES_RADIUS
_BRANCH_R2 = BRANCH_RADIUS * BRANCH_RADIUS


class DomainError(ValueError):
    """Raised for points outside the closed upper half-plane or at a branch point."""


class QuadratureError(RuntimeError):
    """Raised when adaptive quadrature cannot meet the requested tolerance."""

    def __init__(self, message: str, error_estimate: float, value: complex):
        super().__init__(f"{message} (achieved error estimate {error_estimate:.3e})")
        self.error_estimate = error_estimate
        self.value = value


# ---------------------------------------------------------------------------
# compiled scalar kernels


@njit(cache=True, nogil=True)
def _root(w):
    if w.real * w.real + w.imag * w.imag > _BRANCH_R2:
        return w * cmath.sqrt(1.0 - 1.0 / (w * w))
    s = cmath.sqrt(w * w - 1.0)
    if s.imag < 0.0 or (s.imag == 0.0 and s.real * w.real < 0.0):
        s = -s
    return s


@njit(cache=True, nogil=True)
def _increment_series(w):
    a2 = w.real * w.real + w.imag * w.imag
    r = complex(w.real / a2, -w.imag / a2)
    u = r * r
    # sqrt(1 - u) - 1 = -u/2 - u^2/8 - u^3/16 - 5u^4/128 - 7u^5/256 - 21u^6/1024
    return -r * (0.5 + u * (0.125 + u * (0.0625 + u * (0.0390625 + u * (0.02734375 + u * 0.0205078125)))))


@njit(cache=True, nogil=True)
def _increment_direct(w):
    return -1.0 / (_root(w) + w)


@njit(cache=True, nogil=True)
def _increment(w):
    if w.real * w.real + w.imag * w.imag > _SERIES_R2:
        return _increment_series(w)
    return _increment_direct(w)


@njit(cache=True, nogil=True)
def _derivative(w):
    a2 = w.real * w.real + w.imag * w.imag
    if a2 > _SERIES_R2:
        r = complex(w.real / a2, -w.imag / a2)
        u = r * r
        # (1 - u)^(-1/2)
        return 1.0 + u * (0.5 + u * (0.375 + u * (0.3125 + u * (0.2734375 + u * 0.24609375))))
    return w / _root(w)


@njit(cache=True, nogil=True)
def _antiderivative(u):
    # G with G'(u) = s(u) - u, analytic on the open half-plane and continuous
    # up to the real axis (log taken with arg in [0, pi]).
    p = u + _root(u)
    p = complex(p.real, p.imag + 0.0)
    return 0.5 * (u * _increment(u) - cmath.log(p))


@njit(cache=True, nogil=True)
def _window_drift(z, lo, hi):
    return _antiderivative(z - lo) - _antiderivative(z - hi)


@njit(cache=True, nogil=True)
def _increment_many(x, z):
    out = np.empty(x.shape[0], dtype=np.complex128)
    for k in range(x.shape[0]):
        out[k] = _increment(z[k] - x[k])
    return out


@njit(cache=True, nogil=True)
def _delta_many(zeta, x):
    out = np.empty(x.shape[0])
    for k in range(x.shape[0]):
        out[k] = _increment(complex(-x[k], zeta[k])).imag
    return out


# ---------------------------------------------------------------------------
# public pointwise API


def _check_point(x: float, z: complex) -> complex:
    z = complex(z)
    if not (math.isfinite(z.real) and math.isfinite(z.imag) and math.isfinite(x)):
        raise DomainError(f"non-finite input x={x!r}, z={z!r}")
    if z.imag < 0.0:
        raise DomainError(f"z={z!r} lies below the real axis")
    if z.imag == 0.0 and z.real == x:
        raise DomainError(f"z={z!r} is the branch point of the slit at x={x!r}")
    return z


def slit_apply(x: float, z: complex) -> complex:
    """Evaluate the slit map ``phi_x(z)`` on the closed upper half-plane."""
    z = _check_point(x, z)
    return x + _root(z - x)


def slit_increment(x: float, z: complex) -> complex:
    """Return ``phi_x(z) - z`` without cancellation, also for large ``|z - x|``.

    Uses ``phi_x(z) - z = -1 / (s(w) + w)``; beyond ``SERIES_RADIUS`` the
    Laurent series ``-1/(2w) - 1/(8w^3) - ...`` is summed instead.  The
    result always has modulus at most 1.
    """
    z = _check_point(x, z)
    return _increment(z - x)


def slit_increment_direct(x: float, z: complex) -> complex:
    z = _check_point(x, z)
    return _increment_direct(z - x)


def slit_increment_series(x: float, z: complex) -> complex:
    z = _check_point(x, z)
    return _increment_series(z - x)


def slit_derivative(x: float, z: complex) -> complex:
    """Derivative ``phi_x'(z) = (z - x) / s(z - x)`` for ``Im z > 0``."""
    z = complex(z)
    if not z.imag > 0.0:
        raise DomainError(f"derivative needs Im z > 0, got z={z!r}")
    return _derivative(_check_point(x, z) - x)


def delta(zeta: float, x: float) -> float:
    """Vertical gain ``Im(phi_x(i zeta) - i zeta)`` of a point at height ``zeta``."""
    if zeta < 0.0:
        raise DomainError(f"zeta must be >= 0, got {zeta!r}")
    return slit_increment(x, complex(0.0, zeta)).imag


def window_drift(z: complex, lo: float, hi: float) -> complex:
    """Closed form of ``int_lo^hi (phi_x(z) - z) dx``.

    This is the per-unit-time compensator of a point at ``z`` when arrivals
    are restricted to ``[lo, hi]``.  As the window grows symmetrically about
    ``Re z`` it tends to ``i*pi/2``.
    """
    z = complex(z)
    if z.imag < 0.0:
        raise DomainError(f"z={z!r} lies below the real axis")
    if not lo < hi:
        raise ValueError("window needs lo < hi")
    return _window_drift(z, float(lo), float(hi))


def increment_array(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Vectorised :func:`slit_increment` (no domain checks)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    z = np.ascontiguousarray(np.broadcast_to(z, x.shape), dtype=np.complex128)
    return _increment_many(x, z)


def delta_array(zeta: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    zeta = np.ascontiguousarray(np.broadcast_to(zeta, x.shape), dtype=np.float64)
    return _delta_many(zeta, x)


# ---------------------------------------------------------------------------
# quadrature oracles


class TailMode(str, Enum):
    NONE = "none"
    SERIES = "series"


@dataclass(frozen=True)
class QuadratureSpec:
    half_width: float = 1.0e6
    rel_tol: float = 1.0e-10
    tail_mode: TailMode = TailMode.SERIES

    def __post_init__(self):
        if not 0.0 < self.rel_tol < 1.0:
            raise ValueError(f"rel_tol must lie in (0, 1), got {self.rel_tol}")
        if not self.half_width >= 2.0:
            raise ValueError(f"half_width must be >= 2, got {self.half_width}")
        object.__setattr__(self, "tail_mode", TailMode(self.tail_mode))


def _breakpoints(center: float, half_width: float) -> list[float]:
    # Dense near the slit's branch points, geometric outwards.
    pts = {-half_width, half_width}
    for off in (-2.0, -1.0, 0.0, 1.0, 2.0):
        pts.add(center + off)
    step = 4.0
    while step < 2.0 * half_width:
        pts.add(center - step)
        pts.add(center + step)
        step *= 4.0
    return sorted(p for p in pts if -half_width <= p <= half_width)


def _piecewise_quad(f, edges: list[float], rel_tol: float) -> tuple[float, float]:
    total = 0.0
    err = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, e = integrate.quad(f, a, b, epsabs=0.0, epsrel=rel_tol * 1e-2, limit=200)
        total += val
        err += e
    return total, err


def _log_lower(v: complex) -> complex:
    # log on the closed lower half-plane, arg in [-pi, 0]
    c = v.conjugate()
    return cmath.log(complex(c.real, c.imag + 0.0)).conjugate()


def _drift_tail(z: complex, half_width: float) -> complex:
    # int_{|x|>X} of the first two Laurent terms of phi_x(z) - z
    X = half_width
    lead = 0.5 * (_log_lower(-X - z) - _log_lower(X - z) + 1j * math.pi)
    second = 1.0 / (16.0 * (X - z) ** 2) - 1.0 / (16.0 * (-X - z) ** 2)
    return lead + second


def _finish(value, err: float, rel_tol: float, what: str):
    if not err <= rel_tol * max(abs(value), 1e-300):
        raise QuadratureError(f"{what}: tolerance {rel_tol:g} not reached", err, value)
    return value


def drift_integral(z: complex, spec: QuadratureSpec = QuadratureSpec()) -> complex:
    """Adaptive quadrature of ``int (phi_x(z) - z) dx`` over ``|x| <= half_width``.

    With ``tail_mode='series'`` the contribution of ``|x| > half_width`` is
    added from the Laurent expansion, so the result approximates the full
    line integral ``i*pi/2``.
    """
    z = complex(z)
    if not z.imag > 0.0:
        raise DomainError(f"drift integral needs Im z > 0, got z={z!r}")
    edges = _breakpoints(z.real, spec.half_width)
    re, err_re = _piecewise_quad(lambda x: _increment(z - x).real, edges, spec.rel_tol)
    im, err_im = _piecewise_quad(lambda x: _increment(z - x).imag, edges, spec.rel_tol)
    value = complex(re, im)
    if spec.tail_mode is TailMode.SERIES:
        value += _drift_tail(z, spec.half_width)
    return _finish(value, math.hypot(err_re, err_im), spec.rel_tol, "drift integral")


def squared_displacement_integral(y: float, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """``int |phi_x(iy) - iy|^2 dx`` over the real line; close to ``pi/(4y)`` for large y."""
    if not y > 0.0:
        raise DomainError(f"y must be > 0, got {y!r}")
    z = complex(0.0, y)

    def f(x):
        d = _increment(z - x)
        return d.real * d.real + d.imag * d.imag

    value, err = _piecewise_quad(f, _breakpoints(0.0, spec.half_width), spec.rel_tol)
    if spec.tail_mode is TailMode.SERIES:
        value += math.atan2(y, spec.half_width) / (2.0 * y)
    return _finish(value, err, spec.rel_tol, "squared displacement integral")


def delta_integral(zeta: float, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """``int Delta(zeta, x) dx`` over the real line (equals pi/2 for every zeta)."""
    if zeta < 0.0:
        raise DomainError(f"zeta must be >= 0, got {zeta!r}")
    z = complex(0.0, zeta)
    value, err = _piecewise_quad(
        lambda x: _increment(z - x).imag, _breakpoints(0.0, spec.half_width), spec.rel_tol
    )
    if spec.tail_mode is TailMode.SERIES and zeta > 0.0:
        value += _drift_tail(z, spec.half_width).imag
    return _finish(value, err, spec.rel_tol, "delta integral")
