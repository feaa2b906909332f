import cmath
import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from shlfluct import conformal as cf

mp.mp.dps = 40


def mp_slit(x, z):
    """High-precision slit map, branch picked by Im >= 0 and sign(Re) on the axis."""
    w = mp.mpc(z) - x
    s = mp.sqrt(w * w - 1)
    if s.imag < 0 or (s.imag == 0 and s.real * w.real < 0):
        s = -s
    return x + s


def upper_points(draw_y=st.floats(1e-6, 1e4), draw_x=st.floats(-1e4, 1e4)):
    return st.builds(complex, draw_x, draw_y)


# ---------------------------------------------------------------------------
# the map itself


@pytest.mark.parametrize("y", [0.1, 1.0, 10.0, 1000.0])
def test_closed_form_on_imaginary_axis(y):
    got = cf.slit_apply(0.0, 1j * y)
    want = 1j * math.sqrt(y * y + 1)
    assert abs(got - want) <= 1e-12 * abs(want)


def test_slit_tip_and_real_axis():
    assert cf.slit_apply(0.0, 1e-15j) == pytest.approx(1j)
    assert cf.slit_apply(0.0, 1.0) == 0.0
    assert cf.slit_apply(3.0, 3.5) == pytest.approx(3.0 + 1j * math.sqrt(0.75))
    assert cf.slit_apply(0.0, 2.0) == pytest.approx(math.sqrt(3.0))
    assert cf.slit_apply(0.0, -2.0) == pytest.approx(-math.sqrt(3.0))


def test_far_field_values():
    assert cf.slit_apply(100.0, 1j) == pytest.approx(0.005 + 1.00005j, rel=1e-6)
    assert abs(cf.slit_increment(1e8, 1j) - 5e-9) < 1e-15


@settings(max_examples=300, deadline=None)
@given(x=st.floats(-50, 50), z=upper_points(st.floats(1e-8, 100), st.floats(-100, 100)))
def test_matches_high_precision_oracle(x, z):
    got = cf.slit_apply(x, z)
    want = complex(mp_slit(x, z))
    assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


@settings(max_examples=300, deadline=None)
@given(x=st.floats(-1e3, 1e3), z=upper_points())
def test_image_stays_in_upper_half_plane_and_moves_up(x, z):
    v = cf.slit_apply(x, z)
    assert v.imag >= z.imag
    assert abs(v - z) <= 1.0 + 1e-12


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-10, 10), u=st.floats(-10, 10))
def test_real_axis_goes_to_axis_or_slit(x, u):
    assume(u != x)
    v = cf.slit_apply(x, complex(u, 0.0))
    w = u - x
    if abs(w) > 1.0:
        assert v.imag == 0.0
        assert math.copysign(1.0, v.real - x) == math.copysign(1.0, w)
    elif abs(w) < 1.0:
        assert v.real == pytest.approx(x, abs=1e-12)
        assert 0.0 < v.imag <= 1.0


def test_increment_bound_on_a_million_inputs():
    rng = np.random.default_rng(1)
    n = 1_000_000
    x = rng.uniform(-1e3, 1e3, n)
    z = rng.uniform(-1e3, 1e3, n) + 1j * np.exp(rng.uniform(-12, 7, n))
    z[: n // 10] = x[: n // 10] + rng.uniform(-2, 2, n // 10) + 1j * rng.uniform(0, 1e-3, n // 10)
    inc = cf.increment_array(x, z)
    assert np.all(np.isfinite(inc))
    assert np.max(np.abs(inc)) <= 1.0 + 1e-12
    assert np.all(inc.imag >= 0.0)


@pytest.mark.parametrize("r", [1e3, 3e3, 1e4, 3e4, 1e5])
@pytest.mark.parametrize("angle", [0.01, 0.5, 1.3, 2.9])
def test_series_and_direct_routes_agree(r, angle):
    z = r * cmath.exp(1j * angle)
    a = cf.slit_increment_direct(0.0, z)
    b = cf.slit_increment_series(0.0, z)
    want = complex(mp_slit(0, z) - mp.mpc(z))
    assert abs(a - b) <= 1e-10 * abs(b)
    assert abs(b - want) <= 1e-12 * abs(want)


@settings(max_examples=200, deadline=None)
@given(x=st.floats(-20, 20), z=upper_points(st.floats(0.05, 50), st.floats(-50, 50)))
def test_derivative_matches_finite_differences(x, z):
    h = 1e-6 * max(1.0, abs(z - x))
    h = min(h, 0.25 * z.imag)
    fd = (cf.slit_apply(x, z + h) - cf.slit_apply(x, z - h)) / (2 * h)
    fd_i = (cf.slit_apply(x, z + 1j * h) - cf.slit_apply(x, z - 1j * h)) / (2j * h)
    d = cf.slit_derivative(x, z)
    scale = max(1.0, abs(d))
    assert abs(d - fd) <= 1e-6 * scale
    assert abs(d - fd_i) <= 1e-6 * scale


def test_derivative_far_field_uses_series():
    z = 5e3 + 2j
    assert cf.slit_derivative(0.0, z) == pytest.approx(complex(z / mp.sqrt(mp.mpc(z) ** 2 - 1)), rel=1e-14)


def test_domain_errors():
    with pytest.raises(cf.DomainError):
        cf.slit_apply(0.0, 1 - 1j)
    with pytest.raises(cf.DomainError):
        cf.slit_apply(2.5, 2.5)
    with pytest.raises(cf.DomainError):
        cf.slit_apply(0.0, complex(math.nan, 1.0))
    with pytest.raises(cf.DomainError):
        cf.slit_derivative(0.0, 0.5)


# ---------------------------------------------------------------------------
# vertical increment


def test_delta_bounds_on_random_pairs():
    rng = np.random.default_rng(4)
    zeta = np.exp(rng.uniform(-6, 6, 10_000))
    x = rng.uniform(-40, 40, 10_000)
    d = cf.delta_array(zeta, x)
    d0 = cf.delta_array(zeta, np.zeros_like(zeta))
    assert np.all(d >= 0.0)
    assert np.all(d <= d0)
    assert np.all(d0 <= 1.0 / (1.0 + zeta))


@given(zeta=st.floats(0, 1e3), x=st.floats(-1e3, 1e3))
def test_delta_scalar_matches_array_and_mpmath(zeta, x):
    assume(zeta > 0 or x != 0)
    d = cf.delta(zeta, x)
    assert d == cf.delta_array(np.array([zeta]), np.array([x]))[0]
    want = float((mp_slit(x, mp.mpc(0, zeta)) - mp.mpc(0, zeta)).imag)
    assert d == pytest.approx(want, rel=1e-9, abs=1e-15)


@pytest.mark.parametrize("zeta", [0.0, 1.0, 50.0])
def test_delta_integral_is_half_pi(zeta):
    assert cf.delta_integral(zeta) == pytest.approx(0.5 * math.pi, abs=1e-6)


# ---------------------------------------------------------------------------
# integrals


@pytest.mark.parametrize("y", [1.0, 5.0, 10.0])
def test_drift_integral_limit(y):
    d = cf.drift_integral(1j * y)
    assert abs(d - 0.5j * math.pi) <= 1e-6
    assert abs(d.real) <= 1e-8


def test_drift_integral_without_tail_misses_the_far_field():
    spec = cf.QuadratureSpec(half_width=1e3, tail_mode="none")
    d = cf.drift_integral(2j, spec)
    assert abs(d - 0.5j * math.pi) > 1e-4
    assert d.imag < 0.5 * math.pi


@pytest.mark.parametrize("y", [5.0, 10.0, 20.0, 100.0])
def test_squared_displacement(y):
    assert abs(cf.squared_displacement_integral(y) - math.pi / (4 * y)) <= 5.0 / y**3


@pytest.mark.parametrize("z, lo, hi", [(2j, -40, 40), (0.7 + 0.3j, -5, 9), (-3 + 5j, -100, 1), (0.2 + 1e-3j, -2, 2),
                                      (30 + 1j, -10, 10)])
def test_window_drift_closed_form_against_mpmath_quadrature(z, lo, hi):
    f = lambda x: mp_slit(x, z) - mp.mpc(z)  # noqa: E731
    pts = sorted({lo, hi, *(p for p in (z.real - 1, z.real, z.real + 1) if lo < p < hi)})
    want = complex(mp.quad(f, pts))
    got = cf.window_drift(z, lo, hi)
    assert abs(got - want) <= 1e-9 * max(1.0, abs(want))


@settings(max_examples=100, deadline=None)
@given(z=upper_points(st.floats(0.01, 30), st.floats(-30, 30)), m=st.floats(1e3, 1e7))
def test_window_drift_tends_to_half_pi_i(z, m):
    d = cf.window_drift(z, -m, m)
    # leading correction is O(|z|/m) after symmetric cancellation
    assert abs(d - 0.5j * math.pi) <= 4.0 * (abs(z) + 1) / m


def test_window_drift_additive():
    z = 0.3 + 0.8j
    assert cf.window_drift(z, -10, 3) + cf.window_drift(z, 3, 12) == pytest.approx(cf.window_drift(z, -10, 12), abs=1e-13)


def test_quadrature_spec_validation():
    with pytest.raises(ValueError):
        cf.QuadratureSpec(rel_tol=0.0)
    with pytest.raises(ValueError):
        cf.QuadratureSpec(half_width=1.0)
    with pytest.raises(ValueError):
        cf.QuadratureSpec(tail_mode="bogus")


def test_quadrature_error_carries_estimate():
    with pytest.raises(cf.QuadratureError) as info:
        cf._finish(1.0 + 0j, 1e-3, 1e-6, "test")
    assert info.value.error_estimate == 1e-3
    assert info.value.value == 1.0
