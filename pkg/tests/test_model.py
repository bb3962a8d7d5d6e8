"""Vector field, Jacobian and equilibrium checks against independent oracles."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import fsolve

from hetdyn import model

P0 = model.Parameters(J=3.02661, s=9.0)


def test_defaults_match_reference_constants():
    p = model.Parameters()
    assert (p.D, p.alpha, p.k_f, p.phi1, p.gamma) == (25.0, 0.05, 20.0, 2.0, 5.0)
    assert (p.k_s, p.eps, p.k_p, p.phi2) == (20.0, 0.2, 20.0, 1.0)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        model.Parameters(D=0.0)
    with pytest.raises(ValueError):
        model.Parameters(s=0.0)
    with pytest.raises(ValueError):
        model.Parameters(phi1=-1.0)


@given(st.floats(-2, 2), st.floats(-5, 5), st.floats(10, 50), st.floats(0, 1))
@settings(max_examples=50, deadline=None)
def test_cdot_equals_v_exactly(c, v, ct, n):
    f = model.rhs(np.array([c, v, ct, n]), P0)
    assert f[0] == v


def test_ctdot_zero_at_flux_balance():
    x = np.array([P0.J / P0.k_p, 1.3, 30.0, 0.4])
    assert model.rhs(x, P0)[2] == pytest.approx(0.0, abs=1e-15)


def test_rhs_reference_point():
    # independent hand evaluation at x=(0.15, 0, 3, 0.5), Table-like constants
    x = np.array([0.15, 0.0, 3.0, 0.5])
    f = model.rhs(x, P0)
    assert f[2] == pytest.approx(0.2 * (3.02661 - 3.0), abs=1e-15)
    # symbolic re-evaluation of each component
    c, v, ct, n = x
    w = c**2 / (c**2 + 4.0)
    a = 0.05 + 20.0 * w * n
    b = 5.0 * (ct + 25.0 * v - 9.0 * c) / 9.0 - c
    vdot = (9.0 * v - a * b + 20.0 * c - 0.2 * (3.02661 - 20.0 * c)) / 25.0
    ndot = 0.5 * (1.0 / (1.0 + c) - n) / 9.0
    assert f == pytest.approx(np.array([0.0, vdot, 0.2 * 0.02661, ndot]), rel=1e-14)


def test_jacobian_first_row_and_linear_entries():
    x = np.array([0.4, -1.0, 22.0, 0.7])
    Jm = model.jacobian(x, P0)
    assert np.array_equal(Jm[0], [0.0, 1.0, 0.0, 0.0])
    assert Jm[2, 0] == -P0.eps * P0.k_p == -4.0
    assert np.all(Jm[2, 1:] == 0.0)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(7)
    lo = np.array([0.0, -5.0, 20.0, 0.0])
    hi = np.array([2.0, 5.0, 45.0, 1.0])
    for _ in range(100):
        x = lo + rng.random(4) * (hi - lo)
        Jm = model.jacobian(x, P0)
        Jfd = np.empty((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = 1e-6
            Jfd[:, j] = (model.rhs(x + e, P0) - model.rhs(x - e, P0)) / 2e-6
        scale = np.maximum(np.abs(Jm).sum(axis=1, keepdims=True), 1.0)
        assert np.max(np.abs(Jm - Jfd) / scale) < 1e-6


def test_param_derivatives_match_fd():
    x = np.array([0.3, 0.8, 33.0, 0.6])
    for name in ("J", "s"):
        d = model.rhs_param_derivative(x, P0, name)
        h = 1e-6
        dfd = (model.rhs(x, P0.with_value(name, P0.get(name) + h))
               - model.rhs(x, P0.with_value(name, P0.get(name) - h))) / (2 * h)
        assert d == pytest.approx(dfd, rel=1e-6, abs=1e-9)


def test_equilibrium_closed_form():
    eq = model.equilibrium(P0)
    assert eq[1] == 0.0
    assert eq[0] == pytest.approx(0.1513305, abs=1e-12)
    assert np.max(np.abs(model.rhs(eq, P0))) <= 1e-12


def test_equilibrium_vs_newton_oracle():
    # independent damped-Newton (fsolve) start from a rough guess
    guess = np.array([0.15, 0.0, 35.0, 0.87])
    root = fsolve(lambda x: model.rhs(x, P0), guess, fprime=lambda x: model.jacobian(x, P0),
                  xtol=1e-13)
    eq = model.equilibrium(P0)
    assert np.max(np.abs(root - eq)) < 1e-10
    assert np.max(np.abs(model.rhs(eq, P0))) <= 1e-12


@given(st.floats(1.0, 8.0), st.floats(7.0, 11.0))
@settings(max_examples=30, deadline=None)
def test_equilibrium_residual_property(J, s):
    p = model.Parameters(J=J, s=s)
    eq = model.equilibrium(p)
    assert eq[1] == 0.0
    assert np.max(np.abs(model.rhs(eq, p))) <= 1e-11


def test_trace_matches_jacobian_trace():
    x = np.array([0.22, 0.1, 36.0, 0.8])
    assert model.trace_jacobian(x, P0) == pytest.approx(
        np.trace(model.jacobian(x, P0)), rel=1e-14)
