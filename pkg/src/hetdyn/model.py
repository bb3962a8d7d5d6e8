"""Four-dimensional Atri intracellular-calcium model in travelling-wave form.

State is ``x = (c, v, c_t, n)``: calcium concentration, its derivative with
respect to the wave coordinate, total calcium, and the gating variable.  The
system is stored in explicit first-order form ``x' = F(x, p)``:

    c'   = v
    v'   = [s v - (alpha + k_f c^2/(c^2+phi1^2) n) (gamma (c_t + D v - s c)/s - c)
            + k_s c - eps (J - k_p c)] / D
    c_t' = eps (J - k_p c)
    n'   = [ (phi2/(phi2 + c) - n) / 2 ] / s

All functions are vectorized over leading axes and pure, so they are safe to
call concurrently.  The Jacobian is analytic; finite differences are used only
as a test oracle.
"""
from __future__ import annotations

from dataclasses import dataclass, replace, fields
from typing import Iterable

import numpy as np

__all__ = [
    "Parameters",
    "ACTIVE_PARAMS",
    "STATE_NAMES",
    "rhs",
    "jacobian",
    "rhs_param_derivative",
    "trace_jacobian",
    "equilibrium",
    "equilibrium_dJ",
    "DegenerateParameterError",
]

STATE_NAMES = ("c", "v", "c_t", "n")

#: parameters addressable by continuation routines
ACTIVE_PARAMS = ("J", "s")


class DegenerateParameterError(ValueError):
    """Raised when a closed form breaks down (vanishing bracket, zero divisor)."""


@dataclass(frozen=True)
class Parameters:
    """Model constants; defaults are the standard calcium-model values."""

    D: float = 25.0
    alpha: float = 0.05
    k_f: float = 20.0
    phi1: float = 2.0
    gamma: float = 5.0
    k_s: float = 20.0
    eps: float = 0.2
    k_p: float = 20.0
    phi2: float = 1.0
    J: float = 3.0
    s: float = 9.0

    def __post_init__(self):
        if self.D <= 0:
            raise ValueError(f"D must be positive, got {self.D}")
        if self.s == 0:
            raise ValueError("wave speed s must be nonzero")
        if self.phi1 <= 0 or self.phi2 <= 0 or self.k_p <= 0:
            raise ValueError("phi1, phi2, k_p must all be positive")

    def with_value(self, name: str, value: float) -> "Parameters":
        if name not in {f.name for f in fields(self)}:
            raise KeyError(f"unknown parameter {name!r}")
        return replace(self, **{name: float(value)})

    def get(self, name: str) -> float:
        return float(getattr(self, name))

    def as_dict(self) -> dict:
        return {f.name: float(getattr(self, f.name)) for f in fields(self)}


def _parts(x: np.ndarray):
    x = np.asarray(x, dtype=float)
    return x[..., 0], x[..., 1], x[..., 2], x[..., 3]


def rhs(x: np.ndarray, p: Parameters) -> np.ndarray:
    """Vector field F(x, p); shape (..., 4) -> (..., 4)."""
    c, v, ct, n = _parts(x)
    if np.any(p.phi2 + c == 0.0):
        raise ZeroDivisionError("phi2 + c vanished while evaluating the flux term")
    w = c * c / (c * c + p.phi1 * p.phi1)
    a = p.alpha + p.k_f * w * n
    b = p.gamma * (ct + p.D * v - p.s * c) / p.s - c
    out = np.empty(np.shape(c) + (4,))
    out[..., 0] = v
    out[..., 1] = (p.s * v - a * b + p.k_s * c - p.eps * (p.J - p.k_p * c)) / p.D
    out[..., 2] = p.eps * (p.J - p.k_p * c)
    out[..., 3] = 0.5 * (p.phi2 / (p.phi2 + c) - n) / p.s
    return out


def jacobian(x: np.ndarray, p: Parameters) -> np.ndarray:
    """Analytic dF/dx; shape (..., 4) -> (..., 4, 4)."""
    c, v, ct, n = _parts(x)
    den = c * c + p.phi1 * p.phi1
    w = c * c / den
    dw = 2.0 * c * p.phi1 * p.phi1 / (den * den)
    a = p.alpha + p.k_f * w * n
    b = p.gamma * (ct + p.D * v - p.s * c) / p.s - c
    out = np.zeros(np.shape(c) + (4, 4))
    out[..., 0, 1] = 1.0
    out[..., 1, 0] = (-p.k_f * n * dw * b + a * (p.gamma + 1.0)
                      + p.k_s + p.eps * p.k_p) / p.D
    out[..., 1, 1] = (p.s - a * p.gamma * p.D / p.s) / p.D
    out[..., 1, 2] = -a * p.gamma / (p.s * p.D)
    out[..., 1, 3] = -p.k_f * w * b / p.D
    out[..., 2, 0] = -p.eps * p.k_p
    out[..., 3, 0] = -0.5 * p.phi2 / ((p.phi2 + c) ** 2 * p.s)
    out[..., 3, 3] = -0.5 / p.s
    return out


def trace_jacobian(x: np.ndarray, p: Parameters) -> np.ndarray:
    """tr dF/dx, used for the Liouville product audit."""
    c, v, ct, n = _parts(x)
    w = c * c / (c * c + p.phi1 * p.phi1)
    a = p.alpha + p.k_f * w * n
    return (p.s - a * p.gamma * p.D / p.s) / p.D - 0.5 / p.s


def rhs_param_derivative(x: np.ndarray, p: Parameters, name: str) -> np.ndarray:
    """Analytic dF/d(name) for the continuation parameters J and s."""
    c, v, ct, n = _parts(x)
    out = np.zeros(np.shape(c) + (4,))
    if name == "J":
        out[..., 1] = -p.eps / p.D
        out[..., 2] = p.eps
    elif name == "s":
        w = c * c / (c * c + p.phi1 * p.phi1)
        a = p.alpha + p.k_f * w * n
        out[..., 1] = (v + a * p.gamma * (ct + p.D * v) / (p.s * p.s)) / p.D
        out[..., 3] = -0.5 * (p.phi2 / (p.phi2 + c) - n) / (p.s * p.s)
    else:
        raise KeyError(f"no analytic parameter derivative for {name!r}")
    return out


def equilibrium(p: Parameters) -> np.ndarray:
    """Closed-form equilibrium: v = 0, c = J/k_p, n from the gating balance,
    c_t from the force balance."""
    c = p.J / p.k_p
    n = p.phi2 / (p.phi2 + c)
    a = p.alpha + p.k_f * (c * c / (c * c + p.phi1 * p.phi1)) * n
    if abs(a) < 1e-12:
        raise DegenerateParameterError(
            f"flux bracket vanished at c = {c}: equilibrium closed form undefined")
    ct = p.s * c + (p.s / p.gamma) * (c + p.k_s * c / a)
    return np.array([c, 0.0, ct, n])


def equilibrium_dJ(p: Parameters) -> np.ndarray:
    """d(equilibrium)/dJ by central differences of the closed form."""
    h = 1e-7 * max(1.0, abs(p.J))
    return (equilibrium(p.with_value("J", p.J + h))
            - equilibrium(p.with_value("J", p.J - h))) / (2 * h)


class AtriField:
    """Adapter exposing the model to the collocation engine (dict parameters)."""

    dim = 4

    @staticmethod
    def _params(pvals: dict) -> Parameters:
        return Parameters(**pvals)

    def rhs(self, x, pvals):
        return rhs(x, self._params(pvals))

    def jac(self, x, pvals):
        return jacobian(x, self._params(pvals))

    def dpar(self, x, pvals, name):
        return rhs_param_derivative(x, self._params(pvals), name)


FIELD = AtriField()
