"""Orthogonal-collocation two-point BVP engine over orbit segments.

A segment lives on rescaled time tau in [0, 1] with true duration T, so the
collocation equations read  dx/dtau = T * F(x, p)  at m Gauss points per mesh
subinterval.  The local representation is the degree-m polynomial through the
left mesh point and the m Gauss nodes of each subinterval; continuity rows tie
the polynomial's value at the right end to the next mesh unknown.  Mesh points
superconverge at order 2m.

A BvpProblem bundles one or more segments, a list of named scalar unknowns
(durations, parameters, phases, gap sizes) and a list of extra conditions
(boundary, integral, dense rows).  The Newton system must be square:
total conditions = dim * (number of segments) + number of scalars.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

__all__ = [
    "SolverOptions",
    "Basis",
    "OrbitSegment",
    "FieldBase",
    "CallableField",
    "Condition",
    "FDCondition",
    "LinearCondition",
    "BvpProblem",
    "NewtonResult",
    "NewtonDivergenceError",
    "SingularSystemError",
    "uniform_mesh",
    "segment_from_callable",
    "remesh",
    "adapt_mesh",
]


class NewtonDivergenceError(RuntimeError):
    def __init__(self, msg, residual=np.inf):
        super().__init__(msg)
        self.residual = residual


class SingularSystemError(RuntimeError):
    pass


@dataclass
class SolverOptions:
    N: int = 60
    m: int = 4
    newton_tol: float = 1e-9
    max_newton_iter: int = 12
    max_damping: int = 8
    adapt_mesh: bool = False

    def __post_init__(self):
        if not (2 <= self.m <= 7):
            raise ValueError("collocation order m must be in [2, 7]")
        if self.N < 4:
            raise ValueError("need at least 4 mesh intervals")


# ---------------------------------------------------------------- basis

_BASIS_CACHE: dict[int, "Basis"] = {}


class Basis:
    """Local Lagrange basis on nodes [0, g_1..g_m] of the unit interval."""

    def __init__(self, m: int):
        g, w = np.polynomial.legendre.leggauss(m)
        self.m = m
        self.gauss = 0.5 * (g + 1.0)
        self.weights = 0.5 * w  # integrate over [0, 1]
        self.nodes = np.concatenate([[0.0], self.gauss])
        # barycentric weights
        nd = self.nodes
        bw = np.ones(m + 1)
        for j in range(m + 1):
            for k in range(m + 1):
                if k != j:
                    bw[j] /= nd[j] - nd[k]
        self.bary = bw
        # derivative matrix at gauss points and value row at rho = 1
        self.D = np.array([[self._basis_deriv(k, r) for k in range(m + 1)]
                           for r in self.gauss])
        self.E = np.array([self._basis_val(k, 1.0) for k in range(m + 1)])

    def _basis_val(self, k: int, r: float) -> float:
        nd = self.nodes
        v = 1.0
        for j in range(len(nd)):
            if j != k:
                v *= (r - nd[j]) / (nd[k] - nd[j])
        return v

    def _basis_deriv(self, k: int, r: float) -> float:
        nd = self.nodes
        tot = 0.0
        for i in range(len(nd)):
            if i == k:
                continue
            term = 1.0 / (nd[k] - nd[i])
            for j in range(len(nd)):
                if j != k and j != i:
                    term *= (r - nd[j]) / (nd[k] - nd[j])
            tot += term
        return tot

    def eval_matrix(self, rho: np.ndarray) -> np.ndarray:
        """Basis values at local coordinates rho: shape (len(rho), m+1)."""
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        out = np.empty((rho.size, self.m + 1))
        for k in range(self.m + 1):
            v = np.ones_like(rho)
            for j in range(self.m + 1):
                if j != k:
                    v *= (rho - self.nodes[j]) / (self.nodes[k] - self.nodes[j])
            out[:, k] = v
        return out

    def deriv_matrix(self, rho: np.ndarray) -> np.ndarray:
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        out = np.zeros((rho.size, self.m + 1))
        for k in range(self.m + 1):
            for i in range(self.m + 1):
                if i == k:
                    continue
                term = np.ones_like(rho) / (self.nodes[k] - self.nodes[i])
                for j in range(self.m + 1):
                    if j != k and j != i:
                        term *= (rho - self.nodes[j]) / (self.nodes[k] - self.nodes[j])
                out[:, k] += term
        return out


def basis(m: int) -> Basis:
    if m not in _BASIS_CACHE:
        _BASIS_CACHE[m] = Basis(m)
    return _BASIS_CACHE[m]


def uniform_mesh(N: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, N + 1)


# ---------------------------------------------------------------- fields

class FieldBase:
    """Vector field with analytic Jacobian; pvals is a plain dict of parameters."""

    dim: int = 0

    def rhs(self, x: np.ndarray, pvals: dict) -> np.ndarray:
        raise NotImplementedError

    def jac(self, x: np.ndarray, pvals: dict) -> np.ndarray:
        raise NotImplementedError

    def dpar(self, x: np.ndarray, pvals: dict, name: str) -> np.ndarray:
        h = 1e-7 * max(1.0, abs(pvals[name]))
        up = dict(pvals); up[name] += h
        dn = dict(pvals); dn[name] -= h
        return (self.rhs(x, up) - self.rhs(x, dn)) / (2 * h)


class CallableField(FieldBase):
    def __init__(self, dim: int, rhs: Callable, jac: Callable, dpar: Callable | None = None):
        self.dim = dim
        self._rhs, self._jac, self._dpar = rhs, jac, dpar

    def rhs(self, x, pvals):
        return self._rhs(x, pvals)

    def jac(self, x, pvals):
        return self._jac(x, pvals)

    def dpar(self, x, pvals, name):
        if self._dpar is not None:
            return self._dpar(x, pvals, name)
        return super().dpar(x, pvals, name)


# ---------------------------------------------------------------- segments

@dataclass
class OrbitSegment:
    """Collocation representation of one orbit piece on tau in [0, 1]."""

    field: FieldBase
    mesh: np.ndarray  # (N+1,)
    m: int
    values: np.ndarray  # (N*(m+1)+1, dim) node values
    T: float  # true duration snapshot
    pvals: dict = dfield(default_factory=dict)  # parameter snapshot

    @property
    def N(self) -> int:
        return len(self.mesh) - 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.N * (self.m + 1) + 1

    def node_taus(self) -> np.ndarray:
        b = basis(self.m)
        h = np.diff(self.mesh)
        taus = (self.mesh[:-1, None] + h[:, None] * b.nodes[None, :]).ravel()
        return np.concatenate([taus, [self.mesh[-1]]])

    @property
    def start(self) -> np.ndarray:
        return self.values[0]

    @property
    def end(self) -> np.ndarray:
        return self.values[-1]

    def copy(self) -> "OrbitSegment":
        return OrbitSegment(self.field, self.mesh.copy(), self.m,
                            self.values.copy(), self.T, dict(self.pvals))

    def _locate(self, tau: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < -1e-12) or np.any(tau > 1.0 + 1e-12):
            raise ValueError("tau outside [0, 1]")
        tau = np.clip(tau, 0.0, 1.0)
        idx = np.clip(np.searchsorted(self.mesh, tau, side="right") - 1, 0, self.N - 1)
        h = self.mesh[idx + 1] - self.mesh[idx]
        rho = (tau - self.mesh[idx]) / h
        return idx, rho

    def _interval_values(self) -> np.ndarray:
        """(N, m+2, dim): each interval's nodes plus its right mesh point."""
        iv = np.empty((self.N, self.m + 2, self.dim))
        for i in range(self.N):
            lo = i * (self.m + 1)
            iv[i, :-1] = self.values[lo:lo + self.m + 1]
            iv[i, -1] = self.values[(i + 1) * (self.m + 1) if i + 1 < self.N
                                    else self.n_nodes - 1]
        return iv

    def interpolate(self, tau) -> np.ndarray:
        """Piecewise-polynomial state at tau (scalar or array); exact at the
        stored nodes."""
        scalar = np.ndim(tau) == 0
        idx, rho = self._locate(np.atleast_1d(tau))
        b = basis(self.m)
        out = np.empty((len(idx), self.dim))
        for j, (i, r) in enumerate(zip(idx, rho)):
            lo = i * (self.m + 1)
            if r == 0.0:
                out[j] = self.values[lo]
                continue
            if r == 1.0:
                out[j] = self.values[lo + self.m + 1 if i + 1 < self.N
                                     else self.n_nodes - 1]
                continue
            vals = self.values[lo:lo + self.m + 1]
            out[j] = b.eval_matrix(np.array([r]))[0] @ vals
        return out[0] if scalar else out

    def derivative(self, tau) -> np.ndarray:
        """d(state)/d(tau) of the collocation polynomial."""
        scalar = np.ndim(tau) == 0
        idx, rho = self._locate(np.atleast_1d(tau))
        b = basis(self.m)
        out = np.empty((len(idx), self.dim))
        for j, (i, r) in enumerate(zip(idx, rho)):
            lo = i * (self.m + 1)
            vals = self.values[lo:lo + self.m + 1]
            h = self.mesh[i + 1] - self.mesh[i]
            out[j] = (b.deriv_matrix(np.array([r]))[0] @ vals) / h
        return out[0] if scalar else out

    def monomial_coeffs(self) -> np.ndarray:
        """(N, m+1, dim) local monomial coefficients: x_i(rho) = sum_b rho^b C[i, b]."""
        b = basis(self.m)
        V = np.vander(b.nodes, self.m + 1, increasing=True)
        Vinv = np.linalg.inv(V)
        iv = self._interval_values()[:, :-1]  # (N, m+1, dim)
        return np.einsum("ab,ibd->iad", Vinv, iv)

    def collocation_residual(self) -> float:
        """Max norm of dx/dtau - T*F at the collocation points."""
        b = basis(self.m)
        h = np.diff(self.mesh)
        iv = self._interval_values()[:, :-1]  # (N, m+1, dim)
        xg = iv[:, 1:]  # gauss-node values
        F = self.field.rhs(xg, self.pvals)
        dx = np.einsum("jk,ikd->ijd", b.D, iv) / h[:, None, None]
        return float(np.max(np.abs(dx - self.T * F)))


def segment_from_callable(field: FieldBase, fn: Callable[[np.ndarray], np.ndarray],
                          mesh: np.ndarray, m: int, T: float,
                          pvals: dict | None = None) -> OrbitSegment:
    """Build a segment by sampling fn(tau) -> state at the collocation nodes."""
    N = len(mesh) - 1
    b = basis(m)
    h = np.diff(mesh)
    taus = np.concatenate([(mesh[:-1, None] + h[:, None] * b.nodes[None, :]).ravel(),
                           [mesh[-1]]])
    vals = np.asarray(fn(taus), dtype=float)
    if vals.shape[0] != len(taus):
        vals = vals.T
    return OrbitSegment(field, np.asarray(mesh, dtype=float), m,
                        np.ascontiguousarray(vals), float(T), dict(pvals or {}))


# ---------------------------------------------------------------- conditions

class Condition:
    """k scalar equations appended below the collocation rows."""

    size: int = 1

    def residual(self, ctx: "ProblemContext") -> np.ndarray:
        raise NotImplementedError

    def jac_rows(self, ctx: "ProblemContext") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows_local, cols_global, vals) triplets for this condition block."""
        raise NotImplementedError


class FDCondition(Condition):
    """Condition differentiated by finite differences over a declared support.

    depends: sequence of tokens ("start", iseg) | ("end", iseg) | ("scalar", name).
    fn(ctx) must be smooth in those variables.
    """

    def __init__(self, fn: Callable, depends: Sequence[tuple], size: int = 1,
                 fd_step: float = 1e-7):
        self.fn = fn
        self.depends = list(depends)
        self.size = size
        self.fd_step = fd_step

    def residual(self, ctx):
        return np.atleast_1d(np.asarray(self.fn(ctx), dtype=float))

    def jac_rows(self, ctx):
        cols_all, rows_all, vals_all = [], [], []
        r0 = self.residual(ctx)
        for token in self.depends:
            cols = ctx.columns_of(token)
            for c in cols:
                h = self.fd_step * max(1.0, abs(ctx.u[c]))
                old = ctx.u[c]
                ctx.u[c] = old + h
                rp = self.residual(ctx)
                ctx.u[c] = old - h
                rm = self.residual(ctx)
                ctx.u[c] = old
                dr = (rp - rm) / (2 * h)
                nz = np.nonzero(dr)[0]
                rows_all.extend(nz.tolist())
                cols_all.extend([c] * len(nz))
                vals_all.extend(dr[nz].tolist())
        return (np.array(rows_all, dtype=int), np.array(cols_all, dtype=int),
                np.array(vals_all, dtype=float))


class LinearCondition(Condition):
    """Row of explicit coefficients over the full unknown vector: w @ u = rhs."""

    size = 1

    def __init__(self, weights: np.ndarray, rhs: float):
        self.weights = np.asarray(weights, dtype=float)
        self.rhs_val = float(rhs)

    def residual(self, ctx):
        return np.array([self.weights @ ctx.u - self.rhs_val])

    def jac_rows(self, ctx):
        nz = np.nonzero(self.weights)[0]
        return (np.zeros(len(nz), dtype=int), nz, self.weights[nz])


# ---------------------------------------------------------------- problem

@dataclass
class NewtonResult:
    converged: bool
    iterations: int
    residual: float


class ProblemContext:
    """Read/write view of the unknown vector used by condition callbacks."""

    def __init__(self, problem: "BvpProblem", u: np.ndarray):
        self.problem = problem
        self.u = u

    def seg_values(self, i: int) -> np.ndarray:
        lo, n = self.problem._seg_offset[i], self.problem.segments[i].n_nodes
        d = self.problem.segments[i].dim
        return self.u[lo:lo + n * d].reshape(n, d)

    def seg_start(self, i: int) -> np.ndarray:
        return self.seg_values(i)[0]

    def seg_end(self, i: int) -> np.ndarray:
        return self.seg_values(i)[-1]

    def scalar(self, name: str) -> float:
        return float(self.u[self.problem._scalar_col[name]])

    def columns_of(self, token) -> np.ndarray:
        kind = token[0]
        if kind == "scalar":
            return np.array([self.problem._scalar_col[token[1]]])
        i = token[1]
        d = self.problem.segments[i].dim
        lo = self.problem._seg_offset[i]
        if kind == "start":
            return np.arange(lo, lo + d)
        if kind == "end":
            n = self.problem.segments[i].n_nodes
            return np.arange(lo + (n - 1) * d, lo + n * d)
        raise KeyError(token)


class BvpProblem:
    """Segments + scalars + conditions, solved by damped Newton on the
    square collocation system."""

    def __init__(self):
        self.segments: list[OrbitSegment] = []
        self._seg_T_binding: list[tuple] = []   # ("scalar", name) | ("fixed",)
        self._seg_par_binding: list[dict] = []  # param name -> scalar name
        self.scalars: dict[str, float] = {}
        self.conditions: list[Condition] = []

    # -- construction
    def add_scalar(self, name: str, value: float):
        if name in self.scalars:
            raise KeyError(f"duplicate scalar {name!r}")
        self.scalars[name] = float(value)

    def add_segment(self, seg: OrbitSegment, T: tuple | float = ("fixed",),
                    par_binding: dict | None = None) -> int:
        """T is ("scalar", name) to bind duration to a scalar unknown, or
        ("fixed",) to freeze seg.T."""
        self.segments.append(seg)
        if isinstance(T, (int, float)):
            seg.T = float(T)
            T = ("fixed",)
        self._seg_T_binding.append(tuple(T))
        self._seg_par_binding.append(dict(par_binding or {}))
        return len(self.segments) - 1

    def add_condition(self, cond: Condition):
        self.conditions.append(cond)

    # -- layout
    def _layout(self):
        self._seg_offset = []
        off = 0
        for seg in self.segments:
            self._seg_offset.append(off)
            off += seg.n_nodes * seg.dim
        self._scalar_col = {}
        for name in self.scalars:
            self._scalar_col[name] = off
            off += 1
        self.n_unknowns = off
        self.n_colloc_eqs = sum(seg.N * (seg.m + 1) * seg.dim for seg in self.segments)
        self.n_cond_eqs = sum(c.size for c in self.conditions)
        self.n_equations = self.n_colloc_eqs + self.n_cond_eqs

    def audit(self) -> tuple[int, int]:
        """(unknowns, equations); equal for a solvable square system."""
        self._layout()
        return self.n_unknowns, self.n_equations

    def pack(self) -> np.ndarray:
        self._layout()
        u = np.empty(self.n_unknowns)
        for i, seg in enumerate(self.segments):
            lo = self._seg_offset[i]
            u[lo:lo + seg.n_nodes * seg.dim] = seg.values.ravel()
        for name, col in self._scalar_col.items():
            u[col] = self.scalars[name]
        return u

    def unpack(self, u: np.ndarray):
        for i, seg in enumerate(self.segments):
            lo = self._seg_offset[i]
            seg.values = u[lo:lo + seg.n_nodes * seg.dim].reshape(seg.n_nodes, seg.dim).copy()
            kind = self._seg_T_binding[i]
            if kind[0] == "scalar":
                seg.T = float(u[self._scalar_col[kind[1]]])
            for pname, sname in self._seg_par_binding[i].items():
                seg.pvals[pname] = float(u[self._scalar_col[sname]])
        for name, col in self._scalar_col.items():
            self.scalars[name] = float(u[col])

    def _seg_T(self, i: int, u: np.ndarray) -> float:
        kind = self._seg_T_binding[i]
        if kind[0] == "scalar":
            return float(u[self._scalar_col[kind[1]]])
        return self.segments[i].T

    def _seg_pvals(self, i: int, u: np.ndarray) -> dict:
        pv = dict(self.segments[i].pvals)
        for pname, sname in self._seg_par_binding[i].items():
            pv[pname] = float(u[self._scalar_col[sname]])
        return pv

    # -- residual / jacobian
    def _gather(self, seg: OrbitSegment, vals: np.ndarray):
        """(N, m+1, d) interval node values and (N, d) right mesh values."""
        N, m, d = seg.N, seg.m, seg.dim
        main = vals[:N * (m + 1)].reshape(N, m + 1, d)
        right_idx = np.minimum(np.arange(1, N + 1) * (m + 1), seg.n_nodes - 1)
        return main, vals[right_idx]

    def residual(self, u: np.ndarray) -> np.ndarray:
        r = np.empty(self.n_equations)
        row = 0
        for i, seg in enumerate(self.segments):
            N, m, d = seg.N, seg.m, seg.dim
            b = basis(m)
            lo = self._seg_offset[i]
            vals = u[lo:lo + seg.n_nodes * d].reshape(seg.n_nodes, d)
            h = np.diff(seg.mesh)
            iv, right = self._gather(seg, vals)
            T = self._seg_T(i, u)
            pv = self._seg_pvals(i, u)
            F = seg.field.rhs(iv[:, 1:], pv)  # (N, m, d)
            dx = np.einsum("jk,ikd->ijd", b.D, iv) / h[:, None, None]
            rc = dx - T * F
            cont = np.einsum("k,ikd->id", b.E, iv) - right
            block = np.concatenate([rc, cont[:, None, :]], axis=1)  # (N, m+1, d)
            n = N * (m + 1) * d
            r[row:row + n] = block.ravel()
            row += n
        ctx = ProblemContext(self, u)
        for cond in self.conditions:
            r[row:row + cond.size] = cond.residual(ctx)
            row += cond.size
        return r

    def _seg_pattern(self, i: int, row0: int):
        """Static sparsity pattern (rows, cols) per value group for segment i."""
        seg = self.segments[i]
        N, m, d = seg.N, seg.m, seg.dim
        lo = self._seg_offset[i]
        node_of = np.arange(N)[:, None] * (m + 1) + np.arange(m + 1)[None, :]  # (N, m+1)
        right_node = np.minimum(np.arange(1, N + 1) * (m + 1), seg.n_nodes - 1)
        # rows of gauss eq (k, j, comp): row0 + ((k*(m+1)+j)*d + comp)
        gr = row0 + (np.arange(N)[:, None, None] * (m + 1)
                     + np.arange(m)[None, :, None]) * d + np.arange(d)[None, None, :]
        # D-group: (N, m, m+1, d): row gr broadcast over node index kk
        rows_D = np.broadcast_to(gr[:, :, None, :], (N, m, m + 1, d)).ravel()
        cols_D = np.broadcast_to((lo + node_of[:, None, :, None] * d
                                  + np.arange(d)[None, None, None, :]),
                                 (N, m, m + 1, d)).ravel()
        # Jf-group: (N, m, d, d): rows vary over cr, cols over cc at gauss node j
        rows_J = np.broadcast_to(gr[:, :, :, None], (N, m, d, d)).ravel()
        gauss_node = node_of[:, 1:]  # (N, m)
        cols_J = np.broadcast_to((lo + gauss_node[:, :, None, None] * d
                                  + np.arange(d)[None, None, None, :]),
                                 (N, m, d, d)).ravel()
        # continuity rows: (N, m+1 nodes + right, d)
        cr_ = row0 + (np.arange(N)[:, None, None] * (m + 1) + m) * d \
            + np.arange(d)[None, None, :]  # (N, 1, d) broadcastable
        rows_E = np.broadcast_to(cr_, (N, m + 1, d)).ravel()
        cols_E = (lo + node_of[:, :, None] * d + np.arange(d)[None, None, :]).ravel()
        rows_R = np.broadcast_to(cr_, (N, 1, d)).ravel()
        cols_R = (lo + right_node[:, None, None] * d
                  + np.arange(d)[None, None, :]).ravel()
        # scalar columns (T / params): rows = all gauss rows
        rows_T = gr.ravel()
        return {"rows_D": rows_D, "cols_D": cols_D, "rows_J": rows_J,
                "cols_J": cols_J, "rows_E": rows_E, "cols_E": cols_E,
                "rows_R": rows_R, "cols_R": cols_R, "rows_T": rows_T}

    def jacobian(self, u: np.ndarray) -> sp.csc_matrix:
        parts_r, parts_c, parts_v = [], [], []
        row0 = 0
        for i, seg in enumerate(self.segments):
            N, m, d = seg.N, seg.m, seg.dim
            b = basis(m)
            lo = self._seg_offset[i]
            vals = u[lo:lo + seg.n_nodes * d].reshape(seg.n_nodes, d)
            h = np.diff(seg.mesh)
            iv, _ = self._gather(seg, vals)
            T = self._seg_T(i, u)
            pv = self._seg_pvals(i, u)
            Xg = iv[:, 1:]
            F = seg.field.rhs(Xg, pv)
            Jf = seg.field.jac(Xg, pv)
            pat = self._seg_pattern(i, row0)
            # D-group values: D[j,kk]/h[k] tiled over comps
            vD = np.broadcast_to((b.D[None, :, :] / h[:, None, None])[..., None],
                                 (N, m, m + 1, d)).ravel()
            parts_r.append(pat["rows_D"]); parts_c.append(pat["cols_D"]); parts_v.append(vD)
            # Jf-group: -T * Jf
            parts_r.append(pat["rows_J"]); parts_c.append(pat["cols_J"])
            parts_v.append((-T * Jf).ravel())
            # continuity: E over nodes, -1 at right mesh node
            vE = np.broadcast_to(b.E[None, :, None], (N, m + 1, d)).ravel()
            parts_r.append(pat["rows_E"]); parts_c.append(pat["cols_E"]); parts_v.append(vE)
            parts_r.append(pat["rows_R"]); parts_c.append(pat["cols_R"])
            parts_v.append(np.full(N * d, -1.0))
            # T column
            if self._seg_T_binding[i][0] == "scalar":
                tc = self._scalar_col[self._seg_T_binding[i][1]]
                parts_r.append(pat["rows_T"])
                parts_c.append(np.full(N * m * d, tc))
                parts_v.append((-F).ravel())
            # free parameter columns
            for pname, sname in self._seg_par_binding[i].items():
                dp = seg.field.dpar(Xg, pv, pname)  # (N, m, d)
                pc = self._scalar_col[sname]
                parts_r.append(pat["rows_T"])
                parts_c.append(np.full(N * m * d, pc))
                parts_v.append((-T * dp).ravel())
            row0 += N * (m + 1) * d

        ctx = ProblemContext(self, u)
        for cond in self.conditions:
            rr, cc, vv = cond.jac_rows(ctx)
            parts_r.append(np.asarray(rr) + row0)
            parts_c.append(np.asarray(cc))
            parts_v.append(np.asarray(vv, dtype=float))
            row0 += cond.size
        rows = np.concatenate([np.asarray(x, dtype=np.int64) for x in parts_r])
        cols = np.concatenate([np.asarray(x, dtype=np.int64) for x in parts_c])
        vals_all = np.concatenate(parts_v)
        A = sp.coo_matrix((vals_all, (rows, cols)),
                          shape=(self.n_equations, self.n_unknowns))
        return A.tocsc()

    # -- solve
    def solve(self, opts: SolverOptions | None = None) -> NewtonResult:
        opts = opts or SolverOptions()
        nu, ne = self.audit()
        if nu != ne:
            raise ValueError(f"system not square: {nu} unknowns vs {ne} equations")
        u = self.pack()
        r = self.residual(u)
        rn = float(np.max(np.abs(r)))
        for it in range(opts.max_newton_iter):
            if rn <= opts.newton_tol:
                self.unpack(u)
                return NewtonResult(True, it, rn)
            A = self.jacobian(u)
            try:
                lu = splu(A)
            except RuntimeError as exc:
                raise SingularSystemError(f"collocation linearization singular: {exc}")
            du = lu.solve(r)
            if not np.all(np.isfinite(du)):
                raise SingularSystemError("linear solve returned non-finite step")
            lam = 1.0
            for _ in range(opts.max_damping + 1):
                r_new = self.residual(u - lam * du)
                rn_new = float(np.max(np.abs(r_new)))
                if rn_new <= rn or rn_new <= opts.newton_tol:
                    break
                lam *= 0.5
            else:
                raise NewtonDivergenceError(
                    f"damping failed at iteration {it}: residual {rn:.3e}", rn)
            u = u - lam * du
            r, rn = r_new, rn_new
        if rn <= opts.newton_tol:
            self.unpack(u)
            return NewtonResult(True, opts.max_newton_iter, rn)
        raise NewtonDivergenceError(
            f"Newton did not converge in {opts.max_newton_iter} iterations "
            f"(residual {rn:.3e})", rn)


# ---------------------------------------------------------------- meshing

def _monitor(seg: OrbitSegment) -> np.ndarray:
    """Per-interval density ~ |u^(m)|^(1/m) of the local polynomials (scaled
    per component); equidistributing it drives the local interpolation error
    toward uniformity."""
    N, m = seg.N, seg.m
    b = basis(m)
    h = np.diff(seg.mesh)
    scale = 1.0 + np.max(np.abs(seg.values), axis=0)  # per component
    lead = np.empty((N, seg.dim))
    fact = float(math.factorial(m))
    for k in range(N):
        lo = k * (m + 1)
        vals = seg.values[lo:lo + m + 1]
        # m-th derivative (constant) via divided differences on local nodes
        dd = vals.astype(float).copy()
        nd = b.nodes
        for order in range(1, m + 1):
            dd = (dd[1:] - dd[:-1]) / (nd[order:] - nd[:-order])[:, None]
        lead[k] = dd[0] * fact / (h[k] ** m) / scale
    g = np.max(np.abs(lead), axis=1)
    g = np.maximum(g, 1e-16 * max(g.max(), 1e-300)) ** (1.0 / m)
    return g


def adapt_mesh(seg: OrbitSegment, N_new: int | None = None) -> np.ndarray:
    """Equidistributing mesh for the segment's current solution."""
    N_new = N_new or seg.N
    g = _monitor(seg)
    h = np.diff(seg.mesh)
    cdf = np.concatenate([[0.0], np.cumsum(g * h)])
    cdf /= cdf[-1]
    targets = np.linspace(0.0, 1.0, N_new + 1)
    new_mesh = np.interp(targets, cdf, seg.mesh)
    new_mesh[0], new_mesh[-1] = 0.0, 1.0
    # guard against collapsed intervals
    for i in range(1, N_new + 1):
        if new_mesh[i] <= new_mesh[i - 1]:
            new_mesh[i] = new_mesh[i - 1] + 1e-12
    new_mesh /= new_mesh[-1]
    return new_mesh


def remesh(seg: OrbitSegment, N_new: int | None = None,
           mesh: np.ndarray | None = None) -> OrbitSegment:
    """Interpolate the segment onto an adapted (or given) mesh."""
    new_mesh = np.asarray(mesh, dtype=float) if mesh is not None else adapt_mesh(seg, N_new)
    return segment_from_callable(seg.field, lambda t: seg.interpolate(t),
                                 new_mesh, seg.m, seg.T, seg.pvals)
