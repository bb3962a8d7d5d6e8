"""Periodic-orbit BVP formulation, monodromy and Floquet bundles.

A periodic orbit is one collocation segment over a single period with
x(0) = x(1), the duration T as a free scalar, and an integral phase condition
against a reference segment.  Monodromy is accumulated per mesh interval by
high-accuracy variational integration along the collocation interpolant, which
keeps the extreme multiplier spread of the saddle orbits manageable; bundle
directions at every collocation node come from eigenvectors of the cyclically
rotated interval products.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from . import bvp

__all__ = [
    "PeriodicOrbit",
    "FloquetData",
    "periodicity_condition",
    "phase_condition_row",
    "solve_periodic",
    "start_from_hopf",
    "monodromy",
    "BundleError",
]


class BundleError(ValueError):
    """Requested Floquet bundle does not exist for this orbit."""


# ---------------------------------------------------------------- conditions

def periodicity_condition(iseg: int = 0, dim: int = 4) -> bvp.Condition:
    return bvp.FDCondition(lambda ctx: ctx.seg_start(iseg) - ctx.seg_end(iseg),
                           depends=[("start", iseg), ("end", iseg)], size=dim)


def phase_condition_row(problem: bvp.BvpProblem, iseg: int,
                        ref: bvp.OrbitSegment) -> bvp.LinearCondition:
    """Integral phase condition  int <x - x_ref, x_ref'> dtau = 0  as an
    explicit row over the Gauss-node unknowns of segment iseg."""
    problem._layout()
    seg = problem.segments[iseg]
    b = bvp.basis(seg.m)
    h = np.diff(seg.mesh)
    w = np.zeros(problem.n_unknowns)
    rhs_val = 0.0
    lo = problem._seg_offset[iseg]
    for i in range(seg.N):
        taus = seg.mesh[i] + h[i] * b.gauss
        xr = ref.interpolate(taus)
        dxr = ref.derivative(taus)
        for j in range(seg.m):
            node = i * (seg.m + 1) + 1 + j
            quad = h[i] * b.weights[j]
            w[lo + node * seg.dim: lo + (node + 1) * seg.dim] = quad * dxr[j]
            rhs_val += quad * float(xr[j] @ dxr[j])
    return bvp.LinearCondition(w, rhs_val)


# ---------------------------------------------------------------- data types

@dataclass
class FloquetData:
    multipliers: np.ndarray          # complex, sorted by descending modulus
    trivial_index: int
    monodromy_matrix: np.ndarray     # at phase 0
    right_vectors: np.ndarray        # (dim, dim) columns matched to multipliers
    left_vectors: np.ndarray         # (dim, dim) columns matched to multipliers
    liouville: float                 # exp(int tr J dt)
    node_bundles: dict = dfield(default_factory=dict)  # mult index -> (n_nodes, dim)
    _segment: "bvp.OrbitSegment | None" = None

    @property
    def nontrivial(self) -> np.ndarray:
        keep = [i for i in range(len(self.multipliers)) if i != self.trivial_index]
        return self.multipliers[keep]

    def n_unstable(self) -> int:
        return int(np.sum(np.abs(self.nontrivial) > 1.0))

    def index_for(self, which: str) -> int:
        """Map a bundle name to a multiplier index.

        'u'/'uu'/'weak-u' address the unstable set (|mult| > 1) ordered by
        descending modulus; 's'/'ss'/'weak-s' the stable set (|mult| < 1) by
        descending modulus, so 'weak-s' is the slowest contraction.
        """
        mods = np.abs(self.multipliers)
        unstable = [i for i in range(len(mods))
                    if i != self.trivial_index and mods[i] > 1.0]
        stable = [i for i in range(len(mods))
                  if i != self.trivial_index and mods[i] < 1.0]
        if which == "trivial":
            return self.trivial_index
        if which in ("u", "uu", "weak-u"):
            if not unstable:
                raise BundleError(f"no unstable bundle on this orbit ({which!r})")
            if which == "uu":
                if len(unstable) < 2:
                    raise BundleError("'uu' needs at least two unstable multipliers")
                return unstable[0]
            if which == "weak-u":
                return unstable[-1]
            # 'u': the unique unstable one if simple, else the weak one
            return unstable[0] if len(unstable) == 1 else unstable[-1]
        if which in ("s", "ss", "weak-s"):
            if not stable:
                raise BundleError(f"no stable bundle on this orbit ({which!r})")
            if which == "ss":
                if len(stable) < 2:
                    raise BundleError("'ss' needs at least two stable multipliers")
                return stable[-1]
            if which == "weak-s":
                return stable[0]
            return stable[0] if len(stable) == 1 else stable[0]
        raise KeyError(f"unknown bundle name {which!r}")

    def multiplier(self, which: str) -> float:
        return float(np.real(self.multipliers[self.index_for(which)]))

    def bundle_by_index(self, idx: int, tau) -> np.ndarray:
        if idx not in self.node_bundles:
            raise BundleError(f"bundle for multiplier index {idx} not available")
        vecs = self.node_bundles[idx]
        seg = self._segment
        carrier = bvp.OrbitSegment(seg.field, seg.mesh, seg.m, vecs, seg.T, seg.pvals)
        scalar = np.ndim(tau) == 0
        taus = np.atleast_1d(np.asarray(tau, dtype=float)) % 1.0
        out = carrier.interpolate(taus)
        out = out / np.linalg.norm(out, axis=-1, keepdims=True)
        return out[0] if scalar else out

    def bundle(self, which: str, tau) -> np.ndarray:
        """Unit bundle direction(s) transported to phase tau (scalar/array)."""
        idx = self.index_for(which)
        if idx not in self.node_bundles:
            raise BundleError(f"bundle {which!r} not available (complex multiplier?)")
        vecs = self.node_bundles[idx]
        seg = self._segment
        carrier = bvp.OrbitSegment(seg.field, seg.mesh, seg.m, vecs, seg.T, seg.pvals)
        scalar = np.ndim(tau) == 0
        taus = np.atleast_1d(np.asarray(tau, dtype=float)) % 1.0
        out = carrier.interpolate(taus)
        out = out / np.linalg.norm(out, axis=-1, keepdims=True)
        return out[0] if scalar else out


@dataclass
class PeriodicOrbit:
    segment: bvp.OrbitSegment
    pvals: dict
    floquet: FloquetData | None = None

    @property
    def T(self) -> float:
        return float(self.segment.T)

    def point(self, phase) -> np.ndarray:
        return self.segment.interpolate(np.asarray(phase) % 1.0)

    def tangent(self, phase) -> np.ndarray:
        """Phase derivative d(point)/d(phase) = T * F."""
        return self.segment.derivative(np.asarray(phase) % 1.0)

    def amplitude(self) -> float:
        return float(np.max(self.segment.values, axis=0)[0]
                     - np.min(self.segment.values, axis=0)[0])

    def copy(self) -> "PeriodicOrbit":
        return PeriodicOrbit(self.segment.copy(), dict(self.pvals), self.floquet)


# ----------------------------------------------------------------- solving

def solve_periodic(guess: bvp.OrbitSegment, pvals: dict,
                   opts: bvp.SolverOptions | None = None,
                   phase_ref: bvp.OrbitSegment | None = None,
                   adapt_rounds: int = 0,
                   with_floquet: bool = False) -> PeriodicOrbit:
    """Converge a periodic orbit from a guessed segment at fixed parameters."""
    opts = opts or bvp.SolverOptions()
    seg = guess.copy()
    seg.pvals = dict(pvals)
    ref = (phase_ref or guess).copy()
    for round_ in range(adapt_rounds + 1):
        prob = bvp.BvpProblem()
        prob.add_scalar("T", seg.T)
        prob.add_segment(seg, T=("scalar", "T"))
        prob.add_condition(periodicity_condition(0, seg.dim))
        prob.add_condition(phase_condition_row(prob, 0, ref))
        prob.solve(opts)
        if round_ < adapt_rounds:
            seg = bvp.remesh(seg)
    po = PeriodicOrbit(seg, dict(pvals))
    if po.amplitude() < 1e-8:
        raise bvp.NewtonDivergenceError("orbit collapsed to an equilibrium")
    if with_floquet:
        po.floquet = monodromy(po)
    return po


def start_from_hopf(field, pvals: dict, x_eq: np.ndarray, omega: float,
                    eigvec: np.ndarray, free_param: str,
                    eq_of_param: Callable[[dict], np.ndarray],
                    amplitude: float = 1e-3,
                    opts: bvp.SolverOptions | None = None) -> PeriodicOrbit:
    """Small-amplitude orbit near a Hopf point, pinned to the given amplitude
    in eigenplane coordinates with the bifurcation parameter free."""
    opts = opts or bvp.SolverOptions()
    q = eigvec / np.max(np.abs(eigvec))
    qr, qi = np.real(q), np.imag(q)

    def loop(taus):
        ph = 2 * np.pi * taus
        return (x_eq[None, :] + amplitude * (np.cos(ph)[:, None] * qr[None, :]
                                             - np.sin(ph)[:, None] * qi[None, :]))

    seg = bvp.segment_from_callable(field, loop, bvp.uniform_mesh(opts.N), opts.m,
                                    2 * np.pi / abs(omega), dict(pvals))
    prob = bvp.BvpProblem()
    prob.add_scalar("T", seg.T)
    prob.add_scalar(free_param, pvals[free_param])
    prob.add_segment(seg, T=("scalar", "T"), par_binding={free_param: free_param})
    prob.add_condition(periodicity_condition(0, seg.dim))
    qrn = qr / np.linalg.norm(qr)
    qin = qi / np.linalg.norm(qi)

    def anchor(ctx):
        eq = eq_of_param({**pvals, free_param: ctx.scalar(free_param)})
        return (ctx.seg_start(0) - eq) @ qin

    def amp_pin(ctx):
        eq = eq_of_param({**pvals, free_param: ctx.scalar(free_param)})
        return (ctx.seg_start(0) - eq) @ qrn - amplitude * float(qr @ qrn)

    prob.add_condition(bvp.FDCondition(anchor, depends=[("start", 0), ("scalar", free_param)]))
    prob.add_condition(bvp.FDCondition(amp_pin, depends=[("start", 0), ("scalar", free_param)]))
    prob.solve(opts)
    out_pvals = {**pvals, free_param: prob.scalars[free_param]}
    seg.pvals = dict(out_pvals)
    return PeriodicOrbit(seg, out_pvals)


# ---------------------------------------------------------------- monodromy

def _interval_transitions(po: PeriodicOrbit, rtol: float = 1e-12,
                          atol: float = 1e-14):
    """Transition matrices of the variational flow over each mesh interval,
    plus transports to the interior collocation nodes (high accuracy)."""
    seg = po.segment
    field, pv, T = seg.field, seg.pvals, seg.T
    b = bvp.basis(seg.m)
    coeffs = seg.monomial_coeffs()
    d = seg.dim
    A_list = np.empty((seg.N, d, d))
    node_transport = np.empty((seg.N, seg.m, d, d))
    I = np.eye(d).ravel()
    powers = np.arange(seg.m + 1)
    for i in range(seg.N):
        h = seg.mesh[i + 1] - seg.mesh[i]
        C = coeffs[i]

        def var(rho, Y, _C=C, _h=h):
            x = (rho ** powers) @ _C
            A = (T * _h) * field.jac(x, pv)
            return (A @ Y.reshape(d, d)).ravel()

        r = solve_ivp(var, (0.0, 1.0), I, method="DOP853", rtol=rtol, atol=atol,
                      dense_output=True)
        if r.status != 0:
            raise RuntimeError(f"variational integration failed on interval {i}")
        A_list[i] = r.y[:, -1].reshape(d, d)
        for j, rho in enumerate(b.gauss):
            node_transport[i, j] = r.sol(rho).reshape(d, d)
    return A_list, node_transport


def _interval_transitions_fast(po: PeriodicOrbit, steps: int = 64):
    """Batched fixed-step RK4 for the interval transitions; adequate for
    stability summaries and test functions along branches."""
    seg = po.segment
    field, pv, T = seg.field, seg.pvals, seg.T
    d = seg.dim
    coeffs = seg.monomial_coeffs()  # (N, m+1, d)
    h = np.diff(seg.mesh)
    powers = np.arange(seg.m + 1)

    def A_at(rho):  # (N, d, d) at local coordinate rho for all intervals
        x = np.einsum("b,ibd->id", rho ** powers, coeffs)
        return (T * h)[:, None, None] * field.jac(x, pv)

    Y = np.broadcast_to(np.eye(d), (seg.N, d, d)).copy()
    dt = 1.0 / steps
    for k in range(steps):
        r0 = k * dt
        k1 = A_at(r0) @ Y
        k2 = A_at(r0 + 0.5 * dt) @ (Y + 0.5 * dt * k1)
        k3 = A_at(r0 + 0.5 * dt) @ (Y + 0.5 * dt * k2)
        k4 = A_at(r0 + dt) @ (Y + dt * k3)
        Y = Y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return Y


def multipliers_fast(po: PeriodicOrbit, steps: int = 64) -> np.ndarray:
    """Floquet multipliers only, by the batched fixed-step variational flow."""
    A_list = _interval_transitions_fast(po, steps)
    d = po.segment.dim
    M = np.eye(d)
    for i in range(po.segment.N):
        M = A_list[i] @ M
    lam = np.linalg.eigvals(M)
    return lam[np.argsort(-np.abs(lam))]


def _align(vecs: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return vecs if float(vecs @ ref) >= 0.0 else -vecs


def monodromy(po: PeriodicOrbit, rtol: float = 1e-12, atol: float = 1e-14,
              liouville_tol: float = 1e-4) -> FloquetData:
    """Monodromy, multipliers, left/right eigenvectors, and the per-node
    Floquet bundles for all real simple multipliers."""
    seg = po.segment
    d = seg.dim
    A_list, node_transport = _interval_transitions(po, rtol, atol)
    # prefix[i] = A_{i-1} ... A_0, suffix[i] = A_{N-1} ... A_i
    N = seg.N
    prefix = np.empty((N + 1, d, d))
    suffix = np.empty((N + 1, d, d))
    prefix[0] = np.eye(d)
    for i in range(N):
        prefix[i + 1] = A_list[i] @ prefix[i]
    suffix[N] = np.eye(d)
    for i in range(N - 1, -1, -1):
        suffix[i] = suffix[i + 1] @ A_list[i]
    M0 = prefix[N]

    lam, V = np.linalg.eig(M0)
    order = np.argsort(-np.abs(lam))
    lam, V = lam[order], V[:, order]
    lamL, W = np.linalg.eig(M0.T)
    # match left eigvectors to the right ones by multiplier
    Wm = np.empty_like(V)
    used = set()
    for k in range(d):
        cand = [j for j in range(d) if j not in used]
        j = min(cand, key=lambda j: abs(lamL[j] - lam[k]))
        used.add(j)
        Wm[:, k] = W[:, j]

    # Liouville audit via Gauss quadrature of the trace along the orbit
    b = bvp.basis(seg.m)
    h = np.diff(seg.mesh)
    taus = (seg.mesh[:-1, None] + h[:, None] * b.gauss[None, :]).ravel()
    X = seg.interpolate(taus)
    tr = np.trace(seg.field.jac(X, seg.pvals), axis1=-2, axis2=-1)
    quad = (h[:, None] * b.weights[None, :]).ravel()
    liou = float(np.exp(seg.T * (quad @ tr)))

    trivial = int(np.argmin(np.abs(lam - 1.0)))
    if abs(lam[trivial] - 1.0) > liouville_tol:
        raise RuntimeError(
            f"trivial multiplier off unity by {abs(lam[trivial]-1):.2e}; "
            "orbit under-resolved (remesh and retry)")

    fd = FloquetData(multipliers=lam, trivial_index=trivial, monodromy_matrix=M0,
                     right_vectors=V, left_vectors=Wm, liouville=liou,
                     _segment=seg)

    # per-node bundles for real simple multipliers
    tol_simple = 1e-8
    for k in range(d):
        if abs(np.imag(lam[k])) > tol_simple * max(1.0, abs(lam[k])):
            continue
        vecs = np.empty((seg.n_nodes, d))
        prev = None
        for i in range(N):
            li, Vi = np.linalg.eig(prefix[i] @ suffix[i])
            j = int(np.argmin(np.abs(li - lam[k])))
            v = np.real(Vi[:, j])
            v /= np.linalg.norm(v)
            if prev is not None:
                v = _align(v, prev)
            vecs[i * (seg.m + 1)] = v
            prev_node = v
            for j in range(seg.m):
                w = node_transport[i, j] @ v
                w /= np.linalg.norm(w)
                w = _align(w, prev_node)
                vecs[i * (seg.m + 1) + 1 + j] = w
                prev_node = w
            prev = A_list[i] @ v
            prev /= np.linalg.norm(prev)
        # periodic wrap: bundle at phase 1 equals the phase-0 direction up to
        # the sign of the multiplier
        vecs[-1] = vecs[0] * (1.0 if float(np.real(lam[k])) >= 0 else -1.0)
        # deterministic global sign: largest |component| of the phase-0 vector
        # is positive (eig returns an arbitrary sign per call)
        k0 = int(np.argmax(np.abs(vecs[0])))
        if vecs[0][k0] < 0:
            vecs = -vecs
        fd.node_bundles[k] = vecs
    return fd
