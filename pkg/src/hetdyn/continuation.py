"""Pseudo-arclength continuation with test-function monitoring.

Branches of equilibria or periodic orbits are followed in one free parameter
with a secant predictor and a pseudo-arclength corrector row appended to the
defining system.  Stability summaries (eigenvalues / Floquet multipliers) are
recorded per point; sign changes of the test functions

    Hopf:  Re prod_{i<j} (lambda_i + lambda_j)      (equilibria)
    SL:    Re prod (mu_i - 1) over nontrivial mu    (periodic)
    PD:    Re prod (mu_i + 1) over nontrivial mu    (periodic)

are bracketed and refined on the branch.  Two-parameter loci pin one condition
(multiplier at +/-1, eigenvalue pair on the axis) and step the second
parameter, re-solving the pinned root in the first.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield
from typing import Callable, Sequence

import numpy as np

from . import bvp, periodic as periodic_mod

__all__ = [
    "BranchPoint",
    "Branch",
    "StepOptions",
    "hopf_test_value",
    "sl_test_value",
    "pd_test_value",
    "continue_equilibrium",
    "find_hopf",
    "continue_periodic",
    "detect_special",
    "continue_locus",
]


# ---------------------------------------------------------------- test fns

def hopf_test_value(eigs: np.ndarray) -> float:
    p = 1.0 + 0.0j
    n = len(eigs)
    for i in range(n):
        for j in range(i + 1, n):
            p *= eigs[i] + eigs[j]
    return float(np.real(p))


def _nontrivial(mults: np.ndarray) -> np.ndarray:
    k = int(np.argmin(np.abs(mults - 1.0)))
    return np.delete(mults, k)


def sl_test_value(mults: np.ndarray) -> float:
    return float(np.real(np.prod(_nontrivial(mults) - 1.0)))


def pd_test_value(mults: np.ndarray) -> float:
    return float(np.real(np.prod(_nontrivial(mults) + 1.0)))


# ---------------------------------------------------------------- branches

@dataclass
class BranchPoint:
    kind: str                      # "equilibrium" | "periodic"
    pvals: dict
    norm: float
    stability: np.ndarray          # eigenvalues or multipliers
    tests: dict
    x: np.ndarray | None = None
    segment: "bvp.OrbitSegment | None" = None
    T: float | None = None
    label: str | None = None

    def param(self, name: str) -> float:
        return float(self.pvals[name])


@dataclass
class Branch:
    kind: str
    free_param: str
    points: list = dfield(default_factory=list)
    meta: dict = dfield(default_factory=dict)

    def params(self, name: str | None = None) -> np.ndarray:
        name = name or self.free_param
        return np.array([bp.pvals[name] for bp in self.points])

    def labelled(self, label: str) -> list:
        return [bp for bp in self.points if bp.label == label]


@dataclass
class StepOptions:
    ds: float = 0.02
    ds_min: float = 1e-6
    ds_max: float = 0.1
    grow: float = 1.3
    shrink: float = 0.5
    max_points: int = 400
    adapt_every: int = 0          # 0 = never remesh during the run
    mult_steps: int = 64          # fixed-step order-4 variational resolution
    direction: int = 1


# ---------------------------------------------------------------- equilibria

def _eq_eigs(field, x, pvals):
    return np.linalg.eigvals(field.jac(x, pvals))


def continue_equilibrium(field, x0: np.ndarray, pvals: dict, free_param: str,
                         param_range: tuple[float, float],
                         step: StepOptions | None = None,
                         uz_targets: Sequence[float] = ()) -> Branch:
    """Pseudo-arclength continuation of F(x, p) = 0."""
    step = step or StepOptions()
    d = len(x0)
    lo, hi = param_range

    def solve_point(x_guess, p_guess, row, rhs_val):
        # Newton on [F; arclength] over (x, p)
        u = np.concatenate([x_guess, [p_guess]])
        for _ in range(25):
            pv = {**pvals, free_param: u[-1]}
            F = field.rhs(u[:d], pv)
            r = np.concatenate([F, [row @ u - rhs_val]])
            if np.max(np.abs(r)) < 1e-12:
                break
            A = np.zeros((d + 1, d + 1))
            A[:d, :d] = field.jac(u[:d], pv)
            A[:d, d] = field.dpar(u[:d], pv, free_param)
            A[d] = row
            u = u - np.linalg.solve(A, r)
        else:
            raise bvp.NewtonDivergenceError("equilibrium corrector stalled")
        return u

    def make_point(u) -> BranchPoint:
        pv = {**pvals, free_param: float(u[-1])}
        eigs = _eq_eigs(field, u[:d], pv)
        eigs = eigs[np.argsort(-eigs.real)]
        tests = {"H": hopf_test_value(eigs)}
        for t in uz_targets:
            tests[f"UZ:{t:g}"] = float(u[-1]) - t
        return BranchPoint(kind="equilibrium", pvals=pv, norm=float(np.linalg.norm(u[:d])),
                           stability=eigs, tests=tests, x=u[:d].copy())

    br = Branch(kind="equilibrium", free_param=free_param)
    pv0 = dict(pvals)
    u = np.concatenate([x0, [pv0[free_param]]])
    row0 = np.zeros(d + 1); row0[-1] = 1.0
    u = solve_point(u[:d], u[-1], row0, u[-1])
    br.points.append(make_point(u))
    ds = step.ds * step.direction
    u_prev = u
    # first predictor: move the parameter only
    t_hat = row0.copy()
    while len(br.points) < step.max_points:
        u_pred = u_prev + ds * t_hat
        row = t_hat.copy()
        try:
            u_new = solve_point(u_pred[:d], u_pred[-1], row, row @ u_prev + ds)
        except (bvp.NewtonDivergenceError, np.linalg.LinAlgError):
            ds *= step.shrink
            if abs(ds) < step.ds_min:
                br.meta["stop"] = "step underflow"
                break
            continue
        br.points.append(make_point(u_new))
        t_hat = u_new - u_prev
        t_hat /= np.linalg.norm(t_hat)
        u_prev = u_new
        ds = np.sign(ds) * min(abs(ds) * step.grow, step.ds_max)
        if not (lo <= u_new[-1] <= hi):
            br.meta["stop"] = "parameter bound"
            break
    else:
        br.meta["stop"] = "point budget"

    def refiner(i, key):
        a, b = br.points[i], br.points[i + 1]
        pa, pb = a.param(free_param), b.param(free_param)
        fa, fb = a.tests[key], b.tests[key]
        for _ in range(80):
            pm = pb - fb * (pb - pa) / (fb - fa) if fb != fa else 0.5 * (pa + pb)
            if not min(pa, pb) <= pm <= max(pa, pb):
                pm = 0.5 * (pa + pb)
            um = solve_point(a.x, pm, row0, pm)
            bpm = make_point(um)
            fm = bpm.tests[key]
            if abs(pb - pa) < 1e-10 or fm == 0.0:
                return bpm
            if np.sign(fm) == np.sign(fa):
                pa, fa = pm, fm
            else:
                pb, fb = pm, fm
        return bpm

    detect_special(br, refiner)
    return br


def find_hopf(field, pvals: dict, free_param: str,
              bracket: tuple[float, float],
              eq_of_param: Callable[[dict], np.ndarray],
              tol: float = 1e-12):
    """Hopf point on a closed-form equilibrium locus: (param, omega, eigvec)."""
    from scipy.optimize import brentq

    def test(val):
        pv = {**pvals, free_param: val}
        return hopf_test_value(_eq_eigs(field, eq_of_param(pv), pv))

    ph = brentq(test, *bracket, xtol=tol)
    pv = {**pvals, free_param: ph}
    eigs, V = np.linalg.eig(field.jac(eq_of_param(pv), pv))
    i = int(np.argmax(eigs.imag))
    if eigs[i].imag <= 0:
        raise RuntimeError("no complex pair at the located Hopf candidate")
    return ph, float(eigs[i].imag), V[:, i]


# ---------------------------------------------------------------- periodic

class _PeriodicStepper:
    """Corrector machinery for one periodic branch run (fixed mesh layout)."""

    def __init__(self, seg: bvp.OrbitSegment, pvals: dict, free_param: str,
                 opts: bvp.SolverOptions, mult_steps: int):
        self.seg = seg
        self.pvals = dict(pvals)
        self.free_param = free_param
        self.opts = opts
        self.mult_steps = mult_steps

    def uvec(self, seg: bvp.OrbitSegment, pval: float) -> np.ndarray:
        return np.concatenate([seg.values.ravel(), [seg.T, pval]])

    def metric(self, n_values: int) -> np.ndarray:
        w = np.full(n_values + 2, 1.0 / np.sqrt(n_values))
        w[-2] = 0.05  # period
        w[-1] = 1.0   # parameter
        return w

    def correct(self, guess: bvp.OrbitSegment, pval: float,
                ref: bvp.OrbitSegment,
                arc_row: np.ndarray | None, arc_rhs: float) -> tuple[bvp.OrbitSegment, float]:
        seg = guess.copy()
        seg.pvals = {**self.pvals, self.free_param: pval}
        prob = bvp.BvpProblem()
        prob.add_scalar("T", seg.T)
        prob.add_scalar(self.free_param, pval)
        prob.add_segment(seg, T=("scalar", "T"),
                         par_binding={self.free_param: self.free_param})
        prob.add_condition(periodic_mod.periodicity_condition(0, seg.dim))
        prob.add_condition(periodic_mod.phase_condition_row(prob, 0, ref))
        if arc_row is not None:
            prob.add_condition(bvp.LinearCondition(arc_row, arc_rhs))
        else:
            # no arclength: pin the free parameter instead
            prob._layout()
            row = np.zeros(prob.n_unknowns)
            row[prob._scalar_col[self.free_param]] = 1.0
            prob.add_condition(bvp.LinearCondition(row, pval))
        prob.solve(self.opts)
        return seg, prob.scalars[self.free_param]

    def stability(self, seg: bvp.OrbitSegment, pval: float) -> np.ndarray:
        po = periodic_mod.PeriodicOrbit(seg, {**self.pvals, self.free_param: pval})
        return periodic_mod.multipliers_fast(po, self.mult_steps)


def _po_point(seg, pvals, free_param, mults, uz_targets) -> BranchPoint:
    tests = {"SL": sl_test_value(mults), "PD": pd_test_value(mults)}
    for t in uz_targets:
        tests[f"UZ:{t:g}"] = float(pvals[free_param]) - t
    return BranchPoint(kind="periodic", pvals=dict(pvals),
                       norm=float(np.sqrt(np.mean(seg.values ** 2))),
                       stability=mults, segment=seg.copy(), T=seg.T, tests=tests)


def continue_periodic(po0: "periodic_mod.PeriodicOrbit", free_param: str,
                      param_range: tuple[float, float],
                      step: StepOptions | None = None,
                      solver: bvp.SolverOptions | None = None,
                      uz_targets: Sequence[float] = (),
                      stop_when: Callable[[BranchPoint], bool] | None = None,
                      max_period: float = np.inf) -> Branch:
    """Follow a periodic-orbit branch in one parameter through folds."""
    step = step or StepOptions()
    solver = solver or bvp.SolverOptions()
    lo, hi = param_range
    stepper = _PeriodicStepper(po0.segment, po0.pvals, free_param, solver,
                               step.mult_steps)
    seg = po0.segment.copy()
    pval = float(po0.pvals[free_param])
    # make sure the start is converged with this problem's own phase reference
    seg, pval = stepper.correct(seg, pval, seg, None, 0.0)

    br = Branch(kind="periodic", free_param=free_param)
    mults = stepper.stability(seg, pval)
    br.points.append(_po_point(seg, {**stepper.pvals, free_param: pval},
                               free_param, mults, uz_targets))

    n_values = seg.values.size
    w = stepper.metric(n_values)   # scaled coords u_hat = w * u

    def unpack_u(u, proto):
        g = proto.copy()
        g.values = u[:n_values].reshape(g.values.shape)
        g.T = float(u[n_values])
        return g, float(u[n_values + 1])

    def correct_at(u_guess, proto, ref, t_hat, u_base, ds_val):
        guess, p_guess = unpack_u(u_guess, proto)
        row = t_hat * w
        rhs_val = float(row @ u_base) + ds_val
        return stepper.correct(guess, p_guess, ref, row, rhs_val)

    u_prev = stepper.uvec(seg, pval)
    t_hat = np.zeros_like(u_prev)
    t_hat[-1] = step.direction  # unit vector in scaled coords (w[-1] = 1)
    ds = step.ds
    seg_prev = seg
    while len(br.points) < step.max_points:
        u_guess = u_prev + ds * t_hat / w
        try:
            seg_new, p_new = correct_at(u_guess, seg_prev, seg_prev, t_hat, u_prev, ds)
        except (bvp.NewtonDivergenceError, bvp.SingularSystemError):
            ds *= step.shrink
            if ds < step.ds_min:
                br.meta["stop"] = "step underflow"
                break
            continue
        mults = stepper.stability(seg_new, p_new)
        bp = _po_point(seg_new, {**stepper.pvals, free_param: p_new},
                       free_param, mults, uz_targets)
        br.points.append(bp)
        u_new = stepper.uvec(seg_new, p_new)
        sec = (u_new - u_prev) * w
        nt = np.linalg.norm(sec)
        if nt == 0:
            br.meta["stop"] = "no progress"
            break
        t_hat = sec / nt
        u_prev, seg_prev = u_new, seg_new
        ds = min(ds * step.grow, step.ds_max)
        if step.adapt_every and (len(br.points) % step.adapt_every == 0):
            seg_prev = bvp.remesh(seg_prev)
            if seg_prev.values.size != n_values:
                raise RuntimeError("remesh changed the unknown layout mid-run")
            u_prev = stepper.uvec(seg_prev, p_new)
        if not (lo <= p_new <= hi):
            br.meta["stop"] = "parameter bound"
            break
        if seg_prev.T > max_period:
            br.meta["stop"] = "period bound"
            break
        if stop_when is not None and stop_when(bp):
            br.meta["stop"] = "predicate"
            break
    else:
        br.meta["stop"] = "point budget"

    def refiner(i, key):
        a, b = br.points[i], br.points[i + 1]
        fa, fb = a.tests[key], b.tests[key]
        va = stepper.uvec(a.segment, a.param(free_param))
        vb = stepper.uvec(b.segment, b.param(free_param))
        sec = (vb - va) * w
        nsec = np.linalg.norm(sec)
        t_loc = sec / max(nsec, 1e-300)
        frac_a, frac_b, bpm = 0.0, 1.0, None
        for _ in range(60):
            frac = (frac_b - fb * (frac_b - frac_a) / (fb - fa)) if fb != fa \
                else 0.5 * (frac_a + frac_b)
            if not min(frac_a, frac_b) < frac < max(frac_a, frac_b):
                frac = 0.5 * (frac_a + frac_b)
            u_m = va + frac * (vb - va)
            try:
                seg_m, p_m = correct_at(u_m, a.segment, a.segment, t_loc, va,
                                        frac * nsec)
            except (bvp.NewtonDivergenceError, bvp.SingularSystemError):
                frac_b = frac  # bisect toward the converged side
                continue
            mults_m = stepper.stability(seg_m, p_m)
            bpm = _po_point(seg_m, {**stepper.pvals, free_param: p_m},
                            free_param, mults_m, uz_targets)
            fm = bpm.tests[key]
            if fm == 0.0 or abs(frac_b - frac_a) * nsec < 1e-10:
                return bpm
            if np.sign(fm) == np.sign(fa):
                frac_a, fa = frac, fm
            else:
                frac_b, fb = frac, fm
        return bpm

    detect_special(br, refiner)
    return br


# ---------------------------------------------------------------- detection

_LABEL_OF_TEST = {"H": "H", "SL": "SL", "PD": "PD"}


def detect_special(branch: Branch, refiner: Callable | None = None) -> Branch:
    """Scan stored test functions for sign changes; insert refined, labelled
    points when a refiner is available, else label the nearer bracket point
    as approximate."""
    pts = branch.points
    inserted = 0
    i = 0
    while i + 1 < len(pts):
        a, b = pts[i], pts[i + 1]
        for key in sorted(set(a.tests) & set(b.tests)):
            fa, fb = a.tests[key], b.tests[key]
            if not (np.isfinite(fa) and np.isfinite(fb)) or fa == 0.0:
                continue
            if np.sign(fa) * np.sign(fb) < 0:
                label = _LABEL_OF_TEST.get(key, "UZ" if key.startswith("UZ") else key)
                if refiner is not None:
                    bp = refiner(i, key)
                    if bp is not None:
                        bp.label = label
                        pts.insert(i + 1, bp)
                        inserted += 1
                        i += 1
                        break
                else:
                    target = a if abs(fa) <= abs(fb) else b
                    target.label = label + "~"
        i += 1
    branch.meta["n_labels"] = branch.meta.get("n_labels", 0) + inserted
    return branch


# ---------------------------------------------------------------- loci

def continue_locus(eval_test: Callable[[float, float], float],
                   start: tuple[float, float],
                   second_values: Sequence[float],
                   pin_tol: float = 1e-8,
                   max_secant: int = 30,
                   dJ0: float = 1e-3) -> list[tuple[float, float, float]]:
    """Trace {(J, s) : test(J, s) = 0} over a grid of the second parameter.

    eval_test(J, s) must be smooth near the locus; each point is refined by a
    secant iteration until |test| <= pin_tol.  Returns (J, s, test) triples.
    Warm starts step from the previous locus point.
    """
    J_prev, s_prev = start
    out = []
    slope = 0.0
    for s in second_values:
        J = J_prev + slope * (s - s_prev)
        f0 = eval_test(J, s)
        J1 = J + (dJ0 if f0 >= 0 else -dJ0)
        f1 = eval_test(J1, s)
        a, fa, b, fb = J, f0, J1, f1
        ok = False
        for _ in range(max_secant):
            if abs(fb) <= pin_tol:
                ok = True
                break
            if fb == fa:
                break
            c = b - fb * (b - a) / (fb - fa)
            a, fa = b, fb
            b, fb = c, eval_test(c, s)
        if not ok and abs(fb) > pin_tol:
            raise RuntimeError(f"locus refinement stalled at s = {s}: |test| = {abs(fb):.2e}")
        if out:
            slope = (b - J_prev) / (s - s_prev) if s != s_prev else 0.0
        J_prev, s_prev = b, s
        out.append((float(b), float(s), float(fb)))
    return out
