"""Invariant-manifold traces in the section: one-parameter families of orbit
segments with one end in a Floquet bundle of a saddle orbit and the other end
pinned to the section, swept by pseudo-arclength continuation.

The end points assemble into the intersection curves of the two-dimensional
(strong) stable/unstable manifolds with the section; folds of the family at
the tangency locus carry a curve from one half-section into the other.  Also
here: extraction and indexing of the heteroclinic point sequences, cylinder
trace assembly, accumulation diagnostics, and the second-return consistency
check.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import bvp, ivp, model, periodic as periodic_mod, sections
from .connect import ConnectingOrbit, CylinderFamily
from .sections import SectionConfig, sigma_coords

__all__ = [
    "SectionConfig",
    "IntersectionCurve",
    "PointSequence",
    "SweepOptions",
    "sweep_manifold",
    "seed_from_connection",
    "seed_from_bundle_shot",
    "extract_section_points",
    "cylinder_trace",
    "classify_accumulation",
    "heteroclinic_consistency",
    "curve_tangent_at_end",
    "bundle_direction_in_section",
]


# ---------------------------------------------------------------- data types

@dataclass
class IntersectionCurve:
    label: str
    states: np.ndarray            # (n, 4) full states on the section
    family_param: np.ndarray      # (n,) bundle phase (unwrapped)
    crossing_index: np.ndarray    # (n,) interior-crossing count + 1
    sides: np.ndarray             # (n,) +1 / -1 / 0
    meta: dict = dfield(default_factory=dict)

    @property
    def sigma(self) -> np.ndarray:
        return sigma_coords(self.states)

    def __len__(self):
        return len(self.states)

    def arclength(self) -> np.ndarray:
        d = np.linalg.norm(np.diff(self.sigma, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(d)])

    def c_crossings(self) -> int:
        """Sign changes of v along the curve (tangency-locus crossings)."""
        s = self.sigma[:, 0]
        keep = np.abs(s) > 0  # count strict sign changes
        ss = np.sign(s[keep])
        return int(np.sum(ss[1:] * ss[:-1] < 0))

    def is_closed(self, tol: float = 5e-3) -> bool:
        return bool(np.linalg.norm(self.sigma[0] - self.sigma[-1]) < tol)

    def rows(self) -> np.ndarray:
        return np.column_stack([self.family_param, self.crossing_index,
                                self.sigma, self.sides])


@dataclass
class PointSequence:
    plus: dict                    # k -> state (4,)
    minus: dict
    pvals: dict
    meta: dict = dfield(default_factory=dict)

    def side(self, sign: int) -> dict:
        return self.plus if sign > 0 else self.minus

    def rows(self) -> np.ndarray:
        out = []
        for sgn, d in ((1, self.plus), (-1, self.minus)):
            for k in sorted(d):
                st = d[k]
                out.append([k, k, st[1], st[2], st[3], sgn])
        return np.array(out)


@dataclass
class SweepOptions:
    N: int = 200
    m: int = 4
    newton_tol: float = 1e-9
    target_spacing: float = 5e-3
    ds_min: float = 1e-6
    ds_max: float = 5e-2
    max_members: int = 2500
    max_turns: float = 10.0       # budget for spiralling curves (phase units)
    close_tol: float = 1e-3       # curve-closure detection in Sigma coords
    stop_near: tuple = ()         # ((point, radius), ...) termination targets
    section: SectionConfig = dfield(default_factory=SectionConfig)


# ---------------------------------------------------------------- seeding

def seed_from_bundle_shot(po: periodic_mod.PeriodicOrbit, which: str, sign: int,
                          delta: float, pvals: dict, time_direction: int,
                          crossing_index: int = 1, phase: float = 0.37,
                          opts: SweepOptions | None = None,
                          t_max: float = 400.0) -> bvp.OrbitSegment:
    """Integrate from the bundle offset to the requested section crossing and
    sample the path into a collocation segment (forward segments only; for
    stable-side sweeps the segment runs from the section to the orbit)."""
    opts = opts or SweepOptions()
    fd = po.floquet
    x0 = po.point(phase) + sign * delta * fd.bundle(which, phase)
    spec = ivp.section_event(opts.section.c_value)
    tr = ivp.integrate(x0, model.Parameters(**pvals), time_direction * t_max,
                       ivp.IntegratorOptions(max_time=t_max, blowup_norm=300.0),
                       events=[spec])
    hits = [h for h in tr.events if h.t > 1e-9]
    if len(hits) < crossing_index:
        raise ivp.NoReturnError(
            f"bundle shot reached only {len(hits)} of {crossing_index} crossings")
    t_end = hits[crossing_index - 1].t
    if time_direction > 0:
        fn = lambda taus: tr(taus * t_end)
    else:
        fn = lambda taus: tr((1.0 - taus) * t_end)
    return bvp.segment_from_callable(model.FIELD, fn, bvp.uniform_mesh(opts.N),
                                     opts.m, t_end, pvals)


def seed_from_connection(co: ConnectingOrbit, crossing_time: float,
                         side: str, opts: SweepOptions | None = None,
                         prepend_laps: int = 0,
                         lap_orbit: periodic_mod.PeriodicOrbit | None = None) -> bvp.OrbitSegment:
    """Sub-segment of a connecting orbit between its bundle end and the
    crossing at the given global time.

    side = "from-start": bundle end -> crossing (unstable-manifold sweeps);
    side = "to-end": crossing -> arrival end (stable-manifold sweeps), with
    optional whole shadow laps of lap_orbit prepended before the crossing.
    """
    opts = opts or SweepOptions()
    seg_a, seg_b = co.segments
    Ta, Tb = seg_a.T, seg_b.T

    def at_time(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(t), 4))
        mask = t <= Ta
        if np.any(mask):
            out[mask] = seg_a.interpolate(np.clip(t[mask] / Ta, 0, 1))
        if np.any(~mask):
            out[~mask] = seg_b.interpolate(np.clip((t[~mask] - Ta) / Tb, 0, 1))
        return out

    total = Ta + Tb
    if side == "from-start":
        T = crossing_time
        fn = lambda taus: at_time(taus * T)
    elif side == "to-end":
        if prepend_laps > 0:
            if lap_orbit is None:
                raise ValueError("prepend_laps needs lap_orbit")
            Tlap = lap_orbit.T
            x_cross = at_time(crossing_time)[0]
            # phase of the shadow orbit nearest the crossing
            from .connect import _nearest_phase
            ph0 = _nearest_phase(lap_orbit, x_cross)
            T = prepend_laps * Tlap + (total - crossing_time)

            def fn(taus, _T=T):
                t = np.atleast_1d(taus) * _T
                out = np.empty((len(t), 4))
                m1 = t < prepend_laps * Tlap
                if np.any(m1):
                    out[m1] = lap_orbit.point(ph0 + t[m1] / Tlap)
                if np.any(~m1):
                    out[~m1] = at_time(crossing_time + t[~m1] - prepend_laps * Tlap)
                return out
        else:
            T = total - crossing_time
            fn = lambda taus: at_time(crossing_time + taus * T)
    else:
        raise ValueError(f"unknown side {side!r}")
    return bvp.segment_from_callable(model.FIELD, fn, bvp.uniform_mesh(opts.N),
                                     opts.m, T, dict(co.pvals))


# ---------------------------------------------------------------- the sweep

class _SweepProblem:
    """Square corrector for one family member: segment + (T, phase) with the
    bundle condition at one end and the section pin at the other."""

    def __init__(self, po, which, sign, delta, pvals, time_direction, opts):
        self.po = po
        self.fd = po.floquet
        self.which = which
        self.sign = sign
        self.delta = delta
        self.pvals = dict(pvals)
        self.forward = time_direction > 0
        self.opts = opts

    def bundle_point(self, phase):
        return (self.po.point(phase)
                + self.sign * self.delta * self.fd.bundle(self.which, phase))

    def build(self, seg, phase, arc_row=None, arc_rhs=0.0, pin_phase=False):
        prob = bvp.BvpProblem()
        prob.add_scalar("T", seg.T)
        prob.add_scalar("phase", phase)
        seg.pvals = dict(self.pvals)
        prob.add_segment(seg, T=("scalar", "T"))
        bundle_end = ("start", 0) if self.forward else ("end", 0)
        getter = (lambda ctx: ctx.seg_start(0)) if self.forward \
            else (lambda ctx: ctx.seg_end(0))
        sec_getter = (lambda ctx: ctx.seg_end(0)) if self.forward \
            else (lambda ctx: ctx.seg_start(0))

        def bundle_bc(ctx):
            return getter(ctx) - self.bundle_point(ctx.scalar("phase"))
        prob.add_condition(bvp.FDCondition(
            bundle_bc, depends=[bundle_end, ("scalar", "phase")], size=4))

        c_val = self.opts.section.c_value

        def section_bc(ctx):
            return sec_getter(ctx)[0] - c_val
        sec_end = ("end", 0) if self.forward else ("start", 0)
        prob.add_condition(bvp.FDCondition(section_bc, depends=[sec_end], size=1))
        if arc_row is not None:
            prob.add_condition(bvp.LinearCondition(arc_row, arc_rhs))
        elif pin_phase:
            prob._layout()
            row = np.zeros(prob.n_unknowns)
            row[prob._scalar_col["phase"]] = 1.0
            prob.add_condition(bvp.LinearCondition(row, phase))
        return prob

    def section_state(self, seg):
        return seg.end if self.forward else seg.start


def _metric(n_values):
    w = np.empty(n_values + 2)
    w[:n_values] = 1.0 / np.sqrt(n_values)
    w[n_values] = 0.02   # duration
    w[n_values + 1] = 1.0  # phase
    return w


def sweep_manifold(po: periodic_mod.PeriodicOrbit, which: str, sign: int,
                   delta: float, pvals: dict, time_direction: int,
                   seed: bvp.OrbitSegment, seed_phase: float,
                   label: str = "W", opts: SweepOptions | None = None,
                   directions: tuple = (1, -1)) -> IntersectionCurve:
    """Sweep the family through the seed in both arclength directions and
    assemble the section trace.

    The seed segment must satisfy the boundary structure approximately (one
    end near the bundle offset at seed_phase, the other end on the section).
    """
    opts = opts or SweepOptions()
    solver = bvp.SolverOptions(N=seed.N, m=seed.m, newton_tol=opts.newton_tol,
                               max_newton_iter=12)
    sp = _SweepProblem(po, which, sign, delta, pvals, time_direction, opts)

    # converge the seed with the phase pinned
    seg0 = seed.copy()
    prob = sp.build(seg0, seed_phase, pin_phase=True)
    prob.solve(solver)
    phase0 = prob.scalars["phase"]

    def uvec(seg, phase):
        return np.concatenate([seg.values.ravel(), [seg.T, phase]])

    n_values = seg0.values.size
    w = _metric(n_values)

    branches = []
    for direction in directions:
        pts = []       # (state, phase, k, side)
        seg = seg0.copy()
        phase = phase0
        u_prev = uvec(seg, phase)
        t_hat = np.zeros_like(u_prev)
        t_hat[-1] = direction
        ds = opts.target_spacing
        n_fail = 0
        stop = "budget"
        while len(pts) < opts.max_members:
            u_guess = u_prev + ds * t_hat / w
            guess = seg.copy()
            guess.values = u_guess[:n_values].reshape(guess.values.shape)
            guess.T = float(u_guess[n_values])
            row = t_hat * w
            try:
                prob = sp.build(guess, float(u_guess[-1]), arc_row=row,
                                arc_rhs=float(row @ u_prev) + ds)
                prob.solve(solver)
            except (bvp.NewtonDivergenceError, bvp.SingularSystemError):
                ds *= 0.4
                n_fail += 1
                if ds < opts.ds_min or n_fail > 40:
                    stop = "step underflow"
                    break
                continue
            n_fail = 0
            seg = guess
            phase_new = prob.scalars["phase"]
            u_new = uvec(seg, phase_new)
            end_state = sp.section_state(seg)
            # interior crossings (exclude the pinned end itself)
            crs = sections.segment_crossings(seg, opts.section)
            k = len(crs) if sp.forward else len(crs)
            side = opts.section.classify(end_state)
            pts.append((end_state.copy(), phase_new, k, side))
            # step-size adaptation toward the target section spacing
            if len(pts) >= 2:
                moved = float(np.linalg.norm(sigma_coords(pts[-1][0])
                                             - sigma_coords(pts[-2][0])))
                if moved > 0:
                    ds = float(np.clip(ds * opts.target_spacing / moved,
                                       opts.ds_min, opts.ds_max))
            sec = (u_new - u_prev) * w
            nt = np.linalg.norm(sec)
            if nt > 0:
                t_hat = sec / nt
            u_prev = u_new
            # termination
            if not opts.section.inside_box(end_state):
                stop = "box"
                break
            if abs(phase_new - phase0) > opts.max_turns:
                stop = "turn budget"
                break
            hit_target = False
            for tgt, rad in opts.stop_near:
                if np.linalg.norm(sigma_coords(end_state) - sigma_coords(tgt)) < rad:
                    stop = "target"
                    hit_target = True
                    break
            if hit_target:
                break
            if len(pts) > 20 and abs(phase_new - phase0) > 0.75:
                d0 = np.linalg.norm(sigma_coords(pts[-1][0])
                                    - sigma_coords(pts[0][0]))
                if d0 < opts.close_tol:
                    stop = "closed"
                    break
        branches.append((pts, stop))
        if branches[0][1] == "closed":
            break  # the curve closed in one direction; no second branch needed

    # assemble: reverse the second branch and prepend
    pts_fwd, stop_fwd = branches[0]
    if len(branches) > 1:
        pts_bwd, stop_bwd = branches[1]
    else:
        pts_bwd, stop_bwd = [], "skipped"
    allpts = list(reversed(pts_bwd)) + [(None, phase0, 0, 0)] + pts_fwd
    # recompute the seed point entry
    seed_state = sp.section_state(seg0)
    seed_crs = sections.segment_crossings(seg0, opts.section)
    allpts[len(pts_bwd)] = (seed_state, phase0, len(seed_crs),
                            opts.section.classify(seed_state))
    states = np.array([p[0] for p in allpts])
    return IntersectionCurve(
        label=label,
        states=states,
        family_param=np.array([p[1] for p in allpts]),
        crossing_index=np.array([p[2] for p in allpts]),
        sides=np.array([p[3] for p in allpts]),
        meta={"stop_forward": stop_fwd, "stop_backward": stop_bwd,
              "which": which, "sign": sign, "delta": delta,
              "time_direction": 1 if sp.forward else -1,
              "box": (opts.section.box_v, opts.section.box_ct, opts.section.box_n)})


# ------------------------------------------------------- section extraction

def extract_section_points(obj, section: SectionConfig | None = None,
                           gamma_source: periodic_mod.PeriodicOrbit | None = None,
                           depart_frac: float = 0.05,
                           n_backward: int = 1):
    """Section crossings of a connecting orbit (-> indexed point sequences),
    a cylinder family (-> two trace curves), or a periodic orbit (-> its
    fixed points on the section).

    For a connecting orbit the sequences are indexed so that k = 0 is the
    first crossing clearly departed from the source orbit; k < 0 points not
    present on the truncated orbit are appended by backward second returns
    (they hug the source orbit, so the backward map is contracting and
    accurate)."""
    section = section or SectionConfig()
    if isinstance(obj, periodic_mod.PeriodicOrbit):
        crs = sections.segment_crossings(obj.segment, section)
        return {(+1): [c.state for c in crs if c.side > 0],
                (-1): [c.state for c in crs if c.side < 0]}
    if isinstance(obj, CylinderFamily):
        return cylinder_trace(obj, section)
    if isinstance(obj, ConnectingOrbit):
        crs = obj.crossings(section)
        if gamma_source is None:
            raise ValueError("need the source orbit to index the sequences")
        g_cross = sections.segment_crossings(gamma_source.segment, section)
        ref = {c.side: c.state for c in g_cross}
        # departure threshold: fraction of the section-trace spread
        all_sig = np.array([sigma_coords(c.state) for c in crs])
        scale = float(np.max(np.ptp(all_sig, axis=0))) if len(crs) else 1.0
        thresh = max(depart_frac * scale, 10 * section.v_tol)
        plus: dict = {}
        minus: dict = {}
        extended: list = []
        p = model.Parameters(**obj.pvals)
        bopts = ivp.IntegratorOptions(rel_tol=1e-12, abs_tol=1e-14, max_time=200.0)
        for side, store in ((1, plus), (-1, minus)):
            mine = [c for c in crs if c.side == side]
            if not mine:
                continue
            gref = ref.get(side)
            def dist(c):
                if gref is None:
                    return np.inf
                return float(np.linalg.norm(sigma_coords(c.state)
                                            - sigma_coords(gref)))
            k0 = next((i for i, c in enumerate(mine) if dist(c) > thresh), None)
            if k0 is None:
                k0 = 0
            for i, c in enumerate(mine):
                store[i - k0] = c.state
            # extend backwards toward the source orbit; these points hug the
            # source orbit and their own forward images are noise-amplified,
            # so they are flagged for consistency checks
            k_min = min(store)
            x = store[k_min]
            for k in range(k_min - 1, k_min - 1 - n_backward, -1):
                try:
                    x, _ = ivp.return_to_section(x, p, k=2, sign=side,
                                                 c_val=section.c_value,
                                                 opts=bopts, direction=-1)
                except ivp.IntegrationError:
                    break
                store[k] = x
                extended.append((side, k))
        return PointSequence(plus=plus, minus=minus, pvals=dict(obj.pvals),
                             meta={"threshold": thresh, "extended": extended})
    raise TypeError(f"cannot extract section points from {type(obj)!r}")


def cylinder_trace(fam: CylinderFamily, section: SectionConfig | None = None):
    """Assemble the two cylinder trace curves from the member crossings.

    Points are ordered lap-by-lap across the family; consecutive members share
    lap indices, and the family closure shifts the lap by one, so the walk
    (lap 0: all members), (lap 1: all members), ... traces a connected curve
    from the departure orbit to the arrival orbit.
    """
    section = section or SectionConfig()
    per_member = []
    for co in fam.members:
        crs = co.crossings(section)
        per_member.append({+1: [c.state for c in crs if c.side > 0],
                           -1: [c.state for c in crs if c.side < 0]})
    out = {}
    for side in (+1, -1):
        counts = [len(pm[side]) for pm in per_member]
        n_laps = min(counts)
        pts, fam_par, ks = [], [], []
        for lap in range(n_laps):
            for i, pm in enumerate(per_member[:-1]):  # last member == first
                pts.append(pm[side][lap])
                fam_par.append(lap + i / max(len(per_member) - 1, 1))
                ks.append(lap + 1)
        label = "Bhat_plus" if side > 0 else "Bhat_minus"
        out[side] = IntersectionCurve(
            label=label, states=np.array(pts), family_param=np.array(fam_par),
            crossing_index=np.array(ks), sides=np.full(len(pts), side),
            meta={"n_members": len(fam.members), "n_laps": n_laps})
    return out


# ---------------------------------------------------------------- reports

def _polyline_tree(curve: IntersectionCurve, resample: int = 4):
    pts = curve.sigma
    if resample > 1 and len(pts) > 1:
        fine = []
        for a, b in zip(pts[:-1], pts[1:]):
            for t in np.linspace(0, 1, resample, endpoint=False):
                fine.append(a + t * (b - a))
        fine.append(pts[-1])
        pts = np.array(fine)
    return cKDTree(pts)


def classify_accumulation(curve: IntersectionCurve, target: IntersectionCurve,
                          n_windows: int = 5, window: int = 50) -> dict:
    """Distance statistics of successive tail windows of `curve` against the
    polyline `target`, and a monotone-approach verdict."""
    if len(curve) < n_windows * window:
        raise ValueError(
            f"curve too short ({len(curve)}) for {n_windows} windows of {window}")
    tree = _polyline_tree(target)
    stats = []
    for wdx in range(n_windows):
        hi = len(curve) - wdx * window
        lo = hi - window
        d, _ = tree.query(curve.sigma[lo:hi])
        stats.append({"window": wdx, "min": float(d.min()),
                      "median": float(np.median(d)), "max": float(d.max())})
    med = [s["median"] for s in stats]        # stats[0] = last window
    decreasing = all(med[i] <= med[i + 1] * 1.05 for i in range(len(med) - 1))
    return {"windows": stats, "tail_min": stats[0]["min"],
            "tail_median": stats[0]["median"],
            "monotone_approach": bool(decreasing)}


def heteroclinic_consistency(ps: PointSequence, pvals: dict,
                             section: SectionConfig | None = None,
                             opts: ivp.IntegratorOptions | None = None) -> dict:
    """Check f(a_k) = a_{k+1} under the second-return map on each side."""
    section = section or SectionConfig()
    opts = opts or ivp.IntegratorOptions(rel_tol=1e-12, abs_tol=1e-14,
                                         max_time=400.0)
    p = model.Parameters(**pvals)
    extended = set(map(tuple, ps.meta.get("extended", [])))
    report = {"pairs": [], "max_deviation": 0.0, "skipped": []}
    for sgn, store in ((1, ps.plus), (-1, ps.minus)):
        ks = sorted(store)
        for k in ks:
            if k + 1 not in store:
                continue
            if (sgn, k) in extended:
                report["skipped"].append({"side": sgn, "k": k,
                                          "reason": "backward-extended point "
                                                    "(forward image noise-amplified)"})
                continue
            try:
                nxt, t_ret = ivp.return_to_section(store[k], p, k=2, sign=sgn,
                                                   c_val=section.c_value, opts=opts)
            except ivp.IntegrationError as exc:
                report["skipped"].append({"side": sgn, "k": k, "reason": str(exc)})
                continue
            dev = float(np.linalg.norm(sigma_coords(nxt)
                                       - sigma_coords(store[k + 1])))
            report["pairs"].append({"side": sgn, "k": k, "deviation": dev,
                                    "return_time": t_ret})
            report["max_deviation"] = max(report["max_deviation"], dev)
    return report


# ------------------------------------------------------- tangency geometry

def curve_tangent_at_end(curve: IntersectionCurve, end_point: np.ndarray,
                         n_fit: int = 6) -> np.ndarray:
    """Unit tangent of the curve at the end nearest to end_point (in Sigma)."""
    sig = curve.sigma
    tgt = sigma_coords(end_point)
    d0 = np.linalg.norm(sig[0] - tgt)
    d1 = np.linalg.norm(sig[-1] - tgt)
    pts = sig[:n_fit] if d0 <= d1 else sig[-n_fit:][::-1]
    # principal direction of the end points relative to the closest one
    rel = pts - pts[0]
    _, _, Vt = np.linalg.svd(rel[1:])
    t = Vt[0]
    if rel[-1] @ t < 0:
        t = -t
    return t / np.linalg.norm(t)


def bundle_direction_in_section(po: periodic_mod.PeriodicOrbit, which: str,
                                point_on_section: np.ndarray) -> np.ndarray:
    """Direction of the manifold trace in Sigma coordinates at a section
    fixed point: the bundle direction corrected along the flow so the
    combination is tangent to the section (zero c-component)."""
    from .connect import _nearest_phase
    phase = _nearest_phase(po, point_on_section)
    v = po.floquet.bundle(which, phase)
    f = model.rhs(po.point(phase), model.Parameters(**po.pvals))
    if abs(f[0]) < 1e-14:
        raise ValueError("flow tangent to the section at this point")
    w = v - (v[0] / f[0]) * f
    w = sigma_coords(w)
    return w / np.linalg.norm(w)
