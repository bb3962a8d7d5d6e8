"""Lin's-method machinery for connecting orbits between the saddle periodic
orbits: the codimension-one connection (gap closed in a parameter), the
structurally stable cylinder (gap closed in the departure distance), and the
two-parameter locus of the closed-gap connection.

Set-up: two orbit segments, one leaving the source orbit inside a chosen
Floquet bundle and ending in a codimension-one section Pi transverse to the
flow, one starting in Pi and arriving at the target orbit inside its stable
bundle.  The difference of the two end points in Pi is confined to a fixed
direction Z; its signed magnitude eta is the Lin gap, a smooth function of
parameters whose zeros are connections.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import bvp, ivp, model, periodic as periodic_mod, sections

__all__ = [
    "LinSection",
    "LinConfig",
    "LinProblem",
    "ConnectingOrbit",
    "CylinderFamily",
    "projection_bc",
    "OrbitPair",
    "build_lin_problem",
    "close_gap_in_parameter",
    "close_gap_in_phase",
    "sweep_cylinder",
    "continue_ptop_locus",
    "SeedError",
    "GapSignError",
]


class SeedError(RuntimeError):
    """Could not construct a usable two-segment seed."""


class GapSignError(RuntimeError):
    """The Lin gap does not change sign over the scanned range."""


# ---------------------------------------------------------------- geometry

@dataclass
class LinSection:
    q: np.ndarray          # base point in Pi
    normal: np.ndarray     # unit normal (flow-aligned at construction)
    Z: np.ndarray          # unit gap direction, Z in Pi
    Y: np.ndarray          # (2, dim) complement basis of Pi orthogonal to Z

    def contains(self, x: np.ndarray, tol: float = 1e-8) -> bool:
        return abs(float((x - self.q) @ self.normal)) <= tol


def _frame_inverse(po: periodic_mod.PeriodicOrbit, fd: periodic_mod.FloquetData,
                   phase: float) -> np.ndarray:
    """Inverse of the frame [flow, bundles by descending stability] at the
    given phase; its rows read off frame coordinates of a displacement."""
    tang = po.tangent(phase)
    cols = [tang / np.linalg.norm(tang)]
    mods = np.abs(fd.multipliers)
    order = [i for i in np.argsort(mods) if i != fd.trivial_index]
    for i in order:  # ascending modulus: stable ... strongest unstable
        cols.append(fd.bundle_by_index(i, phase))
    R = np.array(cols).T
    return np.linalg.inv(R)


def _complete_in_plane(normal: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the plane-orthogonal complement of Z within Pi."""
    d = len(normal)
    basis = [normal / np.linalg.norm(normal), Z / np.linalg.norm(Z)]
    out = []
    for e in np.eye(d):
        v = e.copy()
        for b in basis + out:
            v -= (v @ b) * b
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            out.append(v / nv)
        if len(out) == d - 2:
            break
    return np.array(out)


def _orbit_tree(po: periodic_mod.PeriodicOrbit, n: int = 1024) -> cKDTree:
    taus = np.linspace(0.0, 1.0, n, endpoint=False)
    return cKDTree(po.segment.interpolate(taus))


def _nearest_phase(po: periodic_mod.PeriodicOrbit, x: np.ndarray,
                   n: int = 2048) -> float:
    taus = np.linspace(0.0, 1.0, n, endpoint=False)
    pts = po.segment.interpolate(taus)
    i = int(np.argmin(np.sum((pts - x) ** 2, axis=1)))
    # golden-section polish around the best sample
    lo, hi = taus[i] - 1.0 / n, taus[i] + 1.0 / n

    def dist(ph):
        return float(np.sum((po.point(ph) - x) ** 2))

    for _ in range(40):
        m1 = lo + 0.382 * (hi - lo)
        m2 = lo + 0.618 * (hi - lo)
        if dist(m1) <= dist(m2):
            hi = m2
        else:
            lo = m1
    return float(0.5 * (lo + hi) % 1.0)


def projection_bc(end_state: np.ndarray, po: periodic_mod.PeriodicOrbit,
                  side: str, trust_radius: float = 1e-2) -> np.ndarray:
    """Projection boundary-condition residual at the nearest orbit phase.

    side = "stable-arrival": the displacement must lie in the span of the
    flow direction and the stable bundles (residual = components along the
    left directions of the unstable multipliers); "unstable-departure" is the
    mirror case.  Warns via RuntimeWarning when the displacement exceeds the
    linearization trust radius.
    """
    if po.floquet is None:
        raise ValueError("orbit needs Floquet data for projection conditions")
    fd = po.floquet
    phase = _nearest_phase(po, end_state)
    disp = end_state - po.point(phase)
    if np.linalg.norm(disp) > trust_radius:
        import warnings
        warnings.warn(f"displacement {np.linalg.norm(disp):.2e} beyond the "
                      f"linearization trust radius {trust_radius:g}", RuntimeWarning)
    mods = np.abs(fd.multipliers)
    if side == "stable-arrival":
        forbidden = [i for i in range(len(mods))
                     if i != fd.trivial_index and mods[i] > 1.0]
    elif side == "unstable-departure":
        forbidden = [i for i in range(len(mods))
                     if i != fd.trivial_index and mods[i] < 1.0]
    else:
        raise ValueError(f"unknown side {side!r}")
    # admissible frame: flow direction + bundles of the non-forbidden multipliers
    tang = po.tangent(phase)
    frame = [tang / np.linalg.norm(tang)]
    for i in range(len(mods)):
        if i == fd.trivial_index or i in forbidden:
            continue
        frame.append(fd.bundle_by_index(i, phase))
    A = np.array(frame)
    # residual: components of disp orthogonal to span(A), one per forbidden dir
    _, _, Vt = np.linalg.svd(A)
    null = Vt[len(frame):]
    return null @ disp


# ---------------------------------------------------------------- problem

@dataclass
class LinConfig:
    kind: str = "A"                 # "A": 1D depart / 1D arrive; "B": 1D / 2D
    delta_depart: float = 1e-4
    delta_arrive: float = 1e-4      # A-type arrival offset (fixed)
    depart_sign: int = -1
    arrive_sign: int = 1
    N_minus: int = 140
    N_plus: int = 280
    m: int = 4
    newton_tol: float = 1e-10
    trust_radius: float = 1e-2
    source_bundle: str = "u"
    target_bundles: tuple = ("s",)


@dataclass
class _OrbitSlot:
    po: periodic_mod.PeriodicOrbit
    fd: periodic_mod.FloquetData


@dataclass
class LinProblem:
    config: LinConfig
    section: LinSection
    source: _OrbitSlot
    target: _OrbitSlot
    seg_minus: bvp.OrbitSegment
    seg_plus: bvp.OrbitSegment
    scalars: dict                  # current values: Tm, Tp, phases, offsets, eta
    pvals: dict
    fixed: dict = dfield(default_factory=dict)   # e.g. B: phi2 fixed, Tp fixed

    @property
    def eta(self) -> float:
        return float(self.scalars["eta"])

    def gap_vector(self) -> np.ndarray:
        return self.seg_plus.start - self.seg_minus.end

    def set_orbits(self, source_po, source_fd, target_po, target_fd):
        self.source = _OrbitSlot(source_po, source_fd)
        self.target = _OrbitSlot(target_po, target_fd)

    # ---- assembly
    def _build(self, pin_eta: float | None = None) -> bvp.BvpProblem:
        cfg = self.config
        prob = bvp.BvpProblem()
        sc = self.scalars
        prob.add_scalar("Tm", sc["Tm"])
        if cfg.kind == "A":
            prob.add_scalar("Tp", sc["Tp"])
            prob.add_scalar("phi1", sc["phi1"])
            prob.add_scalar("phi2", sc["phi2"])
        else:
            prob.add_scalar("phi1", sc["phi1"])
            prob.add_scalar("dels", sc["dels"])
            prob.add_scalar("delss", sc["delss"])
        if pin_eta is None:
            prob.add_scalar("eta", sc.get("eta", 0.0))
        self.seg_minus.pvals = dict(self.pvals)
        self.seg_plus.pvals = dict(self.pvals)
        prob.add_segment(self.seg_minus, T=("scalar", "Tm"))
        if cfg.kind == "A":
            prob.add_segment(self.seg_plus, T=("scalar", "Tp"))
        else:
            prob.add_segment(self.seg_plus, T=self.fixed["Tp"])

        src, tgt = self.source, self.target

        if cfg.kind == "A":
            def start_bc(ctx):
                ph = ctx.scalar("phi1")
                return (ctx.seg_start(0) - src.po.point(ph)
                        - cfg.depart_sign * cfg.delta_depart
                        * src.fd.bundle(cfg.source_bundle, ph))
            prob.add_condition(bvp.FDCondition(
                start_bc, depends=[("start", 0), ("scalar", "phi1")], size=4))

            def end_bc(ctx):
                ph = ctx.scalar("phi2")
                return (ctx.seg_end(1) - tgt.po.point(ph)
                        - cfg.arrive_sign * cfg.delta_arrive
                        * tgt.fd.bundle(cfg.target_bundles[0], ph))
            prob.add_condition(bvp.FDCondition(
                end_bc, depends=[("end", 1), ("scalar", "phi2")], size=4))
        else:
            # departure in frame coordinates at the fixed phase: each entry of
            # start_pins fixes the corresponding frame coordinate of the
            # displacement (None leaves it free); leaving the strong-unstable
            # coordinate free respects the dichotomy and keeps long shadowing
            # segments well conditioned
            phi2 = self.fixed["phi2"]
            gamma2_pt = src.po.point(phi2)
            Rinv = _frame_inverse(src.po, src.fd, phi2)
            coord_row = {"flow": Rinv[0], "stable": Rinv[1],
                         "weak": Rinv[2], "strong": Rinv[3]}
            pins = [(coord_row[name], val)
                    for name, val in self.fixed["start_pins"].items()
                    if val is not None]

            def start_bc(ctx):
                disp = ctx.seg_start(0) - gamma2_pt
                return np.array([row @ disp - val for row, val in pins])
            prob.add_condition(bvp.FDCondition(
                start_bc, depends=[("start", 0)], size=len(pins)))

            def end_bc(ctx):
                ph = ctx.scalar("phi1")
                b1, b2 = cfg.target_bundles
                return (ctx.seg_end(1) - tgt.po.point(ph)
                        - ctx.scalar("dels") * tgt.fd.bundle(b1, ph)
                        - ctx.scalar("delss") * tgt.fd.bundle(b2, ph))
            prob.add_condition(bvp.FDCondition(
                end_bc, depends=[("end", 1), ("scalar", "phi1"),
                                 ("scalar", "dels"), ("scalar", "delss")], size=4))

        sec = self.section

        def plane_bc(ctx):
            return (ctx.seg_end(0) - sec.q) @ sec.normal
        prob.add_condition(bvp.FDCondition(plane_bc, depends=[("end", 0)], size=1))

        if pin_eta is None:
            def gap_bc(ctx):
                return (ctx.seg_start(1) - ctx.seg_end(0)
                        - ctx.scalar("eta") * sec.Z)
            prob.add_condition(bvp.FDCondition(
                gap_bc, depends=[("start", 1), ("end", 0), ("scalar", "eta")], size=4))
        else:
            def gap_bc(ctx):
                return (ctx.seg_start(1) - ctx.seg_end(0) - pin_eta * sec.Z)
            prob.add_condition(bvp.FDCondition(
                gap_bc, depends=[("start", 1), ("end", 0)], size=4))
        return prob

    def solve(self, pin_eta: float | None = None,
              opts: bvp.SolverOptions | None = None,
              remesh_retry: bool = True) -> float:
        cfg = self.config
        opts = opts or bvp.SolverOptions(newton_tol=cfg.newton_tol,
                                         max_newton_iter=16)
        snap = self.snapshot()
        try:
            prob = self._build(pin_eta)
            prob.solve(opts)
        except bvp.NewtonDivergenceError:
            if not remesh_retry:
                raise
            # adapt both meshes to the last iterate and retry once
            self.restore(snap)
            self.seg_minus = bvp.remesh(self.seg_minus)
            self.seg_plus = bvp.remesh(self.seg_plus)
            prob = self._build(pin_eta)
            prob.solve(opts)
        for k in prob.scalars:
            self.scalars[k] = prob.scalars[k]
        if pin_eta is not None:
            self.scalars["eta"] = pin_eta
        return self.eta

    # ---- warm-start management
    def snapshot(self) -> tuple:
        return (self.seg_minus.copy(), self.seg_plus.copy(),
                dict(self.scalars), dict(self.pvals), dict(self.fixed))

    def restore(self, snap: tuple):
        self.seg_minus = snap[0].copy()
        self.seg_plus = snap[1].copy()
        self.scalars = dict(snap[2])
        self.pvals = dict(snap[3])
        self.fixed = dict(snap[4])

    # ---- audits
    def gap_off_direction_norm(self) -> float:
        g = self.gap_vector() - self.eta * self.section.Z
        return float(np.linalg.norm(g))

    def transversality(self) -> float:
        f = model.rhs(self.section.q, model.Parameters(**self.pvals))
        return float(abs(f @ self.section.normal) / np.linalg.norm(f))


# ---------------------------------------------------------------- results

@dataclass
class ConnectingOrbit:
    kind: str                       # "A" | "B-member"
    segments: list                  # [u_minus, u_plus]
    pvals: dict
    scalars: dict
    source_label: str = ""
    target_label: str = ""

    @property
    def total_time(self) -> float:
        return float(sum(s.T for s in self.segments))

    def sample(self, n_per_segment: int = 600) -> np.ndarray:
        out = []
        for s in self.segments:
            taus = np.linspace(0.0, 1.0, n_per_segment)
            out.append(s.interpolate(taus))
        return np.vstack(out)

    def crossings(self, section: sections.SectionConfig | None = None) -> list:
        """Section crossings over both segments with global times/indices."""
        section = section or sections.SectionConfig()
        out = []
        t0 = 0.0
        for s in self.segments:
            for cr in sections.segment_crossings(s, section):
                out.append(sections.SectionCrossing(
                    tau=cr.tau, time=t0 + cr.time, state=cr.state,
                    side=cr.side, index=0))
            t0 += s.T
        out.sort(key=lambda c: c.time)
        # drop a duplicate at the segment junction (gap point on the section)
        dedup = []
        for c in out:
            if dedup and abs(c.time - dedup[-1].time) < 1e-9 * max(1.0, t0):
                continue
            dedup.append(c)
        for i, c in enumerate(dedup):
            c.index = i + 1
        return dedup


@dataclass
class CylinderFamily:
    members: list                   # ConnectingOrbit per delta
    deltas: np.ndarray
    pvals: dict
    meta: dict = dfield(default_factory=dict)


# ---------------------------------------------------------------- seeding

def _zoom_best_shot(po_src, fd_src, which, sign, delta, target_tree, pvals,
                    t_max, rounds=5, pts=21, span=(0.0, 1.0),
                    opts: ivp.IntegratorOptions | None = None):
    """Phase of the bundle shot whose forward trajectory comes closest to the
    target tree; recursive grid zoom."""
    opts = opts or ivp.IntegratorOptions(rel_tol=1e-10, abs_tol=1e-12,
                                         max_time=t_max, blowup_norm=200.0)
    lo, hi = span
    best = None
    for _ in range(rounds):
        phases = np.linspace(lo, hi, pts)
        dists = np.empty(pts)
        trajs = []
        for i, ph in enumerate(phases):
            x0 = po_src.point(ph % 1.0) + sign * delta * fd_src.bundle(which, ph % 1.0)
            tr = ivp.integrate(x0, model.Parameters(**pvals), t_max, opts)
            ts = np.linspace(0.0, tr.t_end, 1400)
            X = tr(ts)
            dd, _ = target_tree.query(X)
            dists[i] = dd.min()
            trajs.append((tr, ts, X, dd))
        i = int(np.argmin(dists))
        best = (phases[i], trajs[i], dists[i])
        w = (hi - lo) / (pts - 1)
        lo, hi = phases[i] - w, phases[i] + w
    return best


def _transit_split(tr, ts, X, dist_to_target, src_tree, frac=0.5):
    """Arclength-midpoint state of the transit window (between leaving the
    source neighbourhood and entering the target neighbourhood)."""
    dsrc, _ = src_tree.query(X)
    scale = max(dist_to_target.max(), dsrc.max())
    r_leave = 0.12 * scale
    inside_src = dsrc < r_leave
    i_target = int(np.argmin(dist_to_target))
    leave_candidates = np.nonzero(inside_src[:i_target])[0]
    i_leave = int(leave_candidates[-1]) + 1 if len(leave_candidates) else 0
    r_enter = max(2.0 * dist_to_target[i_target], 0.12 * scale)
    enter_candidates = np.nonzero(dist_to_target[i_leave:i_target + 1] < r_enter)[0]
    i_enter = i_leave + int(enter_candidates[0]) if len(enter_candidates) else i_target
    if i_enter <= i_leave:
        i_leave = max(i_enter - 1, 0)
    # arclength between the two indices
    seg = X[i_leave:i_enter + 1]
    dl = np.linalg.norm(np.diff(seg, axis=0), axis=1)
    arel = np.concatenate([[0.0], np.cumsum(dl)])
    target_l = frac * arel[-1]
    j = int(np.searchsorted(arel, target_l))
    j = min(max(j, 0), len(seg) - 1)
    i_mid = i_leave + j
    return i_mid, i_target


def _segment_from_traj(field, tr, t_lo, t_hi, N, m, pvals) -> bvp.OrbitSegment:
    T = t_hi - t_lo
    return bvp.segment_from_callable(
        field, lambda taus: tr(t_lo + taus * T), bvp.uniform_mesh(N), m, T, pvals)


# ---------------------------------------------------------------- orbit pairs

class OrbitPair:
    """Warm re-solver for the two saddle orbits as parameters move."""

    def __init__(self, po_source: periodic_mod.PeriodicOrbit,
                 po_target: periodic_mod.PeriodicOrbit,
                 solver: bvp.SolverOptions | None = None):
        self.source = po_source.copy()
        self.target = po_target.copy()
        self.solver = solver or bvp.SolverOptions(N=po_source.segment.N, m=4)
        self._cache_key = None
        self._cache = None

    def _resolve(self, po, pvals, depth=0):
        opts = bvp.SolverOptions(N=po.segment.N, m=po.segment.m,
                                 newton_tol=self.solver.newton_tol,
                                 max_newton_iter=self.solver.max_newton_iter)
        try:
            po_new = periodic_mod.solve_periodic(po.segment, dict(pvals), opts,
                                                 phase_ref=po.segment)
            # reject branch jumps: the warm start must stay on the same orbit
            if not (0.6 < po_new.T / po.T < 1.7) or \
               not (0.15 < po_new.amplitude() / max(po.amplitude(), 1e-12) < 6.0):
                raise bvp.NewtonDivergenceError(
                    f"warm re-solve jumped branches (T {po.T:.3g} -> {po_new.T:.3g}, "
                    f"amp {po.amplitude():.3g} -> {po_new.amplitude():.3g})")
            return po_new
        except bvp.NewtonDivergenceError:
            if depth >= 6:
                raise
            mid = {k: 0.5 * (po.pvals[k] + pvals[k]) for k in pvals}
            po_mid = self._resolve(po, mid, depth + 1)
            return self._resolve(po_mid, pvals, depth + 1)

    @staticmethod
    def _align_bundles(fd_new, fd_old):
        """Keep bundle signs continuous across parameter steps."""
        if fd_old is None:
            return
        for k, vecs in fd_new.node_bundles.items():
            if k in fd_old.node_bundles:
                if float(vecs[0] @ fd_old.node_bundles[k][0]) < 0.0:
                    fd_new.node_bundles[k] = -vecs

    def at(self, pvals: dict):
        key = tuple(sorted(pvals.items()))
        if key == self._cache_key:
            return self._cache
        out = []
        for slot in ("source", "target"):
            po = getattr(self, slot)
            fd_old = po.floquet
            po_new = self._resolve(po, pvals)
            try:
                po_new.floquet = periodic_mod.monodromy(po_new)
            except RuntimeError:
                # under-resolved: adapt the mesh at higher N and retry
                N_up = min(int(1.5 * po_new.segment.N), 400)
                po_new = periodic_mod.solve_periodic(
                    bvp.remesh(po_new.segment, N_new=N_up), dict(pvals),
                    bvp.SolverOptions(N=N_up, m=po_new.segment.m),
                    phase_ref=po_new.segment)
                po_new.floquet = periodic_mod.monodromy(po_new)
            self._align_bundles(po_new.floquet, fd_old)
            setattr(self, slot, po_new)
            out.append(po_new)
        self._cache_key = key
        self._cache = (out[0], out[0].floquet, out[1], out[1].floquet)
        return self._cache


# ---------------------------------------------------------------- build

def build_lin_problem(source: periodic_mod.PeriodicOrbit,
                      target: periodic_mod.PeriodicOrbit,
                      pvals: dict,
                      config: LinConfig | None = None,
                      t_shoot: float = 120.0,
                      t_shoot_back: float | None = None,
                      section_frac: float = 0.5) -> LinProblem:
    """Construct and converge the two-segment Lin problem from bundle shots.

    The section Pi sits at the arclength midpoint of the best connecting shot
    (normal along the flow); Z is the in-plane component of the initial gap.
    """
    cfg = config or LinConfig()
    if source.floquet is None or target.floquet is None:
        raise ValueError("source/target need Floquet data")
    fd_s, fd_t = source.floquet, target.floquet
    field = source.segment.field

    tgt_tree = _orbit_tree(target)
    src_tree = _orbit_tree(source)
    best = None
    for sign in (cfg.depart_sign, -cfg.depart_sign):
        cand = _zoom_best_shot(source, fd_s, cfg.source_bundle, sign,
                               cfg.delta_depart, tgt_tree, pvals, t_shoot)
        if best is None or cand[2] < best[1][2]:
            best = (sign, cand)
    sign, (phase, (tr, ts, X, dtar), dmin) = best
    cfg.depart_sign = sign
    if dmin > 0.5 * float(np.linalg.norm(target.point(0.0) - source.point(0.0))):
        raise SeedError(f"no shot approaches the target orbit (min dist {dmin:.3g})")

    i_mid, i_target = _transit_split(tr, ts, X, dtar, src_tree, section_frac)
    q = X[i_mid]
    p = model.Parameters(**pvals)
    fq = model.rhs(q, p)
    normal = fq / np.linalg.norm(fq)

    seg_minus = _segment_from_traj(field, tr, 0.0, ts[i_mid], cfg.N_minus, cfg.m, pvals)

    if cfg.kind == "A":
        # arrival seed: backward shots from the target stable bundle to Pi
        t_back = t_shoot_back or 3.0 * t_shoot
        plane_ev = ivp.EventSpec(g=lambda x: (x - q) @ normal, direction=0,
                                 name="Pi")
        best_arr = None
        for sgn2 in (+1, -1):
            for ph2 in np.linspace(0.0, 1.0, 41, endpoint=False):
                z0 = target.point(ph2) + sgn2 * cfg.delta_arrive * fd_t.bundle(
                    cfg.target_bundles[0], ph2)
                trb = ivp.integrate(z0, p, -t_back,
                                    ivp.IntegratorOptions(max_time=t_back,
                                                          blowup_norm=200.0),
                                    events=[plane_ev])
                for h in trb.events:
                    d = float(np.linalg.norm(h.state - q))
                    if best_arr is None or d < best_arr[0]:
                        best_arr = (d, ph2, sgn2, trb, h)
        if best_arr is None:
            raise SeedError("no backward shot from the target bundle reached Pi")
        _, ph2, sgn2, trb, hit = best_arr
        cfg.arrive_sign = sgn2
        # reverse the backward trajectory into a forward segment Pi -> bundle
        Tp = hit.t
        seg_plus = bvp.segment_from_callable(
            field, lambda taus: trb(Tp * (1.0 - taus)), bvp.uniform_mesh(cfg.N_plus),
            cfg.m, Tp, pvals)
        scalars = {"Tm": seg_minus.T, "Tp": seg_plus.T, "phi1": phase % 1.0,
                   "phi2": ph2 % 1.0, "eta": 0.0}
        fixed = {}
    else:
        # B-type: the tail of the same shot, ending near the target, plus a
        # few shadow laps of the target orbit to push the arrival deeper
        extend_laps = int(np.ceil(max(0.0, np.log(
            max(dmin, 1e-12) / (0.3 * cfg.delta_arrive))
            / -np.log(abs(fd_t.multiplier("weak-s"))))))
        T_tail = ts[i_target] - ts[i_mid]
        end0 = X[i_target]
        ph1 = _nearest_phase(target, end0)
        disp0 = end0 - target.point(ph1)
        b1, b2 = cfg.target_bundles
        A = np.array([fd_t.bundle(b1, ph1), fd_t.bundle(b2, ph1)]).T
        coef, *_ = np.linalg.lstsq(A, disp0, rcond=None)
        lam_s = fd_t.multiplier("weak-s")
        lam_ss = fd_t.multiplier("ss")
        T1 = target.T
        Tp = T_tail + extend_laps * T1

        def plus_fn(taus):
            t = np.atleast_1d(taus) * Tp
            out = np.empty((len(t), 4))
            m1 = t <= T_tail
            if np.any(m1):
                out[m1] = tr(ts[i_mid] + t[m1])
            if np.any(~m1):
                te = (t[~m1] - T_tail) / T1  # laps past the closest approach
                ph = ph1 + te
                out[~m1] = (target.point(ph)
                            + (coef[0] * np.power(lam_s, te))[:, None]
                            * fd_t.bundle(b1, ph)
                            + (coef[1] * np.power(np.abs(lam_ss), te))[:, None]
                            * fd_t.bundle(b2, ph))
            return out

        seg_plus = bvp.segment_from_callable(field, plus_fn,
                                             bvp.uniform_mesh(cfg.N_plus),
                                             cfg.m, Tp, pvals)
        ph1_end = (ph1 + extend_laps) % 1.0
        scalars = {"Tm": seg_minus.T, "phi1": ph1_end,
                   "dels": float(coef[0] * lam_s ** extend_laps),
                   "delss": float(coef[1] * abs(lam_ss) ** extend_laps),
                   "eta": 0.0}
        # seed departs along the strong-unstable bundle; the weak coordinate
        # is pinned at zero and the strong one left free for the member solve
        fixed = {"Tp": Tp, "phi2": phase % 1.0,
                 "start_pins": {"flow": 0.0, "stable": 0.0, "weak": 0.0,
                                "strong": None}}

    gap0 = seg_plus.start - seg_minus.end
    gap_in = gap0 - (gap0 @ normal) * normal
    ng = np.linalg.norm(gap_in)
    if ng < 1e-13:
        # degenerate (already closed): any in-plane direction will do
        gap_in = _complete_in_plane(normal, normal + 1e-3)[0]
        ng = 1.0
    Z = gap_in / ng
    Y = _complete_in_plane(normal, Z)
    lp = LinProblem(config=cfg, section=LinSection(q=q, normal=normal, Z=Z, Y=Y),
                    source=_OrbitSlot(source, fd_s), target=_OrbitSlot(target, fd_t),
                    seg_minus=seg_minus, seg_plus=seg_plus,
                    scalars=scalars, pvals=dict(pvals), fixed=fixed)
    lp.scalars["eta"] = float(gap0 @ Z)
    if cfg.kind == "A":
        lp.solve()
    else:
        # converge the transverse member directly (gap pinned closed)
        lp.solve(pin_eta=0.0)
        lp.scalars["eta"] = 0.0
    return lp


# ---------------------------------------------------------------- drivers

def _stepped_eta(pair: OrbitPair, lp: LinProblem, pv_target: dict,
                 depth: int = 0) -> float:
    """Solve the Lin problem at new parameters, halving the parameter step on
    Newton failure (warm starts track the branch)."""
    snap = lp.snapshot()
    s_po, s_fd, t_po, t_fd = pair.at(pv_target)
    lp.set_orbits(s_po, s_fd, t_po, t_fd)
    lp.pvals = dict(pv_target)
    try:
        return lp.solve()
    except bvp.NewtonDivergenceError:
        if depth >= 4:
            raise
        lp.restore(snap)
        pv_mid = {k: 0.5 * (snap[3][k] + pv_target[k]) for k in pv_target}
        _stepped_eta(pair, lp, pv_mid, depth + 1)
        return _stepped_eta(pair, lp, pv_target, depth + 1)


def close_gap_in_parameter(pair: OrbitPair, lp: LinProblem, free_param: str = "J",
                           scan: tuple[float, float] = (2.9, 3.1),
                           n_scan: int = 9, eta_tol: float = 1e-10,
                           max_iter: int = 40) -> tuple[float, ConnectingOrbit]:
    """Locate the parameter value closing the Lin gap (secant after a scan)."""
    base = dict(lp.pvals)

    def eta_at(val: float) -> float:
        return _stepped_eta(pair, lp, {**base, free_param: float(val)})

    vals = list(np.linspace(scan[0], scan[1], n_scan))
    done: list[tuple[float, float]] = []
    bracket = None
    i = 0
    fail_budget = 8
    snap0 = lp.snapshot()
    while i < len(vals) and bracket is None:
        v = vals[i]
        snap = lp.snapshot()
        try:
            e = eta_at(v)
        except (bvp.NewtonDivergenceError, bvp.SingularSystemError):
            lp.restore(snap)
            if fail_budget <= 0:
                raise
            fail_budget -= 1
            if done:
                # probe between the last good value and the failure (an orbit
                # may cease to exist, or the connection sheet may fold)
                vals[i] = 0.5 * (done[-1][0] + v)
                if abs(vals[i] - done[-1][0]) < 1e-6:
                    i += 1
            else:
                i += 1  # unreachable from the seed side: skip this value
            continue
        done.append((v, e))
        if len(done) >= 2 and np.sign(done[-1][1]) != np.sign(done[-2][1]):
            bracket = (done[-2][0], done[-1][0], done[-2][1], done[-1][1])
        i += 1
    if bracket is None:
        lo = min(e for _, e in done) if done else np.nan
        hi = max(e for _, e in done) if done else np.nan
        raise GapSignError(
            f"eta has no sign change over {free_param} in {scan}: "
            f"range [{lo:.3e}, {hi:.3e}]")
    a, b, fa, fb = bracket
    for _ in range(max_iter):
        c = b - fb * (b - a) / (fb - fa)
        if not min(a, b) <= c <= max(a, b):
            c = 0.5 * (a + b)
        fc = eta_at(c)
        if abs(fc) <= eta_tol:
            # polish: adapt both meshes to the converged connection and
            # re-solve so interior crossing states reach interpolation accuracy
            lp.seg_minus = bvp.remesh(lp.seg_minus)
            lp.seg_plus = bvp.remesh(lp.seg_plus)
            lp.solve(remesh_retry=False)
            co = ConnectingOrbit(kind="A",
                                 segments=[lp.seg_minus.copy(), lp.seg_plus.copy()],
                                 pvals=dict(lp.pvals), scalars=dict(lp.scalars))
            return float(c), co
        if np.sign(fc) == np.sign(fa):
            a, fa = c, fc
        else:
            b, fb = c, fc
    raise RuntimeError(f"gap refinement stalled: |eta| = {abs(fc):.2e}")


def close_gap_in_phase(lp: LinProblem, lam_uu: float,
                       eta_tol: float = 1e-9, n_scan: int = 17,
                       max_iter: int = 40) -> tuple[float, ConnectingOrbit]:
    """Close the gap at fixed parameters by varying the departure distance
    from the source orbit over one fundamental domain of the local return.

    The distance runs along the strong-unstable bundle (the carrying direction
    of this cylinder): the gap is left free, the distance is pinned per solve,
    and a secant locates the sign change of eta.  The located member is then
    re-solved in the well-conditioned member form (gap pinned closed, strong
    coordinate free)."""
    snap = lp.snapshot()
    # reference strong coordinate of the converged member
    Rinv = _frame_inverse(lp.source.po, lp.source.fd, lp.fixed["phi2"])
    d_ref = float(Rinv[3] @ (lp.seg_minus.start
                             - lp.source.po.point(lp.fixed["phi2"])))
    d0 = d_ref / lam_uu ** 0.5

    def eta_at(duu: float) -> float:
        lp.fixed["start_pins"] = {"flow": 0.0, "stable": 0.0, "weak": 0.0,
                                  "strong": float(duu)}
        return lp.solve()

    grid = d0 * np.power(lam_uu, np.linspace(0.0, 1.0, n_scan))
    etas = []
    bracket = None
    for dv in grid:
        e = eta_at(dv)
        etas.append(e)
        if len(etas) >= 2 and np.sign(etas[-1]) != np.sign(etas[-2]):
            bracket = (grid[len(etas) - 2], dv, etas[-2], etas[-1])
            break
    if bracket is None:
        lp.restore(snap)
        raise GapSignError(
            f"eta has no sign change over the fundamental domain "
            f"[{d0:.3e}, {d0 * lam_uu:.3e}]: range [{min(etas):.3e}, {max(etas):.3e}]")
    a, b, fa, fb = bracket
    fc = fb
    dstar = b
    for _ in range(max_iter):
        c = b - fb * (b - a) / (fb - fa)
        if not min(a, b) <= c <= max(a, b):
            c = 0.5 * (a + b)
        fc = eta_at(c)
        if abs(fc) <= eta_tol:
            dstar = c
            break
        if np.sign(fc) == np.sign(fa):
            a, fa = c, fc
        else:
            b, fb = c, fc
    else:
        raise RuntimeError(f"phase-gap refinement stalled: |eta| = {abs(fc):.2e}")
    # convert to the member form: gap pinned, strong coordinate free
    lp.fixed["start_pins"] = {"flow": 0.0, "stable": 0.0, "weak": 0.0,
                              "strong": None}
    lp.solve(pin_eta=0.0)
    lp.scalars["eta"] = 0.0
    co = ConnectingOrbit(kind="B-member",
                         segments=[lp.seg_minus.copy(), lp.seg_plus.copy()],
                         pvals=dict(lp.pvals), scalars=dict(lp.scalars))
    return float(dstar), co


def sweep_cylinder(lp: LinProblem, lam_u: float, n_members: int = 128,
                   delta0: float = 5e-4, max_bisect: int = 20) -> CylinderFamily:
    """One-parameter family over a full fundamental domain of the weak
    departure coordinate, log-uniform in the offset, gap pinned to zero
    member by member.  The first and last members represent the same
    trajectory with start points related by one application of the
    linearized local return (factor lam_u along the weak bundle)."""
    # walk the weak coordinate away from the seed member first
    sign = lp.fixed.get("sweep_sign", 1.0)
    for d in (0.25 * delta0 * sign, 0.6 * delta0 * sign, delta0 * sign):
        lp.fixed["start_pins"] = {"flow": 0.0, "stable": 0.0,
                                  "weak": float(d), "strong": None}
        lp.solve(pin_eta=0.0)
    d0 = delta0 * sign
    exps = list(np.linspace(0.0, 1.0, n_members))
    members, deltas = [], []
    i = 0
    prev_e = 0.0
    while i < len(exps):
        e = exps[i]
        try:
            lp.fixed["start_pins"]["weak"] = float(d0 * lam_u ** e)
            lp.solve(pin_eta=0.0)
        except bvp.NewtonDivergenceError:
            if max_bisect <= 0 or (e - prev_e) < 1e-4:
                raise
            exps.insert(i, 0.5 * (prev_e + e))
            max_bisect -= 1
            continue
        members.append(ConnectingOrbit(
            kind="B-member", segments=[lp.seg_minus.copy(), lp.seg_plus.copy()],
            pvals=dict(lp.pvals), scalars=dict(lp.scalars)))
        deltas.append(float(d0 * lam_u ** e))
        prev_e = e
        i += 1
    return CylinderFamily(members=members, deltas=np.array(deltas),
                          pvals=dict(lp.pvals),
                          meta={"lam_u": lam_u, "d0": d0})


def continue_ptop_locus(pair: OrbitPair, lp: LinProblem,
                        s_values: Sequence[float], start_J: float,
                        eta_tol: float = 1e-8) -> list[tuple[float, float, float]]:
    """Two-parameter locus of the closed-gap connection over a grid of s."""
    base = dict(lp.pvals)

    def eta_at(J: float, s: float) -> float:
        pv = {**base, "J": float(J), "s": float(s)}
        s_po, s_fd, t_po, t_fd = pair.at(pv)
        lp.set_orbits(s_po, s_fd, t_po, t_fd)
        lp.pvals = pv
        return lp.solve()

    from .continuation import continue_locus
    return continue_locus(eta_at, (start_J, float(s_values[0])), s_values,
                          pin_tol=eta_tol)
