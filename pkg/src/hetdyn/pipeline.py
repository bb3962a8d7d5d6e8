"""Staged computations behind the command-line interface.

Each stage produces files in an output directory and can reload earlier
stages' files, so expensive objects (the two saddle orbits, the closed-gap
connection, the cylinder) are computed once and reused across runs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field as dfield
from pathlib import Path

import numpy as np

from . import (bvp, connect, continuation, io_formats, ivp, manifold, model,
               periodic as periodic_mod, sections)

__all__ = ["PipelineConfig", "Workspace"]

J_STAR_REF = 3.02661
S_STAR = 9.0


@dataclass
class PipelineConfig:
    J: float = J_STAR_REF
    s: float = S_STAR
    N_po_small: int = 60
    N_po_large: int = 90
    m: int = 4
    hopf_bracket_small: tuple = (2.9, 3.2)
    hopf_bracket_large: tuple = (5.7, 6.4)
    hopf_amplitude: float = 1e-3
    scan_J: tuple = (2.9, 3.1)
    delta_depart_A: float = 1e-4
    delta_arrive_A: float = 1e-4
    delta_seed_B: float = 1e-3    # strong-bundle seed offset for the cylinder
    delta_sweep_B: float = 5e-4   # weak-coordinate domain start for the sweep
    n_cylinder: int = 120
    overrides: dict = dfield(default_factory=dict)

    def pvals(self, **kw) -> dict:
        pv = model.Parameters(J=self.J, s=self.s).as_dict()
        pv.update(self.overrides)
        pv.update(kw)
        return pv


class Workspace:
    """File-backed pipeline state rooted at an output directory."""

    def __init__(self, outdir, config: PipelineConfig | None = None):
        self.dir = Path(outdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config or PipelineConfig()

    # ------------------------------------------------------------- orbits
    def _orbit_path(self, name: str) -> Path:
        return self.dir / f"{name}.dat"

    def _orbit_from_hopf(self, bracket, N, uz_target, span, direction=-1):
        cfg = self.config
        pv = cfg.pvals(J=float(np.mean(bracket)))
        eqf = lambda pvals: model.equilibrium(model.Parameters(**pvals))
        JH, om, q = continuation.find_hopf(model.FIELD, pv, "J", bracket, eqf)
        po = periodic_mod.start_from_hopf(
            model.FIELD, {**pv, "J": JH}, eqf({**pv, "J": JH}), om, q, "J", eqf,
            amplitude=cfg.hopf_amplitude, opts=bvp.SolverOptions(N=N, m=cfg.m))
        br = continuation.continue_periodic(
            po, "J", span,
            step=continuation.StepOptions(ds=0.01, ds_max=0.09, max_points=500,
                                          direction=direction, adapt_every=5),
            solver=bvp.SolverOptions(N=N, m=cfg.m), uz_targets=[uz_target])
        uz = br.labelled("UZ")
        if not uz:
            raise RuntimeError(
                f"branch from the Hopf point at J = {JH:.6f} never reached "
                f"J = {uz_target} (stop: {br.meta.get('stop')})")
        bp = uz[-1]
        orbit = periodic_mod.PeriodicOrbit(bp.segment, bp.pvals)
        orbit.floquet = periodic_mod.monodromy(orbit)
        return orbit

    def _save_orbit(self, name: str, po: periodic_mod.PeriodicOrbit):
        fd = po.floquet
        eig = {}
        if fd is not None:
            for i in range(len(fd.multipliers)):
                if i in fd.node_bundles:
                    eig[f"right_{i}"] = fd.node_bundles[i][0]
                eig[f"left_{i}"] = np.real(fd.left_vectors[:, i])
        io_formats.write_solution(
            self._orbit_path(name), label=name, kind="periodic",
            pvals=po.pvals, segments=po.segment,
            multipliers=None if fd is None else fd.multipliers,
            eigvectors=eig)

    def _load_orbit(self, name: str):
        path = self._orbit_path(name)
        if not path.exists():
            return None
        data = io_formats.read_solution(path)
        seg = data.to_segments()[0]
        po = periodic_mod.PeriodicOrbit(seg, data.pvals)
        po.floquet = periodic_mod.monodromy(po)
        return po

    def orbit(self, name: str, refresh: bool = False) -> periodic_mod.PeriodicOrbit:
        """The two saddle orbits at (J, s): 'gamma1' (index 1) or 'gamma2'
        (index 2), computed from their Hopf stems and cached on disk."""
        if not refresh:
            po = self._load_orbit(name)
            if po is not None:
                return po
        cfg = self.config
        if name == "gamma2":
            po = self._orbit_from_hopf(cfg.hopf_bracket_small, cfg.N_po_small,
                                       cfg.J, (cfg.J - 0.01, cfg.hopf_bracket_small[1]))
        elif name == "gamma1":
            po = self._orbit_from_hopf(cfg.hopf_bracket_large, cfg.N_po_large,
                                       cfg.J, (cfg.J - 0.01, cfg.hopf_bracket_large[1]))
        else:
            raise KeyError(name)
        self._save_orbit(name, po)
        return po

    # -------------------------------------------------------- connection A
    def _lin_state_path(self, name: str) -> Path:
        return self.dir / f"{name}_lin.json"

    def _save_lin(self, name: str, lp: connect.LinProblem, extra: dict):
        io_formats.write_solution(
            self.dir / f"{name}.dat", label=name, kind="connecting",
            pvals=lp.pvals, segments=[lp.seg_minus, lp.seg_plus])
        state = {
            "q": lp.section.q.tolist(), "normal": lp.section.normal.tolist(),
            "Z": lp.section.Z.tolist(), "Y": lp.section.Y.tolist(),
            "scalars": lp.scalars, "fixed": lp.fixed,
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in asdict(lp.config).items()},
            **extra,
        }
        self._lin_state_path(name).write_text(json.dumps(state, indent=1))

    def _load_lin(self, name: str, source, target):
        path = self._lin_state_path(name)
        if not path.exists():
            return None, None
        state = json.loads(path.read_text())
        data = io_formats.read_solution(self.dir / f"{name}.dat")
        segs = data.to_segments()
        cfgd = dict(state["config"])
        cfgd["target_bundles"] = tuple(cfgd["target_bundles"])
        cfg = connect.LinConfig(**cfgd)
        lp = connect.LinProblem(
            config=cfg,
            section=connect.LinSection(q=np.array(state["q"]),
                                       normal=np.array(state["normal"]),
                                       Z=np.array(state["Z"]),
                                       Y=np.array(state["Y"])),
            source=connect._OrbitSlot(source, source.floquet),
            target=connect._OrbitSlot(target, target.floquet),
            seg_minus=segs[0], seg_plus=segs[1],
            scalars=dict(state["scalars"]), pvals=data.pvals,
            fixed=dict(state["fixed"]))
        return lp, state

    def connection_A(self, refresh: bool = False):
        """The codimension-one connection: (J_star, LinProblem, ConnectingOrbit,
        OrbitPair).  The gap is closed in J at fixed s."""
        cfg = self.config
        g1 = self.orbit("gamma1")
        g2 = self.orbit("gamma2")
        pair = connect.OrbitPair(g1, g2)
        if not refresh:
            lp, state = self._load_lin("connection_A", g1, g2)
            if lp is not None:
                co = connect.ConnectingOrbit(
                    kind="A", segments=[lp.seg_minus.copy(), lp.seg_plus.copy()],
                    pvals=dict(lp.pvals), scalars=dict(lp.scalars))
                # re-align the pair state with the stored parameters
                pair.at(lp.pvals)
                lp.set_orbits(pair.source, pair.source.floquet,
                              pair.target, pair.target.floquet)
                return state["J_star"], lp, co, pair
        pv0 = cfg.pvals(J=3.0)
        s_po, s_fd, t_po, t_fd = pair.at(pv0)
        lin_cfg = connect.LinConfig(
            kind="A", delta_depart=cfg.delta_depart_A,
            delta_arrive=cfg.delta_arrive_A)
        lp = connect.build_lin_problem(s_po, t_po, pv0, lin_cfg, t_shoot=140.0)
        J_star, co = connect.close_gap_in_parameter(pair, lp, "J",
                                                    scan=cfg.scan_J)
        self._save_lin("connection_A", lp, {"J_star": J_star})
        return J_star, lp, co, pair

    # ---------------------------------------------------------- cylinder B
    def cylinder(self, refresh: bool = False):
        """One closed-gap member of the cylinder at (J_star, s) plus the swept
        family: (delta_star, member, family, lp_B)."""
        cfg = self.config
        J_star, lp_A, co_A, pair = self.connection_A()
        src = pair.target   # cylinder departs the index-2 orbit
        tgt = pair.source   # and arrives at the index-1 orbit
        pv = dict(lp_A.pvals)
        if not refresh:
            lpb, state = self._load_lin("cylinder_member", src, tgt)
            if lpb is not None:
                member = connect.ConnectingOrbit(
                    kind="B-member",
                    segments=[lpb.seg_minus.copy(), lpb.seg_plus.copy()],
                    pvals=dict(lpb.pvals), scalars=dict(lpb.scalars))
                fam = self._load_family()
                return state["delta_star"], member, fam, lpb
        lin_cfg = connect.LinConfig(
            kind="B", delta_depart=cfg.delta_seed_B, delta_arrive=5e-4,
            N_minus=140, N_plus=260,
            source_bundle="uu", target_bundles=("weak-s", "ss"))
        lpb = connect.build_lin_problem(src, tgt, pv, lin_cfg, t_shoot=200.0)
        lam_uu = src.floquet.multiplier("uu")
        delta_star, member = connect.close_gap_in_phase(lpb, lam_uu)
        self._save_lin("cylinder_member", lpb, {"delta_star": delta_star})
        lam_u = src.floquet.multiplier("weak-u")
        fam = connect.sweep_cylinder(lpb, lam_u, n_members=cfg.n_cylinder,
                                     delta0=cfg.delta_sweep_B)
        self._save_family(fam)
        return delta_star, member, fam, lpb

    def _family_path(self) -> Path:
        return self.dir / "cylinder_family.dat"

    def _save_family(self, fam: connect.CylinderFamily):
        segs = []
        for co in fam.members:
            segs.extend(co.segments)
        io_formats.write_solution(
            self._family_path(), label="cylinder_family", kind="family",
            pvals=fam.pvals, segments=segs,
            extra={"n_members": len(fam.members),
                   "deltas": " ".join(repr(float(d)) for d in fam.deltas),
                   "lam_u": repr(float(fam.meta.get("lam_u", 0.0)))})

    def _load_family(self):
        path = self._family_path()
        if not path.exists():
            return None
        data = io_formats.read_solution(path)
        segs = data.to_segments()
        deltas = np.array([float(x) for x in data.extra["deltas"].split()])
        members = []
        for i in range(len(segs) // 2):
            members.append(connect.ConnectingOrbit(
                kind="B-member", segments=[segs[2 * i], segs[2 * i + 1]],
                pvals=data.pvals, scalars={}))
        return connect.CylinderFamily(members=members, deltas=deltas,
                                      pvals=data.pvals,
                                      meta={"lam_u": float(data.extra.get("lam_u", 0.0))})

    # ------------------------------------------------------------- curves
    def save_curve(self, name: str, curve: manifold.IntersectionCurve,
                   pvals: dict):
        io_formats.write_curve(self.dir / f"{name}.dat", label=curve.label,
                               kind="intersection_curve", pvals=pvals,
                               rows=curve.rows(),
                               extra={"meta": json.dumps(
                                   {k: str(v) for k, v in curve.meta.items()})})

    def load_curve(self, name: str):
        path = self.dir / f"{name}.dat"
        if not path.exists():
            return None
        data = io_formats.read_curve(path)
        rows = data.rows
        sig = rows[:, 2:5]
        states = np.column_stack([np.full(len(rows), 0.15), sig])
        return manifold.IntersectionCurve(
            label=data.label, states=states, family_param=rows[:, 0],
            crossing_index=rows[:, 1], sides=rows[:, 5],
            meta={"loaded_from": str(path)})
