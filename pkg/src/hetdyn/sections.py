"""The section {c = 0.15}, its tangency locus, and crossing extraction.

Crossings of collocation segments are located on the piecewise-polynomial
interpolant (bisection + secant to |c - 0.15| <= 1e-12) and classified by the
sign of v into the two half-sections; crossings inside the near-tangency band
are flagged unclassified instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield

import numpy as np

from . import bvp

__all__ = ["SectionConfig", "SectionCrossing", "segment_crossings", "sigma_coords"]


@dataclass(frozen=True)
class SectionConfig:
    c_value: float = 0.15
    v_tol: float = 1e-9              # near-tangency band |v| < v_tol
    root_tol: float = 1e-12          # |c - c_value| after polishing
    max_spacing: float = 1e-2        # curve assembly: max gap between points
    box_v: float = 50.0              # truncation box in Sigma coordinates
    box_ct: tuple = (15.0, 50.0)
    box_n: tuple = (0.0, 1.2)

    def classify(self, state: np.ndarray) -> int:
        """+1 in Sigma+, -1 in Sigma-, 0 in the near-tangency band."""
        v = state[1]
        if abs(v) < self.v_tol:
            return 0
        return 1 if v > 0 else -1

    def inside_box(self, state: np.ndarray) -> bool:
        v, ct, n = state[1], state[2], state[3]
        return (abs(v) <= self.box_v and self.box_ct[0] <= ct <= self.box_ct[1]
                and self.box_n[0] <= n <= self.box_n[1])


@dataclass
class SectionCrossing:
    tau: float               # location in the segment's rescaled time
    time: float              # true time from segment start (tau * T)
    state: np.ndarray
    side: int                # +1 / -1 / 0 (near tangent)
    index: int               # 1-based crossing count from the segment start


def _polish(seg: bvp.OrbitSegment, lo: float, hi: float, c_val: float,
            tol: float) -> float:
    """Root of c(tau) - c_val in [lo, hi] by bisection with secant steps."""
    f_lo = seg.interpolate(lo)[0] - c_val
    f_hi = seg.interpolate(hi)[0] - c_val
    if f_lo == 0.0:
        return lo
    for _ in range(200):
        mid = hi - f_hi * (hi - lo) / (f_hi - f_lo) if f_hi != f_lo else 0.5 * (lo + hi)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        f_mid = seg.interpolate(mid)[0] - c_val
        if abs(f_mid) <= tol:
            return mid
        if np.sign(f_mid) == np.sign(f_lo):
            lo, f_lo = mid, f_mid
        else:
            hi, f_hi = mid, f_mid
    return mid


def segment_crossings(seg: bvp.OrbitSegment, section: SectionConfig | None = None,
                      skip_start: float = 0.0,
                      samples_per_interval: int = 8) -> list[SectionCrossing]:
    """All transversal crossings of the section along one segment, in order."""
    section = section or SectionConfig()
    ntaus = seg.N * samples_per_interval + 1
    taus = np.linspace(0.0, 1.0, ntaus)
    cs = seg.interpolate(taus)[:, 0] - section.c_value
    out: list[SectionCrossing] = []
    idx = 0
    for i in range(len(taus) - 1):
        if taus[i + 1] <= skip_start:
            continue
        a, b = cs[i], cs[i + 1]
        if a == 0.0 and i == 0:
            root = 0.0
        elif a * b > 0.0 or (a == 0.0):
            continue
        else:
            root = _polish(seg, taus[i], taus[i + 1], section.c_value, section.root_tol)
        state = seg.interpolate(root)
        idx += 1
        out.append(SectionCrossing(tau=float(root), time=float(root * seg.T),
                                   state=state, side=section.classify(state),
                                   index=idx))
    return out


def sigma_coords(state: np.ndarray) -> np.ndarray:
    """Project a full state onto the section coordinates (v, c_t, n)."""
    return np.asarray(state)[..., 1:4]
