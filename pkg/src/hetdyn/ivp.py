"""Initial-value integration with dense output and event detection.

Thin layer over scipy's DOP853 (adaptive Runge-Kutta with free dense output).
Backward-time runs integrate the negated vector field, so trajectory times are
always reported increasing in the direction of integration.  Events locate
zero crossings of scalar functions of the state on the dense output; crossings
of the standard section {c = c_sec} are classified by the sign of v, with a
near-tangency band flagged instead of classified.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from . import model

__all__ = [
    "IntegratorOptions",
    "EventSpec",
    "EventHit",
    "Trajectory",
    "section_event",
    "integrate",
    "return_to_section",
    "IntegrationError",
    "BlowupError",
    "NoReturnError",
    "TangencyError",
]


class IntegrationError(RuntimeError):
    pass


class BlowupError(IntegrationError):
    """State became non-finite or left the safeguard ball."""


class NoReturnError(IntegrationError):
    """Requested section crossing was not reached within max_time."""


class TangencyError(IntegrationError):
    """Crossing too close to the tangency locus to classify."""


@dataclass
class IntegratorOptions:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_step: float = np.inf
    max_time: float = 2000.0
    blowup_norm: float = 1e4
    c_floor: float = -0.9  # stop before the c = -phi2 singularity

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class EventSpec:
    """Scalar event g(state) = 0 with an optional crossing-direction filter.

    direction: +1 only increasing g, -1 only decreasing, 0 both.
    count: stop after this many accepted crossings (0 = never terminal).
    """

    g: Callable[[np.ndarray], float]
    direction: int = 0
    count: int = 0
    name: str = "event"


def section_event(c_val: float = 0.15, direction: int = 0, count: int = 0) -> EventSpec:
    return EventSpec(g=lambda x: x[0] - c_val, direction=direction, count=count,
                     name=f"c={c_val}")


@dataclass
class EventHit:
    t: float
    state: np.ndarray
    event_index: int
    direction: int  # sign of dg/dt at the crossing


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # (len(t), 4)
    sol: Callable  # dense interpolant t -> state
    events: list[EventHit] = field(default_factory=list)
    forward: bool = True
    termination: str = "time"  # "time" | "event" | "blowup"

    def __call__(self, t):
        out = self.sol(np.atleast_1d(np.asarray(t, dtype=float)))
        out = np.asarray(out).T
        return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    @property
    def end_state(self) -> np.ndarray:
        return self.states[-1]


def integrate(x0: np.ndarray, p: model.Parameters, t_span: float,
              opts: IntegratorOptions | None = None,
              events: Sequence[EventSpec] = ()) -> Trajectory:
    """Integrate over a signed duration; negative t_span runs time backwards.

    The returned trajectory uses the integration's own clock (0 .. |t_span|);
    event states and times refer to that clock.
    """
    if t_span == 0:
        raise ValueError("t_span must be nonzero")
    opts = opts or IntegratorOptions()
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise BlowupError("non-finite initial state")
    forward = t_span > 0
    duration = min(abs(float(t_span)), opts.max_time)
    sgn = 1.0 if forward else -1.0

    def f(t, x):
        return sgn * model.rhs(x, p)

    ev_funcs = []
    for i, spec in enumerate(events):
        def gf(t, x, _g=spec.g):
            return _g(x)
        gf.direction = float(spec.direction) * (1.0 if forward else -1.0)
        gf.terminal = False
        ev_funcs.append(gf)

    def guard(t, x):
        return float(np.max(np.abs(x))) - opts.blowup_norm
    guard.terminal = True
    guard.direction = 1.0

    def floor_guard(t, x):
        return x[0] - opts.c_floor
    floor_guard.terminal = True
    floor_guard.direction = -1.0

    res = solve_ivp(f, (0.0, duration), x0, method="DOP853",
                    rtol=opts.rel_tol, atol=opts.abs_tol, max_step=opts.max_step,
                    dense_output=True, events=ev_funcs + [guard, floor_guard])
    if res.status == -1:
        # step-size collapse (e.g. running into the model singularity): keep
        # the partial trajectory unless there was essentially no progress
        if res.t[-1] <= 1e-9 * duration:
            raise IntegrationError(f"integration failed: {res.message}")
    if not np.all(np.isfinite(res.y[:, -1])):
        raise BlowupError("non-finite state during integration")
    termination = "time"
    if res.status == -1 or (res.status == 1 and
                            (len(res.t_events[-1]) > 0 or len(res.t_events[-2]) > 0)):
        termination = "blowup"

    hits: list[EventHit] = []
    for i, spec in enumerate(events):
        for te, ye in zip(res.t_events[i], res.y_events[i]):
            # direction of g along the run's own clock
            h = 1e-7 * max(1.0, abs(te))
            g_after = spec.g(res.sol(min(te + h, res.t[-1])))
            g_before = spec.g(res.sol(max(te - h, 0.0)))
            hits.append(EventHit(t=float(te), state=np.array(ye), event_index=i,
                                 direction=int(np.sign(g_after - g_before))))
    hits.sort(key=lambda h: h.t)

    # honor count-terminal semantics by truncating post hoc
    for i, spec in enumerate(events):
        if spec.count > 0:
            mine = [h for h in hits if h.event_index == i]
            if len(mine) >= spec.count:
                t_stop = mine[spec.count - 1].t
                hits = [h for h in hits if h.t <= t_stop]
                termination = "event"
                break

    return Trajectory(t=res.t, states=res.y.T, sol=res.sol, events=hits,
                      forward=forward, termination=termination)


def return_to_section(x0: np.ndarray, p: model.Parameters, k: int = 2,
                      sign: int = 0, c_val: float = 0.15,
                      opts: IntegratorOptions | None = None,
                      v_tol: float = 1e-9,
                      direction: int = 1) -> tuple[np.ndarray, float]:
    """State and time of the k-th subsequent transversal crossing of the
    section {c = c_val}, filtered by sign(v) when sign is +1 or -1.

    With k = 2 and the sign matching x0's side, this is the second-return map
    on that side of the section; direction = -1 walks the map backwards.
    """
    opts = opts or IntegratorOptions()
    x0 = np.asarray(x0, dtype=float)
    if abs(x0[0] - c_val) > 1e-8:
        raise ValueError(f"start point not on the section: c = {x0[0]!r}")
    if abs(x0[1]) < v_tol:
        raise TangencyError("start point lies in the near-tangency band")
    spec = section_event(c_val)
    count = 0
    t_base = 0.0
    x = x0
    chunk = opts.max_time / 8.0
    while t_base < opts.max_time - 1e-12:
        tr = integrate(x, p, direction * min(chunk, opts.max_time - t_base),
                       opts, events=[spec])
        for h in tr.events:
            if h.t <= 1e-12:  # the start point itself
                continue
            vx = h.state[1]
            if abs(vx) < v_tol:
                raise TangencyError(
                    f"near-tangent crossing (|v| = {abs(vx):.2e}) at t = {t_base + h.t:.6g}")
            count += 1
            # the k-th crossing overall; if a sign filter is given and the
            # k-th lands on the wrong side, keep going to the next matching
            if count >= k and (sign == 0 or np.sign(vx) == sign):
                return h.state.copy(), t_base + h.t
        if tr.termination == "blowup":
            raise BlowupError("trajectory left the safeguard ball before returning")
        t_base += tr.t_end
        x = tr.end_state
    raise NoReturnError(
        f"only {count} crossings before max_time = {opts.max_time} "
        f"(needed the {k}-th)")
