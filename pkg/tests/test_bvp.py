"""Collocation engine checks against closed-form oracles."""
import numpy as np
import pytest

from hetdyn import bvp


def scalar_linear_field(lam):
    return bvp.CallableField(
        1,
        rhs=lambda x, pv: pv.get("lam", lam) * x,
        jac=lambda x, pv: np.broadcast_to(pv.get("lam", lam), x.shape[:-1] + (1, 1)).copy(),
    )


def make_exp_problem(N, m, lam=-2.0, T=1.0):
    """x' = lam x, x(0) = 1 on duration T; solution exp(lam T tau)."""
    field = scalar_linear_field(lam)
    seg = bvp.segment_from_callable(field, lambda t: np.ones((len(t), 1)),
                                    bvp.uniform_mesh(N), m, T)
    prob = bvp.BvpProblem()
    prob.add_segment(seg, T=T)
    prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_start(0)[0] - 1.0,
                                       depends=[("start", 0)]))
    return prob, seg


def test_constant_solution_zero_field():
    field = bvp.CallableField(2, rhs=lambda x, pv: np.zeros_like(x),
                              jac=lambda x, pv: np.zeros(x.shape[:-1] + (2, 2)))
    xstar = np.array([0.3, -1.7])
    seg = bvp.segment_from_callable(field, lambda t: 0.9 * xstar + np.zeros((len(t), 2)),
                                    bvp.uniform_mesh(8), 4, 1.0)
    prob = bvp.BvpProblem()
    prob.add_segment(seg, T=1.0)
    prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_start(0) - xstar,
                                       depends=[("start", 0)], size=2))
    res = prob.solve(bvp.SolverOptions(N=8, m=4, newton_tol=1e-11))
    assert res.converged
    assert np.max(np.abs(seg.values - xstar)) < 5e-12
    assert seg.collocation_residual() < 1e-11


def test_exponential_oracle():
    prob, seg = make_exp_problem(20, 4)
    res = prob.solve(bvp.SolverOptions(N=20, m=4))
    assert res.converged
    assert seg.end[0] == pytest.approx(np.exp(-2.0), abs=1e-10)
    assert seg.interpolate(0.5)[0] == pytest.approx(np.exp(-1.0), abs=1e-9)


def test_interpolate_endpoints_exact():
    prob, seg = make_exp_problem(10, 4)
    prob.solve()
    assert seg.interpolate(0.0)[0] == seg.values[0, 0]
    assert seg.interpolate(1.0)[0] == seg.values[-1, 0]
    with pytest.raises(ValueError):
        seg.interpolate(1.5)


def test_superconvergence_order():
    # halving h divides the mesh-point error by ~2^(2m); demand >= 2m - 0.5
    # (lam = -5 keeps the finer error above the float64 floor)
    m = 4
    errs = []
    for N in (4, 8, 16):
        prob, seg = make_exp_problem(N, m, lam=-5.0)
        prob.solve(bvp.SolverOptions(N=N, m=m, newton_tol=1e-13))
        errs.append(abs(seg.end[0] - np.exp(-5.0)))
    order1 = np.log2(errs[0] / errs[1])
    order2 = np.log2(errs[1] / errs[2])
    assert order1 >= 2 * m - 0.5
    assert order2 >= 2 * m - 0.5


def test_resolve_is_fixed_point():
    prob, seg = make_exp_problem(12, 4)
    prob.solve()
    before = seg.values.copy()
    prob.solve()
    assert np.max(np.abs(seg.values - before)) <= 1e-9


def test_square_audit():
    prob, _ = make_exp_problem(6, 3)
    nu, ne = prob.audit()
    assert nu == ne
    # removing the boundary condition leaves a 1-dim deficit
    prob.conditions.clear()
    nu, ne = prob.audit()
    assert nu - ne == 1
    with pytest.raises(ValueError):
        prob.solve()


def test_free_duration_as_scalar():
    # x' = -x, x(0) = 1, x(1) = exp(-3): recover T = 3
    field = scalar_linear_field(-1.0)
    seg = bvp.segment_from_callable(field, lambda t: np.exp(-2.0 * t)[:, None],
                                    bvp.uniform_mesh(16), 4, 2.0)
    prob = bvp.BvpProblem()
    prob.add_scalar("T", 2.0)
    prob.add_segment(seg, T=("scalar", "T"))
    prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_start(0)[0] - 1.0,
                                       depends=[("start", 0)]))
    prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_end(0)[0] - np.exp(-3.0),
                                       depends=[("end", 0)]))
    res = prob.solve()
    assert res.converged
    assert prob.scalars["T"] == pytest.approx(3.0, abs=1e-9)


def test_free_parameter_binding():
    # x' = lam x with unknown lam; conditions x(0)=1, x(1)=exp(-2) -> lam=-2
    field = scalar_linear_field(-1.0)
    seg = bvp.segment_from_callable(field, lambda t: np.exp(-t)[:, None],
                                    bvp.uniform_mesh(16), 4, 1.0, pvals={"lam": -1.0})
    prob = bvp.BvpProblem()
    prob.add_scalar("lam", -1.0)
    prob.add_segment(seg, T=1.0, par_binding={"lam": "lam"})
    prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_start(0)[0] - 1.0,
                                       depends=[("start", 0)]))
    prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_end(0)[0] - np.exp(-2.0),
                                       depends=[("end", 0)]))
    res = prob.solve()
    assert res.converged
    assert prob.scalars["lam"] == pytest.approx(-2.0, abs=1e-9)


def test_collocation_residual_small_after_solve():
    prob, seg = make_exp_problem(12, 4)
    prob.solve(bvp.SolverOptions(N=12, m=4, newton_tol=1e-10))
    assert seg.collocation_residual() < 1e-10


def test_remesh_uniform_for_smooth_solution():
    prob, seg = make_exp_problem(16, 4, lam=-0.1)
    prob.solve()
    new = bvp.adapt_mesh(seg)
    h = np.diff(new)
    assert h.max() / h.min() < 3.0


def test_remesh_concentrates_in_boundary_layer():
    # x' = -x/delta: layer of width ~delta at tau = 0; iterated adapt/solve
    # rounds pull the mesh from uniform into the layer
    delta = 1e-3
    prob, seg = make_exp_problem(40, 4, lam=-1.0 / delta)
    seg.values = np.exp(-seg.node_taus() / delta)[:, None]
    prob.solve(bvp.SolverOptions(N=40, m=4, newton_tol=1e-8))
    for _ in range(3):
        seg = bvp.remesh(seg)
        prob = bvp.BvpProblem()
        prob.add_segment(seg, T=1.0)
        prob.add_condition(bvp.FDCondition(lambda ctx: ctx.seg_start(0)[0] - 1.0,
                                           depends=[("start", 0)]))
        prob.solve(bvp.SolverOptions(N=40, m=4, newton_tol=1e-10))
    frac = np.mean(seg.mesh <= 5 * delta)
    assert frac >= 0.6
    # the mid-domain value carries the propagated layer error; a uniform
    # N = 40 mesh leaves O(1) error here
    mid = seg.interpolate(0.5)[0]
    assert mid == pytest.approx(np.exp(-0.5 / delta), abs=1e-8)


def test_linear_condition_row():
    # pin the mean of the solution through an explicit linear row
    prob, seg = make_exp_problem(10, 4)
    prob._layout()
    w = np.zeros(prob.n_unknowns)
    w[0] = 1.0
    prob.conditions = [bvp.LinearCondition(w, 1.0)]
    res = prob.solve()
    assert res.converged
    assert seg.values[0, 0] == pytest.approx(1.0, abs=1e-12)
