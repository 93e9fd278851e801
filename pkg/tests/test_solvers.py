import math

import numpy as np
import pytest

from convex_sets import Ball, Box, HalfSpace, Intersection
from errors import ConfigurationError, HypothesisError, UnsupportedMappingError
from extended_precision import START_BITS
from geometry import SpaceGeometry
from mappings import Contraction, GeneralizedProjectionMap, GoebelKirk, KSchedule, MetricProjectionMap, Rotation
from solvers import (
    Rule, Schedule, SolverConfig, check_hypotheses, check_trace_invariants, half_space_of_Cn, half_space_of_Qn,
    hypothesis_violations, kim_xu_theta, resolve_M, run_hybrid_banach, run_hybrid_hilbert, run_ishikawa,
    run_kim_xu, run_mann, run_myx, run_nakajo_takahashi, run_scheme
)

X0 = [3.0, 4.0]


# ---------------------------------------------------------------------------
# 系数序列与 C_n、Q_n
# ---------------------------------------------------------------------------

def test_rules():
    assert Rule.constant(0.3).at(10) == 0.3
    r = Rule("one_minus_inv", n0=2)
    assert r.at(0) == pytest.approx(0.5)
    assert r.limit == 1.0
    assert r.sup(100) == pytest.approx(1.0 - 1.0 / 101)
    assert Rule("inv", n0=1).sup(50) == 1.0
    assert Rule("inv_square", n0=2).at(1) == pytest.approx(1.0 / 9.0)
    with pytest.raises(ConfigurationError):
        Rule("cosine")
    with pytest.raises(ConfigurationError):
        Rule.constant(1.5)
    with pytest.raises(ConfigurationError):
        Rule("inv", n0=0)


def test_solver_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(X0, scheme="halpern")
    with pytest.raises(ConfigurationError):
        SolverConfig(X0, max_iter=0)
    with pytest.raises(ConfigurationError):
        SolverConfig(X0, stop_tol=0.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(X0, max_precision_bits=32)


def test_kim_xu_theta():
    assert kim_xu_theta(0.5, math.sqrt(1.01), 2.0) == pytest.approx(0.02)
    assert kim_xu_theta(0.3, 1.0, 5.0) == 0.0


def _phi_unclamped(g, x, y):
    return g.norm(x) ** 2 - 2.0 * float(np.dot(x, g.duality_map(y))) + g.norm(y) ** 2


@pytest.mark.parametrize("geometry", [SpaceGeometry.euclidean(3), SpaceGeometry.p_norm(3.0, 3)])
def test_cn_affine_form_matches_direct_inequality(geometry, rng):
    g = geometry
    x, y, z = rng.normal(size=(3, 3))
    alpha, k, M, theta = 0.3, 1.2, 7.0, 0.05
    cn = half_space_of_Cn(g, x, y, z, alpha, k, M, theta)
    for v in rng.normal(scale=3.0, size=(1000, 3)):
        direct = (
            _phi_unclamped(g, v, y) - _phi_unclamped(g, v, x)
            - (1 - alpha) * (k * k * g.norm(z) ** 2 - g.norm(x) ** 2 + (k * k - 1) * M
                             - 2.0 * float(np.dot(v, k * k * g.duality_map(z) - g.duality_map(x))))
            - theta
        )
        assert cn.violation(v) == pytest.approx(direct, abs=1e-9 * max(1.0, abs(direct)))


def test_cn_hilbert_distance_form(rng):
    g = SpaceGeometry.euclidean(2)
    x, y, z = rng.normal(size=(3, 2))
    alpha, k, M = 0.4, 1.1, 9.0
    cn = half_space_of_Cn(g, x, y, z, alpha, k, M)
    for v in rng.normal(scale=2.0, size=(200, 2)):
        direct = (
            np.dot(v - y, v - y) - alpha * np.dot(v - x, v - x)
            - (1 - alpha) * k * k * np.dot(v - z, v - z) - (1 - alpha) * (k * k - 1) * (M - np.dot(v, v))
        )
        assert cn.violation(v) == pytest.approx(direct, abs=1e-9)


def test_nakajo_takahashi_cn_is_bisector(plane):
    x, y = np.array([2.0, 0.0]), np.array([0.0, 0.0])
    cn = half_space_of_Cn(plane, x, 0.5 * x + 0.5 * y, x, 0.5)
    # ‖y_n - v‖ ≤ ‖x - v‖，y_n = (1, 0)
    assert cn.holds(np.array([1.5, 7.0]))
    assert not cn.holds(np.array([1.6, 0.0]))


def test_qn_properties(rng):
    g = SpaceGeometry.p_norm(3.0, 2)
    x0 = np.array([1.0, 2.0])
    q0 = half_space_of_Qn(g, x0, x0)
    assert q0.is_full_space
    xn = np.array([0.5, 0.5])
    qn = half_space_of_Qn(g, x0, xn)
    assert qn.violation(xn) == pytest.approx(0.0, abs=1e-12)
    jdiff = g.duality_map(x0) - g.duality_map(xn)
    for v in rng.normal(size=(100, 2)):
        assert qn.holds(v) == (float(np.dot(xn - v, jdiff)) >= -1e-9)


# ---------------------------------------------------------------------------
# Mann / Ishikawa
# ---------------------------------------------------------------------------

def test_mann_on_contraction(plane):
    m = Contraction(0.5, [0.5, -0.5], plane)
    trace = run_mann(m, SolverConfig(X0, scheme="mann"))
    assert trace.converged
    assert np.allclose(trace.final_point, [0.5, -0.5], atol=1e-8)
    assert trace.records[0].cn is None
    assert math.isnan(trace.records[0].cn_slack_pref)


def test_mann_on_rotation(plane):
    trace = run_mann(Rotation(math.pi / 4, plane), SolverConfig([1.0, 1.0], scheme="mann", max_iter=1000))
    assert trace.converged
    assert np.linalg.norm(trace.final_point) <= 1e-7


def test_stationary_start_stops_after_one_record(box_projection):
    for run in (run_mann, run_nakajo_takahashi, run_hybrid_hilbert):
        trace = run(box_projection, SolverConfig([0.5, 0.5]))
        assert trace.converged
        assert trace.iterations == 1
        assert np.array_equal(trace.final_point, [0.5, 0.5])


def test_ishikawa_with_unit_beta_matches_mann(plane):
    m = Rotation(0.8, plane)
    cfg = SolverConfig([1.0, 2.0], schedule=Schedule(beta=Rule.constant(1.0)), max_iter=50)
    assert np.array_equal(run_ishikawa(m, cfg).iterates(), run_mann(m, cfg).iterates())


def test_domain_escape_ends_trace_with_error(plane):
    m = MetricProjectionMap(Box([5.0, 5.0], [6.0, 6.0]), plane, domain=Ball([0.0, 0.0], 1.0))
    trace = run_mann(m, SolverConfig([0.0, 0.0], scheme="mann"))
    assert trace.terminated_by == "error"
    assert not trace.converged
    assert "定义域" in trace.error
    assert trace.iterations == 1
    assert np.allclose(trace.final_point, [2.5, 2.5])


# ---------------------------------------------------------------------------
# CQ 族
# ---------------------------------------------------------------------------

def test_nakajo_takahashi_on_box(box_projection):
    trace = run_nakajo_takahashi(box_projection, SolverConfig(X0))
    assert trace.converged
    assert np.linalg.norm(trace.final_point - [1.0, 1.0]) <= 1e-6
    assert np.array_equal(trace.target, [1.0, 1.0])


def test_nakajo_takahashi_on_half_turn(plane):
    # Tx = -x，α = 1/2 时 y_n = 0，x_n = x₀/2^n
    trace = run_nakajo_takahashi(Rotation(math.pi, plane), SolverConfig([1.0, 1.0]))
    assert np.allclose(trace.records[1].x, [0.5, 0.5], atol=1e-12)
    assert np.allclose(trace.records[2].x, [0.25, 0.25], atol=1e-12)
    assert trace.converged
    assert np.linalg.norm(trace.final_point) <= 1e-8


def test_cq_doubles_precision_until_the_run_fits(plane):
    trace = run_nakajo_takahashi(Rotation(math.pi, plane), SolverConfig([1.0, 1.0]))
    assert trace.converged
    assert trace.precision_bits > START_BITS


def test_cq_at_precision_cap_keeps_running(plane):
    # 半圈旋转的迭代点都是二进制分数，64 位下运算无舍入
    trace = run_nakajo_takahashi(Rotation(math.pi, plane), SolverConfig([1.0, 1.0], max_precision_bits=64))
    assert trace.precision_bits == 64
    assert trace.converged
    assert np.linalg.norm(trace.final_point) <= 1e-8


def test_cq_float_path_when_extended_precision_disabled(box_projection):
    trace = run_nakajo_takahashi(box_projection, SolverConfig(X0, extended_precision=False, max_iter=50))
    assert trace.precision_bits == 53
    assert trace.terminated_by != "error", trace.error
    assert np.linalg.norm(trace.final_point - [1.0, 1.0]) <= 0.1


def test_cq_falls_back_to_float_without_precise_mapping(plane, unit_box):
    m = MetricProjectionMap(Intersection([unit_box, HalfSpace([1.0, 1.0], 1.0)]), plane)
    assert not m.supports_extended_precision()
    trace = run_nakajo_takahashi(m, SolverConfig(X0, max_iter=5))
    assert trace.precision_bits == 53
    assert trace.terminated_by != "error", trace.error


def test_hybrid_hilbert_geometric_schedule(box_projection_geometric):
    trace = run_hybrid_hilbert(box_projection_geometric, SolverConfig(X0, max_iter=300))
    assert trace.converged
    assert trace.M == pytest.approx(101.0)
    assert np.linalg.norm(trace.final_point - [1.0, 1.0]) <= 1e-6
    report = check_trace_invariants(trace, box_projection_geometric, box_projection_geometric.geometry)
    assert report.passed, report.checks


def test_hybrid_hilbert_inverse_square_schedule_stalls_at_slack_floor(plane, unit_box):
    # k_n = 1 + 1/(n+1)² 时 C_n 放宽 R_n = (1-α)(k_n²-1)(M-‖x_n‖²)，x_n 离不动点至少约 √(3R_n)
    m = MetricProjectionMap(unit_box, plane, k_schedule=KSchedule("inverse_square"))
    trace = run_hybrid_hilbert(m, SolverConfig(X0, max_iter=300))
    assert trace.terminated_by == "max_iter"
    k = m.k(300)
    floor = math.sqrt(3.0 * 0.5 * (k * k - 1.0) * (trace.M - 2.0))
    dist = float(np.linalg.norm(trace.final_point - [1.0, 1.0]))
    assert 0.5 * floor <= dist <= 3.0 * floor
    phis = [r.phi_to_x0 for r in trace.records]
    assert all(b >= a - 1e-12 for a, b in zip(phis, phis[1:]))


def test_myx_converges(box_projection):
    trace = run_myx(box_projection, SolverConfig(X0, scheme="myx"))
    assert trace.converged
    assert np.linalg.norm(trace.final_point - [1.0, 1.0]) <= 1e-6


def test_kim_xu_on_goebel_kirk():
    m = GoebelKirk(SpaceGeometry.euclidean(4))
    trace = run_kim_xu(m, SolverConfig([1.0, 0.0, 0.0, 0.0], scheme="kim_xu"))
    assert trace.terminated_by != "error", trace.error
    assert np.linalg.norm(trace.final_point) <= 1e-5


def test_hybrid_on_goebel_kirk():
    m = GoebelKirk(SpaceGeometry.euclidean(4))
    trace = run_hybrid_hilbert(m, SolverConfig([0.9, 0.0, 0.0, 0.0]))
    assert trace.terminated_by != "error", trace.error
    assert trace.M == pytest.approx(2.0)
    assert np.linalg.norm(trace.final_point) <= 1e-5
    assert check_trace_invariants(trace, m, m.geometry).checks["cn_slack"] <= 0.0


# ---------------------------------------------------------------------------
# 退化关系
# ---------------------------------------------------------------------------

def test_myx_with_unit_beta_is_nakajo_takahashi(box_projection):
    cfg = SolverConfig(X0, schedule=Schedule(beta=Rule.constant(1.0)), max_iter=60)
    assert np.array_equal(run_myx(box_projection, cfg).iterates(), run_nakajo_takahashi(box_projection, cfg).iterates())


def test_hybrid_with_unit_k_and_beta_is_nakajo_takahashi(box_projection):
    cfg = SolverConfig(X0, schedule=Schedule(beta=Rule.constant(1.0)), max_iter=60)
    hybrid = run_hybrid_hilbert(box_projection, cfg).iterates()
    nt = run_nakajo_takahashi(box_projection, cfg).iterates()
    assert np.array_equal(hybrid, nt)


def test_banach_at_p_two_is_bit_identical_to_hilbert(box_projection_geometric):
    cfg = SolverConfig(X0, max_iter=80)
    a = run_hybrid_banach(box_projection_geometric, SpaceGeometry.p_norm(2.0, 2), cfg).iterates()
    b = run_hybrid_hilbert(box_projection_geometric, cfg).iterates()
    assert np.array_equal(a, b)


def test_kim_xu_with_unit_k_is_nakajo_takahashi(box_projection):
    cfg = SolverConfig(X0, max_iter=40)
    assert np.array_equal(run_kim_xu(box_projection, cfg).iterates(),
                          run_nakajo_takahashi(box_projection, cfg).iterates())


# ---------------------------------------------------------------------------
# 前提检查
# ---------------------------------------------------------------------------

def _condition(excinfo):
    return excinfo.value.condition


@pytest.mark.parametrize("scheme, schedule, condition", [
    ("nakajo_takahashi", Schedule(alpha=Rule.constant(1.0)), "α_n≤1−δ"),
    ("myx", Schedule(alpha=Rule.constant(1.0)), "α_n≤1−δ"),
    ("kim_xu", Schedule(alpha=Rule.constant(1.0)), "α_n≤α<1"),
    ("hybrid_hilbert", Schedule(alpha=Rule("one_minus_inv")), "limsup α_n<1"),
    ("hybrid_hilbert", Schedule(beta=Rule.constant(0.5)), "β_n→1"),
    ("myx", Schedule(beta=Rule("inv")), "β_n→1"),
])
def test_schedule_hypotheses(box_projection, scheme, schedule, condition):
    cfg = SolverConfig(X0, scheme=scheme, schedule=schedule)
    with pytest.raises(HypothesisError) as info:
        run_scheme(box_projection, box_projection.geometry, cfg)
    assert _condition(info) == condition


def test_x0_outside_domain(box_projection):
    with pytest.raises(HypothesisError) as info:
        run_hybrid_hilbert(box_projection, SolverConfig([30.0, 0.0]))
    assert _condition(info) == "x0∈C"


def test_explicit_M_too_small(box_projection):
    with pytest.raises(HypothesisError) as info:
        run_hybrid_hilbert(box_projection, SolverConfig(X0, M=50.0))
    assert _condition(info) == "M>‖v‖²"
    assert resolve_M(box_projection.domain, box_projection.geometry, 150.0) == 150.0


def test_unbounded_domain(plane, unit_box):
    m = MetricProjectionMap(unit_box, plane, domain=HalfSpace([1.0, 0.0], 5.0))
    with pytest.raises(HypothesisError) as info:
        run_hybrid_hilbert(m, SolverConfig(X0))
    assert _condition(info) == "C bounded"
    # Nakajo-Takahashi 不需要有界
    assert run_nakajo_takahashi(m, SolverConfig(X0)).converged


def test_diam_too_small(box_projection):
    with pytest.raises(HypothesisError) as info:
        run_kim_xu(box_projection, SolverConfig(X0, scheme="kim_xu", diam_C=5.0))
    assert _condition(info) == "diam C"


def test_banach_scheme_requires_certified_mapping():
    g = SpaceGeometry.p_norm(3.0, 2)
    m = MetricProjectionMap(Box([-1.0, -1.0], [1.0, 1.0]), g)
    with pytest.raises(UnsupportedMappingError):
        run_hybrid_banach(m, g, SolverConfig([2.0, 0.0], scheme="hybrid_banach"))


def test_banach_scheme_requires_matching_space(box_projection):
    with pytest.raises(ConfigurationError):
        run_hybrid_banach(box_projection, SpaceGeometry.p_norm(3.0, 2), SolverConfig(X0, scheme="hybrid_banach"))


def test_hilbert_schemes_reject_p_norm_mapping():
    g = SpaceGeometry.p_norm(3.0, 2)
    m = GeneralizedProjectionMap(Box([-1.0, -1.0], [1.0, 1.0]), g)
    with pytest.raises(ConfigurationError):
        run_nakajo_takahashi(m, SolverConfig([2.0, 0.0]))


def test_hypothesis_violations_collects_everything(box_projection):
    cfg = SolverConfig([30.0, 0.0], schedule=Schedule(alpha=Rule.constant(1.0), beta=Rule.constant(0.5)), M=1.0)
    conditions = {getattr(e, "condition", None) for e in hypothesis_violations(box_projection, box_projection.geometry, cfg)}
    assert {"x0∈C", "limsup α_n<1", "M>‖v‖²", "β_n→1"} <= conditions


def test_check_hypotheses_passes_for_valid_config(box_projection):
    check_hypotheses(box_projection, box_projection.geometry, SolverConfig(X0))
