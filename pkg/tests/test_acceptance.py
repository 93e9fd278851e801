"""
端到端验收：盒子投影实例上的强收敛、p = 3 的 Banach 版本、格式退化、
证明路径不变量、几何恒等式、投影参照解、Goebel-Kirk 见证映射与实验可复现性
"""
import glob
import os
import time

import numpy as np
import pytest

from config_loader import load_config
from convex_sets import Ball, Box, HalfSpace, brute_force_project, generalized_project
from geometry import SpaceGeometry
from harness import run_experiment, write_trace_csv
from mappings import GeneralizedProjectionMap, GoebelKirk, KSchedule, estimate_lipschitz_violation
from solvers import Rule, Schedule, SolverConfig, check_trace_invariants, run_hybrid_banach, run_hybrid_hilbert, \
    run_kim_xu, run_myx, run_nakajo_takahashi

PROJECT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
X0 = [3.0, 4.0]


# ---------------------------------------------------------------------------
# 强收敛
# ---------------------------------------------------------------------------

def test_hilbert_box_projection_converges_to_nearest_fixed_point(box_projection_geometric):
    start = time.perf_counter()
    trace = run_hybrid_hilbert(box_projection_geometric, SolverConfig(X0, max_iter=300))
    elapsed = time.perf_counter() - start
    assert trace.converged
    assert trace.iterations <= 300
    assert np.linalg.norm(trace.final_point - np.array([1.0, 1.0])) <= 1e-6
    assert elapsed < 1.0


@pytest.mark.slow
def test_banach_p3_converges_to_generalized_projection():
    g = SpaceGeometry.p_norm(3.0, 3)
    box = Box([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    m = GeneralizedProjectionMap(box, g)
    x0 = np.array([2.0, 1.5, -0.5])
    trace = run_hybrid_banach(m, g, SolverConfig(x0, scheme="hybrid_banach", max_iter=500))
    assert trace.terminated_by != "error", trace.error
    expected = generalized_project(g, box, x0).point
    assert np.linalg.norm(trace.final_point - expected) <= 1e-5


def test_banach_p3_plane_converges_to_generalized_projection():
    g = SpaceGeometry.p_norm(3.0, 2)
    box = Box([-1.0, -1.0], [1.0, 1.0])
    m = GeneralizedProjectionMap(box, g)
    x0 = np.array([2.0, 1.5])
    trace = run_hybrid_banach(m, g, SolverConfig(x0, scheme="hybrid_banach", max_iter=300))
    assert trace.terminated_by != "error", trace.error
    assert trace.precision_bits > 53
    expected = generalized_project(g, box, x0).point
    assert np.linalg.norm(trace.final_point - expected) <= 1e-5


# ---------------------------------------------------------------------------
# 格式退化
# ---------------------------------------------------------------------------

def test_unit_k_collapses_hybrid_to_myx(box_projection):
    cfg = SolverConfig(X0, max_iter=60)
    a = run_hybrid_hilbert(box_projection, cfg).iterates()
    b = run_myx(box_projection, cfg).iterates()
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) <= 1e-10


def test_reductions_hold_over_fifty_iterations(box_projection, box_projection_geometric):
    # 收紧停止条件，保证比较覆盖至少 50 步
    tight = dict(max_iter=50, stop_tol=1e-300, residual_tol=1e-300)
    unit_beta = Schedule(beta=Rule.constant(1.0))
    pairs = [
        (run_kim_xu(box_projection, SolverConfig(X0, **tight)),
         run_nakajo_takahashi(box_projection, SolverConfig(X0, **tight))),
        (run_myx(box_projection, SolverConfig(X0, schedule=unit_beta, **tight)),
         run_nakajo_takahashi(box_projection, SolverConfig(X0, schedule=unit_beta, **tight))),
        (run_hybrid_banach(box_projection_geometric, SpaceGeometry.p_norm(2.0, 2), SolverConfig(X0, **tight)),
         run_hybrid_hilbert(box_projection_geometric, SolverConfig(X0, **tight))),
    ]
    for a, b in pairs:
        assert a.iterations == b.iterations == 50
        assert np.max(np.abs(a.iterates() - b.iterates())) <= 1e-10


# ---------------------------------------------------------------------------
# 证明路径不变量
# ---------------------------------------------------------------------------

def _tight(x0, **kwargs):
    return SolverConfig(x0, stop_tol=1e-12, residual_tol=1e-11, **kwargs)


@pytest.mark.parametrize("case", ["nakajo_takahashi", "myx", "hybrid_geometric", "goebel_kirk"])
def test_invariants_on_converged_runs(case, box_projection, box_projection_geometric):
    if case == "nakajo_takahashi":
        m, trace = box_projection, run_nakajo_takahashi(box_projection, _tight(X0))
    elif case == "myx":
        m, trace = box_projection, run_myx(box_projection, _tight(X0, scheme="myx"))
    elif case == "hybrid_geometric":
        m = box_projection_geometric
        trace = run_hybrid_hilbert(m, _tight(X0))
    else:
        m = GoebelKirk(SpaceGeometry.euclidean(5))
        trace = run_hybrid_hilbert(m, _tight([0.9, 0.0, 0.0, 0.0, 0.0]))
    assert trace.converged, trace.terminated_by
    report = check_trace_invariants(trace, m, m.geometry, samples=50)
    assert set(report.checks) == {"cn_slack", "qn_slack", "phi_monotone", "phi_step", "step_to_y", "residual"}
    assert report.passed, report.checks


# ---------------------------------------------------------------------------
# 几何内核
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("p", [1.5, 2.0, 3.0, 4.0])
def test_duality_identities_on_random_vectors(p):
    g = SpaceGeometry.p_norm(p, 4)
    rng = np.random.default_rng(int(p * 10))
    X = rng.normal(scale=2.0, size=(1000, 4))
    Y = rng.normal(scale=2.0, size=(1000, 4))
    for x, y in zip(X, Y):
        jx = g.duality_map(x)
        n2 = g.norm(x) ** 2
        assert abs(float(np.dot(x, jx)) - n2) <= 1e-10 * max(1.0, n2)
        assert abs(g.dual_norm(jx) ** 2 - n2) <= 1e-10 * max(1.0, n2)
        assert np.max(np.abs(g.inverse_duality_map(jx) - x)) <= 1e-10 * max(1.0, g.norm(x))
        nx, ny = g.norm(x), g.norm(y)
        phi = g.lyapunov(x, y)
        assert (nx - ny) ** 2 - 1e-9 <= phi <= (nx + ny) ** 2 + 1e-9


# ---------------------------------------------------------------------------
# 投影参照解
# ---------------------------------------------------------------------------

def _random_set(rng, d):
    kind = rng.integers(3)
    if kind == 0:
        lower = rng.uniform(-1.5, -0.5, size=d)
        return Box(lower, lower + rng.uniform(0.5, 2.0, size=d))
    if kind == 1:
        return Ball(rng.uniform(-0.5, 0.5, size=d), rng.uniform(0.5, 1.5))
    return HalfSpace(rng.normal(size=d), rng.uniform(-0.5, 0.5))


def _check_projection_instances(p, d, count, seed):
    g = SpaceGeometry.p_norm(p, d)
    rng = np.random.default_rng(seed)
    for _ in range(count):
        s = _random_set(rng, d)
        x = rng.normal(scale=2.0, size=d)
        y = generalized_project(g, s, x, tol=1e-10).point
        reference = brute_force_project(g, s, x, starts=5, iterations=2000, seed=int(rng.integers(1 << 30)))
        assert np.linalg.norm(y - reference) <= 1e-4, (s.describe(), x)

        jx, jy = g.duality_map(x), g.duality_map(y)
        for z in s.sample(rng, 20):
            assert float(np.dot(y - z, jx - jy)) >= -1e-8
            assert g.lyapunov(z, y) + g.lyapunov(y, x) <= g.lyapunov(z, x) + 1e-8


@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("d", [2, 3])
def test_projection_matches_reference_quick(p, d):
    _check_projection_instances(p, d, count=8, seed=int(100 * p) + d)


@pytest.mark.slow
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
@pytest.mark.parametrize("d", [2, 3])
def test_projection_matches_reference_full_grid(p, d):
    _check_projection_instances(p, d, count=100, seed=int(1000 * p) + d)


# ---------------------------------------------------------------------------
# Goebel-Kirk 见证映射
# ---------------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.parametrize("d", [4, 6])
def test_goebel_kirk_lipschitz_bound_over_powers(d):
    m = GoebelKirk(SpaceGeometry.euclidean(d))
    for n in range(1, 21):
        assert estimate_lipschitz_violation(m, n, pairs=10000, seed=n) <= 1e-8


def test_goebel_kirk_schedule_starts_at_two_and_reaches_one():
    m = GoebelKirk(SpaceGeometry.euclidean(6))
    assert m.k(1) == 2.0
    assert m.k(5) == 1.0
    assert m.k(40) == 1.0
    assert m.k_schedule.kind == "goebel_kirk"
    assert isinstance(m.k_schedule, KSchedule)


def test_hybrid_on_goebel_kirk_converges_to_zero():
    m = GoebelKirk(SpaceGeometry.euclidean(6))
    trace = run_hybrid_hilbert(m, SolverConfig([0.5, 0.5, 0.0, 0.3, 0.0, 0.0]))
    assert trace.terminated_by != "error", trace.error
    assert np.linalg.norm(trace.final_point) <= 1e-5


# ---------------------------------------------------------------------------
# 实验配置与可复现性
# ---------------------------------------------------------------------------

def _shipped_configs():
    paths = glob.glob(os.path.join(PROJECT_DIR, "experiments", "**", "*.yaml"), recursive=True)
    return sorted(paths) + [os.path.join(PROJECT_DIR, "config.yaml")]


@pytest.mark.parametrize("path", _shipped_configs(), ids=os.path.basename)
def test_shipped_configs_validate(path, monkeypatch):
    monkeypatch.delenv("CQ_OUTPUT_DIR", raising=False)
    cfg = load_config(path)
    assert cfg.name


def test_repeated_runs_write_identical_csv(tmp_path, monkeypatch):
    monkeypatch.setenv("CQ_OUTPUT_DIR", str(tmp_path))
    cfg = load_config(os.path.join(PROJECT_DIR, "experiments", "a1_geometric.yaml"))
    blobs = []
    for i in range(2):
        trace, summary = run_experiment(cfg)
        assert summary.converged
        path = tmp_path / f"trace_{i}.csv"
        write_trace_csv(trace, str(path))
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]
