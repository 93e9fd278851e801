"""
迭代格式模块 - Mann、Ishikawa 以及 CQ 混合投影族

CQ 族（nakajo_takahashi / kim_xu / myx / hybrid_hilbert / hybrid_banach）共用同一个循环：
每步构造两个半空间 C_n、Q_n，把 x₀ 广义投影到 C_n ∩ Q_n 上得到 x_{n+1}。
各格式只在 z_n、y_n 的构造以及 C_n 中的 k_n、θ_n 上不同，
因此 k_n ≡ 1、β_n ≡ 1、p = 2 等退化情形逐位复现更简单的格式。

定理前提在迭代开始前检查（HypothesisError）；迭代中的运行期错误被捕获，
轨迹以 terminated_by = "error" 结束。

每一步 CQ 投影把 x_n 的扰动放大约 ‖x₀ - x_{n+1}‖/‖x_n - y_n‖ 倍，双精度几步之后便失去意义。
CQ 循环因此默认在 mpmath 扩展精度下进行，累计放大量超过当前位数时加倍位数从头重算；
记录中的向量、半空间仍舍入为 numpy 双精度。
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from convex_sets import (
    ConvexSet, DualHalfSpace, Intersection, generalized_project, project_two_halfspaces_dual
)
from errors import CQError, ConfigurationError, HypothesisError, UnsupportedMappingError
from extended_precision import (
    GUARD_BITS, START_BITS, PreciseGeometry, PreciseHalfSpace, PrecisionExhaustedError, project_two_halfspaces
)
from geometry import SpaceGeometry, pairing
from logger_setup import get_logger
from mappings import DOMAIN_TOL, MappingSpec

SCHEMES = (
    "mann", "ishikawa", "nakajo_takahashi", "kim_xu", "myx", "hybrid_hilbert", "hybrid_banach"
)
CQ_SCHEMES = ("nakajo_takahashi", "kim_xu", "myx", "hybrid_hilbert", "hybrid_banach")
HYBRID_SCHEMES = ("hybrid_hilbert", "hybrid_banach")

RULES = ("constant", "one_minus_inv", "inv", "inv_square")

# 前提检查中 "< 1" 与 "→ 1" 的裕量
HYPOTHESIS_MARGIN = 1e-3

# 参照点松弛量允许的负值
SLACK_TOL = 1e-7

# 双精度尾数位数，双精度轨迹的 precision_bits
FLOAT64_BITS = 53


# =============================================================================
# 参数序列
# =============================================================================

@dataclass(frozen=True)
class Rule:
    """
    系数序列 n ↦ t_n ∈ [0, 1]

    - constant: value
    - one_minus_inv: 1 - 1/(n + n0)
    - inv: 1/(n + n0)
    - inv_square: 1/(n + n0)²
    """
    rule: str = "constant"
    value: float = 0.5
    n0: int = 1

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigurationError(f"未知系数规则: {self.rule}，可选 {RULES}")
        if self.rule == "constant" and not (0.0 <= self.value <= 1.0):
            raise ConfigurationError(f"常数系数必须位于 [0, 1]，实际 {self.value}")
        if int(self.n0) != self.n0 or self.n0 < 1:
            raise ConfigurationError(f"n0 必须是正整数，实际 {self.n0}")

    @classmethod
    def constant(cls, value: float) -> "Rule":
        return cls("constant", float(value))

    def at(self, n: int) -> float:
        if self.rule == "constant":
            return self.value
        if self.rule == "one_minus_inv":
            return 1.0 - 1.0 / (n + self.n0)
        if self.rule == "inv":
            return 1.0 / (n + self.n0)
        return 1.0 / (n + self.n0) ** 2

    @property
    def limit(self) -> float:
        """n → ∞ 时的极限"""
        if self.rule == "constant":
            return self.value
        return 1.0 if self.rule == "one_minus_inv" else 0.0

    def sup(self, horizon: int) -> float:
        """max_{0≤n<horizon} t_n"""
        if self.rule == "constant":
            return self.value
        if self.rule == "one_minus_inv":
            return self.at(max(horizon - 1, 0))
        return self.at(0)

    def describe(self) -> str:
        if self.rule == "constant":
            return f"{self.value:g}"
        return f"{self.rule}(n0={self.n0})"


@dataclass(frozen=True)
class Schedule:
    alpha: Rule = field(default_factory=lambda: Rule.constant(0.5))
    beta: Rule = field(default_factory=lambda: Rule("one_minus_inv", n0=2))


@dataclass
class SolverConfig:
    """
    单次运行的参数

    M / diam_C 为 None 时自动取值：M = R_C² + 1（R_C 为 C 的范数半径），diam_C 取 C 的直径
    extended_precision 为真且映射有任意精度实现时，CQ 循环用 mpmath 计算，
    位数从 START_BITS 起按需加倍，不超过 max_precision_bits
    """
    x0: np.ndarray
    scheme: str = "hybrid_hilbert"
    schedule: Schedule = field(default_factory=Schedule)
    M: Optional[float] = None
    diam_C: Optional[float] = None
    max_iter: int = 500
    stop_tol: float = 1e-9
    residual_tol: float = 1e-8
    projection_tol: float = 1e-12
    extended_precision: bool = True
    max_precision_bits: int = 8192

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(f"未知迭代格式: {self.scheme}，可选 {SCHEMES}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigurationError(f"max_iter 必须是正整数，实际 {self.max_iter}")
        for name in ("stop_tol", "residual_tol", "projection_tol"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} 必须为正")
        if int(self.max_precision_bits) != self.max_precision_bits or self.max_precision_bits < 64:
            raise ConfigurationError(f"max_precision_bits 必须是不小于 64 的整数，实际 {self.max_precision_bits}")
        self.x0 = np.array(self.x0, dtype=float)


# =============================================================================
# 轨迹
# =============================================================================

@dataclass
class IterationRecord:
    """第 n 步的诊断量；Mann/Ishikawa 没有 C_n、Q_n，对应字段为 NaN/None"""
    n: int
    x: np.ndarray
    y: np.ndarray
    z: Optional[np.ndarray]
    phi_step: float            # φ(x_{n+1}, x_n)
    step: float                # ‖x_{n+1} - x_n‖
    step_to_y: float           # ‖x_{n+1} - y_n‖
    residual: float            # ‖Tx_n - x_n‖
    power_residual: float      # ‖T^n x_n - x_n‖
    phi_to_x0: float           # φ(x_n, x₀)
    dist_to_target: float      # ‖x_n - q‖
    cn_slack_pref: float = float("nan")
    qn_slack_pref: float = float("nan")
    cn: Optional[DualHalfSpace] = None
    qn: Optional[DualHalfSpace] = None
    inner_iterations: int = 0
    fallback: bool = False


@dataclass
class IterationTrace:
    scheme: str
    records: List[IterationRecord]
    terminated_by: str                 # tolerance | max_iter | error
    final_point: np.ndarray
    target: Optional[np.ndarray] = None
    error: Optional[str] = None
    M: float = float("nan")
    precision_bits: int = FLOAT64_BITS

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def converged(self) -> bool:
        return self.terminated_by == "tolerance"

    def iterates(self) -> np.ndarray:
        """x_0, …, x_N 以及最终点，形状 (len+1, d)"""
        return np.vstack([r.x for r in self.records] + [self.final_point])


# =============================================================================
# C_n、Q_n 的仿射形式
# =============================================================================

def kim_xu_theta(alpha: float, k: float, diam: float) -> float:
    """θ_n = (1 - α_n)(k_n² - 1)(diam C)²"""
    return (1.0 - alpha) * (k * k - 1.0) * diam * diam


def half_space_of_Cn(
    g: SpaceGeometry,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    alpha: float,
    k: float = 1.0,
    M: float = 0.0,
    theta: float = 0.0
) -> DualHalfSpace:
    """
    C_n = {v : φ(v, y) ≤ φ(v, x) + (1-α)(k²‖z‖² - ‖x‖² + (k²-1)M - 2⟨v, k²Jz - Jx⟩) + θ}

    φ(v, ·) 对 v 的依赖只有 -2⟨v, J·⟩，整理得半空间 ⟨v, a⟩ ≤ b：
        a = 2(Jx - Jy + (1-α)(k²Jz - Jx))
        b = ‖x‖² - ‖y‖² + (1-α)(k²‖z‖² - ‖x‖² + (k²-1)M) + θ
    z = x、k = 1 时即 Nakajo-Takahashi 的 {v : ‖y - v‖ ≤ ‖x - v‖}
    """
    jx, jy, jz = g.duality_map(x), g.duality_map(y), g.duality_map(z)
    nx, ny, nz = g.norm(x), g.norm(y), g.norm(z)
    k2 = k * k
    a = 2.0 * (jx - jy + (1.0 - alpha) * (k2 * jz - jx))
    b = nx * nx - ny * ny + (1.0 - alpha) * (k2 * nz * nz - nx * nx + (k2 - 1.0) * M) + theta
    return DualHalfSpace(a, b)


def half_space_of_Qn(g: SpaceGeometry, x0: np.ndarray, xn: np.ndarray) -> DualHalfSpace:
    """Q_n = {v : ⟨x_n - v, Jx₀ - Jx_n⟩ ≥ 0}；n = 0 时法向量为 0，表示全空间"""
    a = g.duality_map(x0) - g.duality_map(xn)
    return DualHalfSpace(a, pairing(xn, a))


def _combine(g: SpaceGeometry, t: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """J⁻¹(tJu + (1-t)Jv)，Hilbert 情形即凸组合"""
    if g.is_hilbert:
        return t * u + (1.0 - t) * v
    return g.inverse_duality_map(t * g.duality_map(u) + (1.0 - t) * g.duality_map(v))


# =============================================================================
# 前提检查
# =============================================================================

def resolve_M(domain: ConvexSet, g: SpaceGeometry, explicit: Optional[float] = None) -> float:
    """M 的取值：显式值（须 > R_C²）或 R_C² + 1"""
    radius = domain.norm_radius(g)
    if not math.isfinite(radius):
        raise HypothesisError("C bounded", f"定义域 {domain.describe()} 无界，无法确定 M")
    if explicit is None:
        return radius * radius + 1.0
    if not explicit > radius * radius:
        raise HypothesisError("M>‖v‖²", f"M = {explicit:g} 不大于 sup‖v‖² = {radius * radius:g}")
    return float(explicit)


def resolve_diam(domain: ConvexSet, explicit: Optional[float] = None) -> float:
    diam = domain.diameter()
    if not math.isfinite(diam):
        raise HypothesisError("C bounded", f"定义域 {domain.describe()} 无界，diam C 无定义")
    if explicit is None:
        return diam
    if explicit < diam - 1e-12:
        raise HypothesisError("diam C", f"diam_C = {explicit:g} 小于定义域直径 {diam:g}")
    return float(explicit)


def hypothesis_violations(
    m: MappingSpec,
    g: SpaceGeometry,
    cfg: SolverConfig,
    scheme: Optional[str] = None
) -> List[ConfigurationError]:
    """
    收集所选格式的全部前提违反（不抛出）

    Returns:
        错误列表，空列表表示可以运行
    """
    scheme = scheme or cfg.scheme
    problems: List[ConfigurationError] = []
    alpha, beta = cfg.schedule.alpha, cfg.schedule.beta

    if scheme == "hybrid_banach":
        if not g.same_space(m.geometry):
            problems.append(ConfigurationError(
                f"求解几何 {g.describe()} 与映射几何 {m.geometry.describe()} 不一致"))
        elif not m.is_relative_in(g):
            problems.append(UnsupportedMappingError(
                f"{m.describe()} 在 {g.describe()} 下未认证为相对渐近非扩张映射"))
    elif not m.geometry.is_hilbert:
        problems.append(ConfigurationError(f"{scheme} 只适用于 Hilbert 空间，映射几何为 {m.geometry.describe()}"))

    x0 = np.asarray(cfg.x0, dtype=float)
    if x0.shape != (g.d,):
        problems.append(ConfigurationError(f"x0 维度应为 {g.d}，实际形状 {x0.shape}"))
        return problems
    if not m.domain.contains(x0):
        problems.append(HypothesisError("x0∈C", f"x0 = {x0.tolist()} 不在 {m.domain.describe()} 内"))

    if scheme in ("nakajo_takahashi", "myx"):
        if alpha.sup(cfg.max_iter) > 1.0 - HYPOTHESIS_MARGIN:
            problems.append(HypothesisError("α_n≤1−δ", f"sup α_n = {alpha.sup(cfg.max_iter):g}"))
    if scheme == "kim_xu":
        if alpha.sup(cfg.max_iter) > 1.0 - HYPOTHESIS_MARGIN:
            problems.append(HypothesisError("α_n≤α<1", f"sup α_n = {alpha.sup(cfg.max_iter):g}"))
        try:
            resolve_diam(m.domain, cfg.diam_C)
        except HypothesisError as e:
            problems.append(e)
    if scheme in HYBRID_SCHEMES:
        if alpha.limit > 1.0 - HYPOTHESIS_MARGIN or alpha.sup(cfg.max_iter) > 1.0 - HYPOTHESIS_MARGIN:
            problems.append(HypothesisError("limsup α_n<1", f"α_n = {alpha.describe()}"))
        try:
            resolve_M(m.domain, g, cfg.M)
        except HypothesisError as e:
            problems.append(e)
    if scheme == "myx" or scheme in HYBRID_SCHEMES:
        if beta.limit < 1.0 - HYPOTHESIS_MARGIN:
            problems.append(HypothesisError("β_n→1", f"β_n = {beta.describe()} 的极限为 {beta.limit:g}"))

    try:
        m.fixed_set()
    except UnsupportedMappingError as e:
        problems.append(e)
    return problems


def check_hypotheses(m: MappingSpec, g: SpaceGeometry, cfg: SolverConfig, scheme: Optional[str] = None):
    """存在违反时抛出第一个错误"""
    problems = hypothesis_violations(m, g, cfg, scheme)
    if problems:
        raise problems[0]


# =============================================================================
# 迭代循环
# =============================================================================

def _reference_target(m: MappingSpec, g: SpaceGeometry, x0: np.ndarray) -> np.ndarray:
    """q = Π_{F(T)}x₀"""
    return generalized_project(g, m.fixed_set().set, x0).point


def _run_fixed_point(m: MappingSpec, cfg: SolverConfig, scheme: str) -> IterationTrace:
    """Mann / Ishikawa"""
    g = m.geometry
    check_hypotheses(m, g, cfg, scheme)
    logger = get_logger()
    sched = cfg.schedule
    x = g.check(cfg.x0, "x0")
    x0 = x
    target = _reference_target(m, g, x0)
    records: List[IterationRecord] = []
    terminated, error = "max_iter", None
    logger.info(f"{scheme} 开始: {m.describe()}, x0 = {x0.tolist()}, max_iter = {cfg.max_iter}")

    try:
        for n in range(cfg.max_iter):
            alpha = sched.alpha.at(n)
            tx = m.apply(x)
            if scheme == "mann":
                y = tx
                x_next = _combine(g, alpha, x, tx)
            else:
                y = _combine(g, sched.beta.at(n), x, tx)
                x_next = _combine(g, alpha, x, m.apply(y))
            residual = g.norm(tx - x)
            step = g.norm(x_next - x)
            records.append(IterationRecord(
                n=n, x=x, y=y, z=None,
                phi_step=g.lyapunov(x_next, x),
                step=step,
                step_to_y=g.norm(x_next - y),
                residual=residual,
                power_residual=residual,
                phi_to_x0=g.lyapunov(x, x0),
                dist_to_target=g.norm(x - target),
            ))
            x = x_next
            if step <= cfg.stop_tol and residual <= cfg.residual_tol:
                terminated = "tolerance"
                break
    except CQError as e:
        terminated, error = "error", str(e)
        logger.error(f"{scheme} 第 {len(records)} 步出错: {e}")

    logger.info(f"{scheme} 结束: {terminated}, 迭代 {len(records)} 次")
    return IterationTrace(scheme, records, terminated, x, target, error)


@dataclass(frozen=True)
class _CQSetup:
    """一次 CQ 运行中与步号无关的量"""
    scheme: str
    x0: np.ndarray
    M: float
    diam: float
    target: np.ndarray

    @property
    def uses_k(self) -> bool:
        return self.scheme in HYBRID_SCHEMES or self.scheme == "kim_xu"

    def cn_arguments(self, alpha: float, k: float):
        """half_space_of_Cn 的 (k, M, θ)"""
        if self.scheme == "kim_xu":
            return 1.0, 0.0, kim_xu_theta(alpha, k, self.diam)
        if self.scheme in HYBRID_SCHEMES:
            return k, self.M, 0.0
        return 1.0, 0.0, 0.0


def _cq_record(
    g: SpaceGeometry,
    setup: _CQSetup,
    n: int,
    vectors: Dict[str, np.ndarray],
    cn: DualHalfSpace,
    qn: DualHalfSpace,
    inner_iterations: int,
    fallback: bool
) -> IterationRecord:
    x, x_next, target = vectors["x"], vectors["x_next"], setup.target
    return IterationRecord(
        n=n, x=x, y=vectors["y"], z=vectors["z"],
        phi_step=g.lyapunov(x_next, x),
        step=g.norm(x_next - x),
        step_to_y=g.norm(x_next - vectors["y"]),
        residual=g.norm(vectors["tx"] - x),
        power_residual=g.norm(vectors["tnx"] - x),
        phi_to_x0=g.lyapunov(x, setup.x0),
        dist_to_target=g.norm(x - target),
        cn_slack_pref=cn.slack(target),
        qn_slack_pref=qn.slack(target),
        cn=cn, qn=qn,
        inner_iterations=inner_iterations,
        fallback=fallback,
    )


def _cq_float_pass(m: MappingSpec, g: SpaceGeometry, cfg: SolverConfig, setup: _CQSetup):
    """双精度循环；返回 (记录, 终止原因, 错误信息, 末点)"""
    logger = get_logger()
    sched, scheme, x0 = cfg.schedule, setup.scheme, setup.x0
    x = x0
    records: List[IterationRecord] = []
    terminated, error = "max_iter", None
    try:
        for n in range(cfg.max_iter):
            power = max(n, 1)
            alpha = sched.alpha.at(n)
            k = m.k(power) if setup.uses_k else 1.0
            tx = m.apply(x)
            tnx = tx

            if scheme == "nakajo_takahashi":
                z = x
                y = _combine(g, alpha, x, tx)
            elif scheme == "kim_xu":
                z = x
                tnx = m.apply_power(x, power)
                y = _combine(g, alpha, x, tnx)
            elif scheme == "myx":
                z = _combine(g, sched.beta.at(n), x, tx)
                y = _combine(g, alpha, x, m.apply(z))
            else:
                tnx = m.apply_power(x, power)
                z = _combine(g, sched.beta.at(n), x, tnx)
                y = _combine(g, alpha, x, m.apply_power(z, power))

            cn = half_space_of_Cn(g, x, y, z, alpha, *setup.cn_arguments(alpha, k))
            qn = half_space_of_Qn(g, x0, x)
            projection = project_two_halfspaces_dual(g, cn, qn, x0, cfg.projection_tol)
            x_next = projection.point
            fallback = False
            if m.domain.max_violation(x_next) > DOMAIN_TOL:
                logger.warning(f"第 {n} 步 x_(n+1) 越出定义域，改投影到 C ∩ C_n ∩ Q_n")
                x_next = generalized_project(g, Intersection([m.domain, cn, qn]), x0).point
                fallback = True

            vectors = {"x": x, "y": y, "z": z, "tx": tx, "tnx": tnx, "x_next": x_next}
            records.append(_cq_record(g, setup, n, vectors, cn, qn, projection.inner_iterations, fallback))
            rec = records[-1]
            logger.debug(f"n={n} k={k:.6g} step={rec.step:.3e} residual={rec.residual:.3e} dist={rec.dist_to_target:.3e}")
            x = x_next
            if rec.step <= cfg.stop_tol and rec.residual <= cfg.residual_tol:
                terminated = "tolerance"
                break
    except CQError as e:
        terminated, error = "error", str(e)
        logger.error(f"{scheme} 第 {len(records)} 步出错: {e}")
    return records, terminated, error, x


def _precise_Cn(pg: PreciseGeometry, x: list, y: list, z: list, alpha: float, k: float, M: float, theta: float):
    """half_space_of_Cn 的扩展精度版本，算式逐项相同"""
    jx, jy, jz = pg.duality_map(x), pg.duality_map(y), pg.duality_map(z)
    nx2, ny2, nz2 = pg.norm_sq(x), pg.norm_sq(y), pg.norm_sq(z)
    al, kk = pg.scalar(alpha), pg.scalar(k)
    k2 = kk * kk
    a = [2 * (u - v + (1 - al) * (k2 * w - u)) for u, v, w in zip(jx, jy, jz)]
    b = nx2 - ny2 + (1 - al) * (k2 * nz2 - nx2 + (k2 - 1) * pg.scalar(M)) + pg.scalar(theta)
    return PreciseHalfSpace(a, b)


def _precise_Qn(pg: PreciseGeometry, jx0: list, xn: list):
    a = pg.sub(jx0, pg.duality_map(xn))
    return PreciseHalfSpace(a, pg.dot(xn, a))


def _to_float_halfspace(pg: PreciseGeometry, h: PreciseHalfSpace) -> DualHalfSpace:
    return DualHalfSpace(pg.to_array(h.a), float(h.b))


def _cq_extended_pass(m: MappingSpec, pg: PreciseGeometry, cfg: SolverConfig, setup: _CQSetup, enforce: bool):
    """
    扩展精度循环；记录中的向量与半空间舍入为双精度

    C_n 有效的步按 2‖x₀ - x_{n+1}‖/‖a_C‖ 累计放大的位数，
    enforce 为真且位数不足时抛出 PrecisionExhaustedError
    """
    logger = get_logger()
    g = pg.geometry
    sched, scheme, x0 = cfg.schedule, setup.scheme, setup.x0
    x0p = pg.vec(x0)
    jx0 = pg.duality_map(x0p)
    x = x0p
    records: List[IterationRecord] = []
    terminated, error = "max_iter", None
    used_bits, warned = 0.0, False
    try:
        for n in range(cfg.max_iter):
            power = max(n, 1)
            alpha = sched.alpha.at(n)
            k = m.k(power) if setup.uses_k else 1.0
            tx = m.apply_precise(x, pg)
            tnx = tx

            if scheme == "nakajo_takahashi":
                z = x
                y = pg.combine(alpha, x, tx)
            elif scheme == "kim_xu":
                z = x
                if not m.idempotent:
                    tnx = m.apply_power_precise(x, power, pg)
                y = pg.combine(alpha, x, tnx)
            elif scheme == "myx":
                z = pg.combine(sched.beta.at(n), x, tx)
                y = pg.combine(alpha, x, m.apply_precise(z, pg))
            else:
                if not m.idempotent:
                    tnx = m.apply_power_precise(x, power, pg)
                z = pg.combine(sched.beta.at(n), x, tnx)
                y = pg.combine(alpha, x, m.apply_power_precise(z, power, pg))

            cn = _precise_Cn(pg, x, y, z, alpha, *setup.cn_arguments(alpha, k))
            qn = _precise_Qn(pg, jx0, x)
            cn_f, qn_f = _to_float_halfspace(pg, cn), _to_float_halfspace(pg, qn)

            def float_start():
                return project_two_halfspaces_dual(g, cn_f, qn_f, x0, cfg.projection_tol).multipliers

            x_next, multipliers = project_two_halfspaces(pg, cn, qn, x0p, float_start)
            x_next_f = pg.to_array(x_next)
            fallback = False
            if m.domain.max_violation(x_next_f) > DOMAIN_TOL:
                logger.warning(f"第 {n} 步 x_(n+1) 越出定义域，改投影到 C ∩ C_n ∩ Q_n")
                x_next_f = generalized_project(g, Intersection([m.domain, cn_f, qn_f]), x0).point
                x_next = pg.vec(x_next_f)
                fallback = True

            norm_a = float(np.linalg.norm(cn_f.a))
            if multipliers[0] > 0 and norm_a > 0.0:
                gain = 2.0 * float(np.linalg.norm(x0 - x_next_f)) / norm_a
                used_bits += math.log2(max(gain, 1.0))
            if used_bits + GUARD_BITS > pg.bits:
                if enforce:
                    raise PrecisionExhaustedError(n, used_bits, pg.bits)
                if not warned:
                    logger.warning(f"第 {n} 步累计放大 {used_bits:.0f} 位，已达精度上限 {pg.bits} 位，后续步可能偏离精确轨迹")
                    warned = True

            vectors = {
                "x": pg.to_array(x), "y": pg.to_array(y), "z": pg.to_array(z),
                "tx": pg.to_array(tx), "tnx": pg.to_array(tnx), "x_next": x_next_f,
            }
            records.append(_cq_record(g, setup, n, vectors, cn_f, qn_f, 0, fallback))
            rec = records[-1]
            logger.debug(
                f"n={n} k={k:.6g} step={rec.step:.3e} residual={rec.residual:.3e} "
                f"dist={rec.dist_to_target:.3e} bits={used_bits:.0f}/{pg.bits}"
            )
            x = x_next
            if rec.step <= cfg.stop_tol and rec.residual <= cfg.residual_tol:
                terminated = "tolerance"
                break
    except PrecisionExhaustedError:
        raise
    except CQError as e:
        terminated, error = "error", str(e)
        logger.error(f"{scheme} 第 {len(records)} 步出错: {e}")
    return records, terminated, error, pg.to_array(x)


def _cq_extended(m: MappingSpec, g: SpaceGeometry, cfg: SolverConfig, setup: _CQSetup):
    """从 START_BITS 位开始，位数不足时加倍重算，直到 max_precision_bits"""
    logger = get_logger()
    bits = min(START_BITS, cfg.max_precision_bits)
    while True:
        pg = PreciseGeometry(g, bits)
        try:
            return _cq_extended_pass(m, pg, cfg, setup, enforce=bits < cfg.max_precision_bits) + (bits,)
        except PrecisionExhaustedError as e:
            bits = min(2 * bits, cfg.max_precision_bits)
            logger.info(f"{e}，改用 {bits} 位重算")


def _run_cq(m: MappingSpec, g: SpaceGeometry, cfg: SolverConfig, scheme: str) -> IterationTrace:
    """CQ 混合投影族的共用循环"""
    check_hypotheses(m, g, cfg, scheme)
    logger = get_logger()
    domain = m.domain
    x0 = g.check(cfg.x0, "x0")
    M = resolve_M(domain, g, cfg.M) if scheme in HYBRID_SCHEMES else 0.0
    diam = resolve_diam(domain, cfg.diam_C) if scheme == "kim_xu" else 0.0
    setup = _CQSetup(scheme, x0, M, diam, _reference_target(m, g, x0))

    extended = cfg.extended_precision and m.supports_extended_precision()
    if cfg.extended_precision and not extended:
        logger.info(f"{m.describe()} 没有扩展精度实现，使用双精度")
    logger.info(
        f"{scheme} 开始: {m.describe()}, {g.describe()}, x0 = {x0.tolist()}, "
        f"k_n = {m.k_schedule.describe()}, M = {M:g}, max_iter = {cfg.max_iter}"
    )

    if extended:
        records, terminated, error, x, bits = _cq_extended(m, g, cfg, setup)
    else:
        records, terminated, error, x = _cq_float_pass(m, g, cfg, setup)
        bits = FLOAT64_BITS

    logger.info(f"{scheme} 结束: {terminated}, 迭代 {len(records)} 次, 精度 {bits} 位, 末点 {x.tolist()}")
    return IterationTrace(scheme, records, terminated, x, setup.target, error, M, bits)


def run_mann(m: MappingSpec, cfg: SolverConfig) -> IterationTrace:
    """x_{n+1} = α_n x_n + (1-α_n)Tx_n"""
    return _run_fixed_point(m, cfg, "mann")


def run_ishikawa(m: MappingSpec, cfg: SolverConfig) -> IterationTrace:
    """y_n = β_n x_n + (1-β_n)Tx_n，x_{n+1} = α_n x_n + (1-α_n)Ty_n"""
    return _run_fixed_point(m, cfg, "ishikawa")


def run_nakajo_takahashi(m: MappingSpec, cfg: SolverConfig) -> IterationTrace:
    return _run_cq(m, m.geometry, cfg, "nakajo_takahashi")


def run_kim_xu(m: MappingSpec, cfg: SolverConfig) -> IterationTrace:
    """渐近非扩张版本：y_n 用 T^n x_n，C_n 放宽 θ_n"""
    return _run_cq(m, m.geometry, cfg, "kim_xu")


def run_myx(m: MappingSpec, cfg: SolverConfig) -> IterationTrace:
    return _run_cq(m, m.geometry, cfg, "myx")


def run_hybrid_hilbert(m: MappingSpec, cfg: SolverConfig) -> IterationTrace:
    return _run_cq(m, m.geometry, cfg, "hybrid_hilbert")


def run_hybrid_banach(m: MappingSpec, g: SpaceGeometry, cfg: SolverConfig) -> IterationTrace:
    """
    一致凸一致光滑空间中的混合投影：
        z_n = J⁻¹(β_n Jx_n + (1-β_n)JT^n x_n)
        y_n = J⁻¹(α_n Jx_n + (1-α_n)JT^n z_n)
        x_{n+1} = Π_{C_n∩Q_n} x₀
    """
    return _run_cq(m, g, cfg, "hybrid_banach")


def run_scheme(m: MappingSpec, g: SpaceGeometry, cfg: SolverConfig) -> IterationTrace:
    """按 cfg.scheme 分派"""
    if cfg.scheme == "mann":
        return run_mann(m, cfg)
    if cfg.scheme == "ishikawa":
        return run_ishikawa(m, cfg)
    if cfg.scheme == "hybrid_banach":
        return run_hybrid_banach(m, g, cfg)
    return _run_cq(m, m.geometry, cfg, cfg.scheme)


# =============================================================================
# 轨迹不变量复核
# =============================================================================

@dataclass
class InvariantReport:
    """
    各项检查的最坏超出量（检查值减容差，≤ 0 表示满足）

    checks 的键：cn_slack、qn_slack、phi_monotone、phi_step、step_to_y、residual
    """
    checks: Dict[str, float] = field(default_factory=dict)

    @property
    def max_violation(self) -> float:
        if not self.checks:
            return 0.0
        return max(0.0, max(self.checks.values()))

    @property
    def passed(self) -> bool:
        return self.max_violation == 0.0


def check_trace_invariants(
    trace: IterationTrace,
    m: MappingSpec,
    g: SpaceGeometry,
    samples: int = 20,
    seed: int = 0,
    window_tol: float = 1e-6,
    residual_window_tol: float = 1e-5
) -> InvariantReport:
    """
    复核证明路径上的不变量

    - F(T) 中采样点（含参照解 q）对每个 C_n、Q_n 的松弛量 ≥ -1e-7
    - φ(x_n, x₀) 单调不减（容差 1e-8）
    - 已收敛的运行：最后四分之一窗口内 φ(x_{n+1}, x_n)、‖x_{n+1} - y_n‖ ≤ window_tol，
      ‖Tx_n - x_n‖ ≤ residual_window_tol
    """
    report = InvariantReport()
    records = trace.records
    if not records:
        return report

    if trace.scheme in CQ_SCHEMES:
        rng = np.random.default_rng(seed)
        points = m.fixed_set().sample(rng, samples)
        if trace.target is not None:
            points = np.vstack([points, trace.target])
        cn_worst, qn_worst = -math.inf, -math.inf
        for rec in records:
            if rec.cn is None:
                continue
            cn_worst = max(cn_worst, float(np.max(points @ rec.cn.a - rec.cn.b)))
            qn_worst = max(qn_worst, float(np.max(points @ rec.qn.a - rec.qn.b)))
        report.checks["cn_slack"] = cn_worst - SLACK_TOL
        report.checks["qn_slack"] = qn_worst - SLACK_TOL

        x0 = records[0].x
        phis = [rec.phi_to_x0 for rec in records] + [g.lyapunov(trace.final_point, x0)]
        drops = [phis[i] - phis[i + 1] for i in range(len(phis) - 1)]
        report.checks["phi_monotone"] = (max(drops) if drops else 0.0) - 1e-8

    if trace.converged:
        window = records[-max(1, len(records) // 4):]
        report.checks["phi_step"] = max(r.phi_step for r in window) - window_tol
        report.checks["step_to_y"] = max(r.step_to_y for r in window) - window_tol
        report.checks["residual"] = max(r.residual for r in window) - residual_window_tol
    return report
