"""
凸集与投影模块 - 度量投影 P_C、广义投影 Π_C 以及 C_n ∩ Q_n 上的投影

集合表示：Box、Ball、DualHalfSpace（对偶配对意义下的半空间）、Intersection。
- metric_project: 欧氏最近点，闭式解或 Dykstra 交替投影
- generalized_project: 最小化 φ(·, x)；Hilbert 空间退化为 metric_project
- project_halfspace_dual / project_two_halfspaces_dual: KKT 乘子求解（标量求根 / 有界对偶 L-BFGS-B + Newton 精修，SLSQP 兜底）
- 盒子上的广义投影化为关于 ‖y‖ 的一维方程
- brute_force_project: 多起点独立参照解，只用于测试
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, minimize

from errors import ConfigurationError, ConvergenceError, InfeasibleError, NumericalError, UnsupportedMappingError
from extended_precision import PreciseGeometry, box_generalized_project
from geometry import ArrayLike, SpaceGeometry, as_vector, pairing
from logger_setup import get_logger

# 法向量范数低于此值视为退化半空间
NORMAL_EPS = 1e-13

# 默认可行性容差
FEASIBILITY_TOL = 1e-9

# 有效集枚举中挑选候选点时的（缩放）容差
CANDIDATE_TOL = 1e-12

DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_ITER = 100000

# 广义投影内层迭代上限
INNER_MAX_ITER = 10000

# 标量乘子求根的区间倍增上限
MAX_DOUBLINGS = 200

# 双约束对偶问题：L-BFGS-B 迭代上限、Newton 精修步数、接受解的 KKT 残差
DUAL_MAX_ITER = 1000
NEWTON_POLISH_ITER = 50
DUAL_TOL = 1e-10


@dataclass(frozen=True)
class ProjectionResult:
    """投影结果：点、乘子（均非负）、KKT 残差、内层迭代次数"""
    point: np.ndarray
    multipliers: Tuple[float, ...] = ()
    residual: float = 0.0
    inner_iterations: int = 0


class ConvexSet:
    """闭凸集基类"""

    # 是否提供 metric_project_precise
    supports_extended_precision = False

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def is_bounded(self) -> bool:
        return False

    def max_violation(self, x: np.ndarray) -> float:
        """x 违反定义不等式的最大量（可行时为 0）"""
        raise NotImplementedError

    def contains(self, x: ArrayLike, tol: float = FEASIBILITY_TOL) -> bool:
        return self.max_violation(as_vector(x, self.dim)) <= tol

    def metric_project(self, x: ArrayLike) -> ProjectionResult:
        raise NotImplementedError

    def project_rows(self, X: np.ndarray) -> np.ndarray:
        """逐行欧氏投影，子类可给出向量化实现"""
        return np.vstack([self.metric_project(row).point for row in X])

    def metric_project_precise(self, x: list, pg: PreciseGeometry) -> list:
        """扩展精度下的欧氏投影，x 为 mpf 列表"""
        raise UnsupportedMappingError(f"{self.describe()} 没有扩展精度投影")

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """在集合内随机取 count 个点，形状 (count, d)"""
        raw = rng.normal(scale=3.0, size=(count, self.dim))
        return self.project_rows(raw)

    def norm_radius(self, g: SpaceGeometry) -> float:
        """sup_{v∈C} ‖v‖ 的上界（盒子为精确值）"""
        return float("inf")

    def diameter(self) -> float:
        """欧氏直径"""
        return float("inf")

    def slsqp_constraints(self) -> Tuple[Optional[list], list]:
        """给 SLSQP 用的 (bounds, constraints)"""
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


@dataclass(frozen=True, eq=False)
class Box(ConvexSet):
    lower: np.ndarray
    upper: np.ndarray

    supports_extended_precision = True

    def __post_init__(self):
        lower = as_vector(self.lower, name="lower")
        upper = as_vector(self.upper, lower.shape[0], name="upper")
        if np.any(lower > upper):
            raise ConfigurationError("Box 要求 lower_i ≤ upper_i")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def point(cls, center: ArrayLike) -> "Box":
        """单点集 {c}"""
        c = as_vector(center, name="center")
        return cls(c, c.copy())

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def is_bounded(self) -> bool:
        return True

    def max_violation(self, x: np.ndarray) -> float:
        return float(max(0.0, np.max(self.lower - x), np.max(x - self.upper)))

    def metric_project(self, x: ArrayLike) -> ProjectionResult:
        v = as_vector(x, self.dim)
        y = np.clip(v, self.lower, self.upper)
        return ProjectionResult(y, tuple(np.abs(v - y)), 0.0, 0)

    def project_rows(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, self.lower, self.upper)

    def metric_project_precise(self, x: list, pg: PreciseGeometry) -> list:
        return [min(max(c, lo), hi) for c, lo, hi in zip(x, pg.vec(self.lower), pg.vec(self.upper))]

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dim))

    def norm_radius(self, g: SpaceGeometry) -> float:
        return g.norm(np.maximum(np.abs(self.lower), np.abs(self.upper)))

    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def slsqp_constraints(self):
        return list(zip(self.lower, self.upper)), []

    def describe(self) -> str:
        return f"Box({self.lower.tolist()}, {self.upper.tolist()})"


@dataclass(frozen=True, eq=False)
class Ball(ConvexSet):
    """欧氏球 {v: ‖v - center‖₂ ≤ radius}"""
    center: np.ndarray
    radius: float

    supports_extended_precision = True

    def __post_init__(self):
        object.__setattr__(self, "center", as_vector(self.center, name="center"))
        if not (self.radius > 0 and np.isfinite(self.radius)):
            raise ConfigurationError(f"Ball 半径必须为正，实际 {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def is_bounded(self) -> bool:
        return True

    def max_violation(self, x: np.ndarray) -> float:
        return max(0.0, float(np.linalg.norm(x - self.center)) - self.radius)

    def metric_project(self, x: ArrayLike) -> ProjectionResult:
        v = as_vector(x, self.dim)
        offset = v - self.center
        dist = float(np.linalg.norm(offset))
        if dist <= self.radius:
            return ProjectionResult(v, (0.0,), 0.0, 0)
        y = self.center + offset * (self.radius / dist)
        return ProjectionResult(y, ((dist - self.radius) / (2.0 * self.radius),), 0.0, 0)

    def project_rows(self, X: np.ndarray) -> np.ndarray:
        offset = X - self.center
        dist = np.linalg.norm(offset, axis=1, keepdims=True)
        scale = np.minimum(1.0, self.radius / np.maximum(dist, 1e-300))
        return self.center + offset * scale

    def metric_project_precise(self, x: list, pg: PreciseGeometry) -> list:
        center = pg.vec(self.center)
        offset = pg.sub(x, center)
        dist = pg.euclidean_norm(offset)
        radius = pg.scalar(self.radius)
        if dist <= radius:
            return list(x)
        return pg.add(center, pg.scale(radius / dist, offset))

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        direction = rng.normal(size=(count, self.dim))
        direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
        radii = self.radius * rng.uniform(size=(count, 1)) ** (1.0 / self.dim)
        return self.center + direction * radii

    def norm_radius(self, g: SpaceGeometry) -> float:
        # ‖w‖_p ≤ d^{max(0, 1/p - 1/2)}‖w‖₂
        factor = self.dim ** max(0.0, 1.0 / g.p - 0.5)
        return g.norm(self.center) + self.radius * factor

    def diameter(self) -> float:
        return 2.0 * self.radius

    def slsqp_constraints(self):
        c, r = self.center, self.radius
        return None, [{
            "type": "ineq",
            "fun": lambda y: r * r - float(np.dot(y - c, y - c)),
            "jac": lambda y: -2.0 * (y - c),
        }]

    def describe(self) -> str:
        return f"Ball({self.center.tolist()}, {self.radius:g})"


@dataclass(frozen=True, eq=False)
class DualHalfSpace(ConvexSet):
    """{v : ⟨v, a⟩ ≤ b}；a ≈ 0 时 b ≥ 0 表示全空间，b < 0 表示空集"""
    a: np.ndarray
    b: float

    supports_extended_precision = True

    def __post_init__(self):
        object.__setattr__(self, "a", as_vector(self.a, name="a"))
        if not np.isfinite(self.b):
            raise ConfigurationError("半空间偏置 b 必须有限")
        object.__setattr__(self, "b", float(self.b))

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def is_degenerate(self) -> bool:
        return float(np.linalg.norm(self.a)) <= NORMAL_EPS

    @property
    def is_full_space(self) -> bool:
        return self.is_degenerate and self.b >= 0.0

    @property
    def is_empty(self) -> bool:
        return self.is_degenerate and self.b < 0.0

    def violation(self, v: ArrayLike) -> float:
        """⟨v, a⟩ - b，正值表示违反"""
        return pairing(v, self.a) - self.b

    def slack(self, v: ArrayLike) -> float:
        """b - ⟨v, a⟩，非负表示 v 在半空间内"""
        return self.b - pairing(v, self.a)

    def holds(self, v: ArrayLike, tol: float = FEASIBILITY_TOL) -> bool:
        """违反量按到边界的距离计（除以 ‖a‖），容差随 max(1, ‖v‖) 缩放"""
        norm_a = float(np.linalg.norm(self.a))
        if norm_a <= NORMAL_EPS:
            return self.b >= -tol
        return self.violation(v) / norm_a <= tol * max(1.0, float(np.linalg.norm(v)))

    def max_violation(self, x: np.ndarray) -> float:
        if self.is_full_space:
            return 0.0
        return max(0.0, self.violation(x))

    def metric_project(self, x: ArrayLike) -> ProjectionResult:
        v = as_vector(x, self.dim)
        if self.is_full_space:
            return ProjectionResult(v, (0.0,), 0.0, 0)
        if self.is_empty:
            raise InfeasibleError(f"退化半空间 0·v ≤ {self.b:.3e} 为空集")
        viol = self.violation(v)
        if viol <= 0.0:
            return ProjectionResult(v, (0.0,), 0.0, 0)
        lam = viol / float(np.dot(self.a, self.a))
        return ProjectionResult(v - lam * self.a, (lam,), 0.0, 0)

    def project_rows(self, X: np.ndarray) -> np.ndarray:
        if self.is_full_space:
            return np.array(X, dtype=float)
        if self.is_empty:
            raise InfeasibleError("退化半空间为空集")
        lam = np.maximum(X @ self.a - self.b, 0.0) / float(np.dot(self.a, self.a))
        return X - lam[:, None] * self.a

    def metric_project_precise(self, x: list, pg: PreciseGeometry) -> list:
        if self.is_full_space:
            return list(x)
        if self.is_empty:
            raise InfeasibleError(f"退化半空间 0·v ≤ {self.b:.3e} 为空集")
        a = pg.vec(self.a)
        viol = pg.dot(x, a) - pg.scalar(self.b)
        if viol <= 0:
            return list(x)
        return pg.sub(x, pg.scale(viol / pg.dot(a, a), a))

    def slsqp_constraints(self):
        a, b = self.a, self.b
        return None, [{"type": "ineq", "fun": lambda y: b - float(np.dot(y, a)), "jac": lambda y: -a}]

    def describe(self) -> str:
        return f"HalfSpace(a={self.a.tolist()}, b={self.b:.6g})"


HalfSpace = DualHalfSpace


class Intersection(ConvexSet):
    """有限个闭凸集的交集（嵌套交集会被展开）"""

    def __init__(self, sets: Sequence[ConvexSet]):
        flat: List[ConvexSet] = []
        for s in sets:
            if isinstance(s, Intersection):
                flat.extend(s.sets)
            else:
                flat.append(s)
        if not flat:
            raise ConfigurationError("Intersection 至少需要一个集合")
        dims = {s.dim for s in flat}
        if len(dims) != 1:
            raise ConfigurationError(f"Intersection 成员维度不一致: {sorted(dims)}")
        self.sets = tuple(flat)

    @property
    def dim(self) -> int:
        return self.sets[0].dim

    @property
    def is_bounded(self) -> bool:
        return any(s.is_bounded for s in self.sets)

    @property
    def halfspaces_only(self) -> bool:
        return all(isinstance(s, DualHalfSpace) for s in self.sets)

    def max_violation(self, x: np.ndarray) -> float:
        return max(s.max_violation(x) for s in self.sets)

    def metric_project(self, x: ArrayLike) -> ProjectionResult:
        v = as_vector(x, self.dim)
        if len(self.sets) == 1:
            return self.sets[0].metric_project(v)
        if len(self.sets) == 2 and self.halfspaces_only:
            return _two_halfspaces_hilbert(self.sets[0], self.sets[1], v, CANDIDATE_TOL)
        return dykstra_project(self.sets, v)

    def norm_radius(self, g: SpaceGeometry) -> float:
        return min(s.norm_radius(g) for s in self.sets)

    def diameter(self) -> float:
        return min(s.diameter() for s in self.sets)

    def slsqp_constraints(self):
        bounds, cons = None, []
        for s in self.sets:
            b, c = s.slsqp_constraints()
            cons.extend(c)
            if b is not None:
                bounds = b if bounds is None else [
                    (max(lo1, lo2), min(hi1, hi2)) for (lo1, hi1), (lo2, hi2) in zip(bounds, b)
                ]
        return bounds, cons

    def describe(self) -> str:
        return "Intersection[" + ", ".join(s.describe() for s in self.sets) + "]"


# =============================================================================
# 度量投影
# =============================================================================

def contains(s: ConvexSet, x: ArrayLike, tol: float = FEASIBILITY_TOL) -> bool:
    """x 违反 s 的定义不等式不超过 tol"""
    return s.contains(x, tol)


def metric_project(s: ConvexSet, x: ArrayLike) -> ProjectionResult:
    """欧氏度量投影 P_C"""
    return s.metric_project(x)


def dykstra_project(
    sets: Sequence[ConvexSet],
    x: np.ndarray,
    tol: float = DYKSTRA_TOL,
    max_iter: int = DYKSTRA_MAX_ITER
) -> ProjectionResult:
    """
    Dykstra 交替投影求交集上的欧氏投影

    Args:
        sets: 成员集合
        x: 被投影点
        tol: 相邻两轮变化量阈值
        max_iter: 最大轮数

    Returns:
        投影结果；达到上限且仍有正的可行性缺口时报不可行
    """
    y = np.array(x, dtype=float)
    increments = [np.zeros_like(y) for _ in sets]
    change = float("inf")
    for k in range(1, max_iter + 1):
        y_prev = y
        for i, s in enumerate(sets):
            z = s.metric_project(y + increments[i]).point
            increments[i] = y + increments[i] - z
            y = z
        change = float(np.linalg.norm(y - y_prev))
        if change <= tol and max(s.max_violation(y) for s in sets) <= FEASIBILITY_TOL:
            return ProjectionResult(y, (), change, k)

    gap = max(s.max_violation(y) for s in sets)
    if gap > FEASIBILITY_TOL:
        raise InfeasibleError(f"Dykstra 在 {max_iter} 轮后仍有可行性缺口 {gap:.3e}，交集可能为空")
    get_logger().warning(f"Dykstra 达到迭代上限 {max_iter}，末轮变化 {change:.3e}")
    return ProjectionResult(y, (), change, max_iter)


def _live_halfspaces(hs: Sequence[DualHalfSpace]) -> List[int]:
    """去掉表示全空间的退化半空间，遇到空集直接报错；返回保留者的下标"""
    live = []
    for i, h in enumerate(hs):
        if h.is_empty:
            raise InfeasibleError(f"第 {i + 1} 个半空间法向量退化且 b = {h.b:.3e} < 0，集合为空")
        if not h.is_full_space:
            live.append(i)
    return live


def _two_halfspaces_hilbert(
    h1: DualHalfSpace,
    h2: DualHalfSpace,
    x: np.ndarray,
    tol: float
) -> ProjectionResult:
    """欧氏情形两个半空间交集上的精确投影：四种有效集情形依次尝试"""
    hs = (h1, h2)
    live = _live_halfspaces(hs)
    multipliers = [0.0, 0.0]

    if all(hs[i].holds(x, tol) for i in live):
        return ProjectionResult(x, tuple(multipliers), 0.0, 0)

    for i in live:
        h = hs[i]
        viol = h.violation(x)
        if viol <= 0.0:
            continue
        lam = viol / float(np.dot(h.a, h.a))
        y = x - lam * h.a
        if all(hs[j].holds(y, tol) for j in live if j != i):
            multipliers[i] = lam
            return ProjectionResult(y, tuple(multipliers), 0.0, 1)

    if len(live) < 2:
        raise InfeasibleError("单约束投影不可行")

    a1, a2 = h1.a, h2.a
    gram = np.array([[np.dot(a1, a1), np.dot(a1, a2)], [np.dot(a2, a1), np.dot(a2, a2)]])
    rhs = np.array([h1.violation(x), h2.violation(x)])
    try:
        lam, mu = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        lam, mu = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    if min(lam, mu) < -FEASIBILITY_TOL:
        raise InfeasibleError(f"双约束有效情形乘子为负 (λ={lam:.3e}, μ={mu:.3e})，C_n∩Q_n 可能为空")
    lam, mu = max(lam, 0.0), max(mu, 0.0)
    y = x - lam * a1 - mu * a2
    if not (h1.holds(y) and h2.holds(y)):
        raise InfeasibleError("四种有效集情形均不可行，C_n∩Q_n 可能为空")
    residual = float(np.max(np.abs([h1.violation(y), h2.violation(y)])))
    return ProjectionResult(y, (lam, mu), residual, 2)


# =============================================================================
# 广义投影 Π_C
# =============================================================================

def project_halfspace_dual(
    g: SpaceGeometry,
    h: DualHalfSpace,
    x: ArrayLike
) -> ProjectionResult:
    """
    单个半空间上的广义投影

    y = J⁻¹(Jx - λa)，λ ≥ 0 是 m(λ) = ⟨J⁻¹(Jx - λa), a⟩ - b 的唯一根；
    m 连续且严格递减，先倍增找区间再用 Brent 法求根

    Args:
        g: 几何
        h: 半空间
        x: 被投影点

    Returns:
        投影结果，multipliers = (λ,)
    """
    v = g.check(x)
    if h.is_full_space:
        return ProjectionResult(v, (0.0,), 0.0, 0)
    if h.is_empty:
        raise InfeasibleError(f"退化半空间 0·v ≤ {h.b:.3e} 为空集")
    viol = h.violation(v)
    if viol <= 0.0:
        return ProjectionResult(v, (0.0,), 0.0, 0)
    if g.is_hilbert:
        return h.metric_project(v)

    jx = g.duality_map(v)
    a, b = h.a, h.b

    def m(lam: float) -> float:
        return pairing(g.inverse_duality_map(jx - lam * a), a) - b

    hi = max(viol / float(np.dot(a, a)), 1e-12)
    doublings = 0
    while m(hi) > 0.0:
        hi *= 2.0
        doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise NumericalError(f"乘子区间倍增 {MAX_DOUBLINGS} 次仍未变号，法向量可能退化 (‖a‖={np.linalg.norm(a):.3e})")

    if m(hi) == 0.0:
        lam, calls = hi, doublings
    else:
        try:
            lam, info = brentq(m, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                               maxiter=500, full_output=True)
        except RuntimeError as e:
            raise ConvergenceError(f"半空间乘子求根失败: {e}", best_point=v, residual=abs(m(hi))) from e
        calls = info.function_calls + doublings

    y = g.inverse_duality_map(jx - lam * a)
    return ProjectionResult(y, (float(lam),), abs(m(lam)), calls)


def _kkt_residual(mult: np.ndarray, res: np.ndarray) -> float:
    """乘子为正的约束要求等式成立，乘子为 0 的约束只要求不违反"""
    return float(np.max(np.where(mult > 0.0, np.abs(res), np.maximum(res, 0.0))))


def _solve_both_active(
    g: SpaceGeometry,
    h1: DualHalfSpace,
    h2: DualHalfSpace,
    x: np.ndarray,
    start: Tuple[float, float]
) -> ProjectionResult:
    """
    两个约束同时有效时的乘子 (λ, μ)

    按单位法向量 â_i、b̂_i 求解凹的对偶问题
        max_{λ,μ≥0} -‖Jx - λâ₁ - μâ₂‖_*² - 2(λb̂₁ + μb̂₂)
    其梯度为 2(⟨y, â_i⟩ - b̂_i)，y = J⁻¹(Jx - λâ₁ - μâ₂)。先用 L-BFGS-B 求解，
    再用 J⁻¹ 的解析 Jacobian 做 Newton 精修；仍不可行时用 SLSQP 直接求原问题
    """
    logger = get_logger()
    jx = g.duality_map(x)
    norms = np.array([np.linalg.norm(h1.a), np.linalg.norm(h2.a)])
    A = np.vstack([h1.a, h2.a]) / norms[:, None]
    rhs = np.array([h1.b, h2.b]) / norms
    scale = max(1.0, float(np.max(np.abs(rhs))))

    def residual_at(mult: np.ndarray):
        w = jx - A.T @ mult
        y = g.inverse_duality_map(w)
        return A @ y - rhs, y, w

    def negative_dual(mult: np.ndarray):
        res, _, w = residual_at(mult)
        n = g.dual_norm(w)
        return n * n + 2.0 * float(mult @ rhs), -2.0 * res

    initial = np.maximum(np.array(start, dtype=float) * norms, 0.0)
    result = minimize(negative_dual, initial, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * 2,
                      options={"ftol": 1e-16, "gtol": 1e-14, "maxiter": DUAL_MAX_ITER})
    mult = np.maximum(np.asarray(result.x, dtype=float), 0.0)
    res, y, w = residual_at(mult)
    kkt = _kkt_residual(mult, res)
    iterations = int(result.nit)

    for _ in range(NEWTON_POLISH_ITER):
        if kkt <= 1e-14 * scale:
            break
        jac = -A @ g.inverse_duality_jacobian(w) @ A.T
        try:
            direction = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(jac, -res, rcond=None)[0]
        trial = np.maximum(mult + direction, 0.0)
        trial_res, trial_y, trial_w = residual_at(trial)
        trial_kkt = _kkt_residual(trial, trial_res)
        if not trial_kkt < kkt:
            break
        mult, res, y, w, kkt = trial, trial_res, trial_y, trial_w, trial_kkt
        iterations += 1

    lam, mu = mult / norms
    if kkt <= DUAL_TOL * scale and h1.holds(y) and h2.holds(y):
        return ProjectionResult(y, (float(lam), float(mu)), kkt, iterations)

    logger.warning(f"双约束对偶求解残差 {kkt:.3e}，改用 SLSQP 求原问题")
    polished = _slsqp_polish(g, Intersection([h1, h2]), jx, y)
    if not (h1.holds(polished) and h2.holds(polished)):
        raise ConvergenceError("双约束对偶求解与 SLSQP 均未得到可行点", best_point=y, residual=kkt)
    return ProjectionResult(polished, (float(lam), float(mu)), kkt, iterations)


def _check_opposite_pair(h1: DualHalfSpace, h2: DualHalfSpace):
    """法向量反向平行时 h1∩h2 可能是空的带状区域，对偶问题无下界，提前报告"""
    n1, n2 = float(np.linalg.norm(h1.a)), float(np.linalg.norm(h2.a))
    if abs(float(np.dot(h1.a, h2.a)) + n1 * n2) > 1e-12 * n1 * n2:
        return
    # a₁ = -c·a₂，c > 0：交集非空当且仅当 b₁ + c·b₂ ≥ 0
    c = n1 / n2
    gap = h1.b + c * h2.b
    if gap < -FEASIBILITY_TOL * max(1.0, abs(h1.b), abs(h2.b)):
        raise InfeasibleError(f"两个半空间法向量反向且间隙为 {gap:.3e}，C_n∩Q_n 为空")


def project_two_halfspaces_dual(
    g: SpaceGeometry,
    h1: DualHalfSpace,
    h2: DualHalfSpace,
    x: ArrayLike,
    tol: float = CANDIDATE_TOL
) -> ProjectionResult:
    """
    两个半空间交集上的广义投影（即 Π_{C_n∩Q_n}x₀）

    候选顺序：x 本身 → 只有 h1 有效 → 只有 h2 有效 → 两者都有效，第一个可行者胜出。
    极小点由严格凸性唯一，顺序只影响计算量。

    Returns:
        投影结果，multipliers = (λ, μ)
    """
    v = g.check(x)
    if g.is_hilbert:
        return _two_halfspaces_hilbert(h1, h2, v, tol)

    hs = (h1, h2)
    live = _live_halfspaces(hs)
    if all(hs[i].holds(v, tol) for i in live):
        return ProjectionResult(v, (0.0, 0.0), 0.0, 0)

    singles = {}
    work = 0
    for i in live:
        if hs[i].violation(v) <= 0.0:
            continue
        single = project_halfspace_dual(g, hs[i], v)
        singles[i] = single
        work += single.inner_iterations
        if all(hs[j].holds(single.point, tol) for j in live if j != i):
            multipliers = [0.0, 0.0]
            multipliers[i] = single.multipliers[0]
            return ProjectionResult(single.point, tuple(multipliers), single.residual, work)

    if len(live) < 2:
        raise InfeasibleError("单约束广义投影不可行")
    _check_opposite_pair(h1, h2)

    start = (
        singles[0].multipliers[0] if 0 in singles else 0.0,
        singles[1].multipliers[0] if 1 in singles else 0.0,
    )
    both = _solve_both_active(g, h1, h2, v, start)
    return ProjectionResult(both.point, both.multipliers, both.residual, work + both.inner_iterations)


def _projected_gradient(
    g: SpaceGeometry,
    s: ConvexSet,
    x: np.ndarray,
    tol: float,
    max_iter: int
) -> ProjectionResult:
    """
    投影梯度法最小化 φ(y, x)：梯度 2Jy - 2Jx，BB 初始步长 + 沿投影弧的 Armijo 回溯，
    梯度映射范数 ‖y - P_C(y - ∇)‖ ≤ tol 时停止
    """
    jx = g.duality_map(x)

    def objective(y: np.ndarray) -> float:
        n = g.norm(y)
        return n * n - 2.0 * float(np.dot(y, jx))

    def gradient(y: np.ndarray) -> np.ndarray:
        return 2.0 * (g.duality_map(y) - jx)

    y = s.metric_project(x).point
    fy, gy = objective(y), gradient(y)
    t = 1.0
    res = float("inf")
    for k in range(max_iter):
        res = float(np.linalg.norm(y - s.metric_project(y - gy).point))
        if res <= tol:
            return ProjectionResult(y, (), res, k)

        step = t
        while True:
            y_new = s.metric_project(y - step * gy).point
            d = y_new - y
            f_new = objective(y_new)
            if f_new <= fy + 1e-4 * float(np.dot(gy, d)) + 1e-15 * (1.0 + abs(fy)):
                break
            step *= 0.5
            if step < 1e-16:
                break

        g_new = gradient(y_new)
        sy = float(np.dot(d, g_new - gy))
        t = min(max(float(np.dot(d, d)) / sy, 1e-10), 1e10) if sy > 0.0 else 1.0
        y, fy, gy = y_new, f_new, g_new

    raise ConvergenceError(f"广义投影内层迭代达到上限 {max_iter}", best_point=y, residual=res)


def _box_generalized_project(g: SpaceGeometry, box: Box, x: np.ndarray) -> ProjectionResult:
    """
    p-范数下盒子上的广义投影

    给定 t = ‖y‖，KKT 条件逐坐标给出 y_i(t) = clip(c_i·t^γ, l_i, u_i)，
    c_i = sign(f_i)|f_i|^{1/(p-1)}，f = Jx，γ = (p-2)/(p-1)；再用 Brent 法解 ‖y(t)‖ = t
    """
    p = g.p
    f = g.duality_map(x)
    coeffs = np.sign(f) * np.abs(f) ** (1.0 / (p - 1.0))
    gamma = (p - 2.0) / (p - 1.0)

    def y_of(t: float) -> np.ndarray:
        return np.clip(coeffs * t ** gamma, box.lower, box.upper)

    def r(t: float) -> float:
        return g.norm(y_of(t)) - t

    hi = g.norm(np.maximum(np.abs(box.lower), np.abs(box.upper)))
    if hi == 0.0:
        return ProjectionResult(np.zeros(g.d), (), 0.0, 0)
    lo = hi
    for halvings in range(1, MAX_DOUBLINGS + 1):
        lo *= 0.5
        if r(lo) > 0.0:
            break
    else:
        return ProjectionResult(y_of(lo), (), 0.0, MAX_DOUBLINGS)

    if r(hi) == 0.0:
        return ProjectionResult(y_of(hi), (), 0.0, halvings)
    try:
        t, info = brentq(r, lo, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=500, full_output=True)
    except RuntimeError as e:
        raise ConvergenceError(f"盒子广义投影求根失败: {e}", best_point=y_of(hi)) from e
    return ProjectionResult(y_of(t), (), abs(r(t)), halvings + info.function_calls)


def generalized_project_precise(pg: PreciseGeometry, s: ConvexSet, x: list) -> list:
    """扩展精度下的 Π_C x；支持 Hilbert 情形下的 Box/Ball/半空间与 p-范数下的 Box"""
    if pg.is_hilbert:
        return s.metric_project_precise(x, pg)
    if isinstance(s, Box):
        return box_generalized_project(pg, pg.vec(s.lower), pg.vec(s.upper), x)
    raise UnsupportedMappingError(f"{s.describe()} 在 {pg.geometry.describe()} 下没有扩展精度广义投影")


def supports_generalized_precise(g: SpaceGeometry, s: ConvexSet) -> bool:
    if g.is_hilbert:
        return s.supports_extended_precision
    return isinstance(s, Box)


def generalized_project(
    g: SpaceGeometry,
    s: ConvexSet,
    x: ArrayLike,
    tol: float = FEASIBILITY_TOL,
    max_iter: int = INNER_MAX_ITER
) -> ProjectionResult:
    """
    广义投影 Π_C x = argmin_{y∈C} φ(y, x)

    分派：Hilbert → metric_project；p-范数下半空间 → 标量对偶求解；盒子 → 一维方程；
    两个半空间的交 → 有效集枚举；其余 → 投影梯度法

    Args:
        g: 几何
        s: 目标凸集
        x: 被投影点
        tol: 梯度映射范数阈值
        max_iter: 内层迭代上限

    Returns:
        投影结果
    """
    v = g.check(x)
    if g.is_hilbert:
        return s.metric_project(v)
    if s.max_violation(v) == 0.0:
        return ProjectionResult(v, (), 0.0, 0)
    if isinstance(s, DualHalfSpace):
        return project_halfspace_dual(g, s, v)
    if isinstance(s, Box):
        return _box_generalized_project(g, s, v)
    if isinstance(s, Intersection) and s.halfspaces_only and len(s.sets) <= 2:
        if len(s.sets) == 1:
            return project_halfspace_dual(g, s.sets[0], v)
        return project_two_halfspaces_dual(g, s.sets[0], s.sets[1], v)
    return _projected_gradient(g, s, v, tol, max_iter)


# =============================================================================
# SLSQP 精修与独立参照解
# =============================================================================

def _slsqp_polish(g: SpaceGeometry, s: ConvexSet, jx: np.ndarray, start: np.ndarray) -> np.ndarray:
    """从候选点出发用 SLSQP 精修；结果不可行时保留原候选"""
    bounds, cons = s.slsqp_constraints()

    def fun(y):
        n = g.norm(y)
        return n * n - 2.0 * float(np.dot(y, jx))

    def jac(y):
        return 2.0 * (g.duality_map(y) - jx)

    result = minimize(fun, start, jac=jac, method="SLSQP", bounds=bounds, constraints=cons,
                      options={"ftol": 1e-15, "maxiter": 1000})
    candidate = np.asarray(result.x, dtype=float)
    if np.all(np.isfinite(candidate)) and s.max_violation(candidate) <= 1e-8:
        return candidate
    return start


def brute_force_project(
    g: SpaceGeometry,
    s: ConvexSet,
    x: ArrayLike,
    starts: int = 20,
    iterations: int = 50000,
    seed: int = 0,
    polish: bool = True
) -> np.ndarray:
    """
    多起点投影梯度求 φ(·, x) 在 s 上的最小点，作为 generalized_project 的独立参照

    每个起点在集合内随机选取，步长 t_k = t₀/(1+k)^0.6 递减，记录各起点目前最好的点；
    polish=True 时再用 SLSQP 精修每个候选。只适用于 d ≤ 4。

    Returns:
        目标值最小的点
    """
    v = g.check(x)
    if g.d > 4:
        raise ConfigurationError(f"brute_force_project 只用于 d ≤ 4，实际 d = {g.d}")
    if s.max_violation(v) == 0.0:
        return v

    rng = np.random.default_rng(seed)
    jx = g.duality_map(v)
    Y = s.sample(rng, starts)
    best = Y.copy()
    best_val = g.lyapunov_rows(Y, jx)
    t0 = 0.5 / max(1.0, g.p - 1.0)
    for k in range(iterations):
        G = 2.0 * (g.duality_map_rows(Y) - jx)
        Y = s.project_rows(Y - (t0 / (1.0 + k) ** 0.6) * G)
        vals = g.lyapunov_rows(Y, jx)
        improved = vals < best_val
        best[improved] = Y[improved]
        best_val[improved] = vals[improved]

    if polish:
        best = np.vstack([_slsqp_polish(g, s, jx, row) for row in best])
        best_val = g.lyapunov_rows(best, jx)
    return best[int(np.argmin(best_val))].copy()
