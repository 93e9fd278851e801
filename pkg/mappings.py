"""
测试算子模块 - 具有已知不动点集和已认证性质的映射

每种映射携带：
- geometry: 所在空间
- domain: 定义域 C（默认以原点为心、半径 10 的球；Goebel-Kirk 为单位球）
- k_schedule: 渐近非扩张常数 k_n（k_n ≥ 1 且单调下降到 1）

映射对象构造后不可变，apply 为纯函数，可并发调用。
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from convex_sets import (
    Ball, Box, ConvexSet, generalized_project, generalized_project_precise, supports_generalized_precise
)
from errors import ConfigurationError, DomainError, UnsupportedMappingError
from extended_precision import PreciseGeometry, pi_fraction
from geometry import ArrayLike, SpaceGeometry

DEFAULT_DOMAIN_RADIUS = 10.0

# 判断迭代点是否仍在定义域内的容差
DOMAIN_TOL = 1e-7

K_KINDS = ("unit", "inverse_square", "geometric", "goebel_kirk")


@dataclass(frozen=True)
class KSchedule:
    """
    k_n 序列

    - unit: k_n = 1
    - inverse_square: k_n = 1 + 1/(n+1)²
    - geometric: k_n = 1 + ratio^n
    - goebel_kirk: k_n = max(1, 2·∏_{i=2}^{min(n, d-1)} a_i)
    """
    kind: str = "unit"
    ratio: float = 0.5
    coefficients: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in K_KINDS:
            raise ConfigurationError(f"未知 k_schedule 类型: {self.kind}，可选 {K_KINDS}")
        if self.kind == "geometric" and not (0.0 < self.ratio < 1.0):
            raise ConfigurationError(f"geometric k_schedule 要求 0 < ratio < 1，实际 {self.ratio}")
        if self.kind == "goebel_kirk" and not self.coefficients:
            raise ConfigurationError("goebel_kirk k_schedule 需要系数 a_i")
        object.__setattr__(self, "coefficients", tuple(float(a) for a in self.coefficients))

    @classmethod
    def unit(cls) -> "KSchedule":
        return cls("unit")

    def value(self, n: int) -> float:
        """k_n；n < 1 时按 n = 1 取值"""
        n = max(int(n), 1)
        if self.kind == "unit":
            return 1.0
        if self.kind == "inverse_square":
            return 1.0 + 1.0 / (n + 1) ** 2
        if self.kind == "geometric":
            return 1.0 + self.ratio ** n
        d = len(self.coefficients) + 2
        if n >= d - 1:
            # 全部系数之积为 1/2
            return 1.0
        return max(1.0, 2.0 * math.prod(self.coefficients[:n - 1]))

    def describe(self) -> str:
        if self.kind == "geometric":
            return f"geometric(r={self.ratio:g})"
        return self.kind


@dataclass(frozen=True)
class FixedSetRef:
    """已知的不动点集 F(T) 及其在环境几何下的广义投影"""
    set: ConvexSet
    geometry: SpaceGeometry

    def project(self, x0: ArrayLike) -> np.ndarray:
        """Π_{F(T)}x₀，Hilbert 情形即 P_{F(T)}x₀"""
        return generalized_project(self.geometry, self.set, x0).point

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.set.sample(rng, count)


class MappingSpec:
    """映射基类；子类实现 _map（以及可选的向量化 _map_rows 与扩展精度的 _map_precise）"""

    kind = "abstract"

    # T∘T = T（投影类映射），T^n 只需计算一次
    idempotent = False

    def __init__(
        self,
        geometry: SpaceGeometry,
        domain: Optional[ConvexSet] = None,
        k_schedule: Optional[KSchedule] = None
    ):
        self.geometry = geometry
        self.domain = domain if domain is not None else Ball(np.zeros(geometry.d), DEFAULT_DOMAIN_RADIUS)
        self.k_schedule = k_schedule if k_schedule is not None else KSchedule.unit()
        if self.domain.dim != geometry.d:
            raise ConfigurationError(f"定义域维度 {self.domain.dim} 与空间维度 {geometry.d} 不一致")

    # 子类接口 -----------------------------------------------------------

    def _map(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _map_rows(self, X: np.ndarray) -> np.ndarray:
        return np.vstack([self._map(row) for row in X])

    def _map_precise(self, x: list, pg: PreciseGeometry) -> list:
        raise UnsupportedMappingError(f"映射 {self.kind} 没有扩展精度实现")

    def supports_extended_precision(self) -> bool:
        return False

    def fixed_set(self) -> FixedSetRef:
        raise UnsupportedMappingError(f"映射 {self.kind} 没有已认证的不动点集")

    def is_relative_in(self, g: SpaceGeometry) -> bool:
        """在几何 g 下是否为已认证的相对渐近非扩张映射"""
        return g.is_hilbert and g.same_space(self.geometry)

    def describe(self) -> str:
        return self.kind

    # 公共运算 -----------------------------------------------------------

    def k(self, n: int) -> float:
        return self.k_schedule.value(n)

    def _enter(self, x: ArrayLike) -> np.ndarray:
        v = self.geometry.check(x)
        gap = self.domain.max_violation(v)
        if gap > DOMAIN_TOL:
            raise DomainError(f"{self.kind}: 点 {v.tolist()} 不在定义域 {self.domain.describe()} 内 (越界 {gap:.3e})")
        return v

    def apply(self, x: ArrayLike) -> np.ndarray:
        return self._map(self._enter(x))

    def apply_power(self, x: ArrayLike, n: int) -> np.ndarray:
        """T^n x，逐次复合计算；幂等映射只算一次"""
        if int(n) != n or n < 1:
            raise ConfigurationError(f"幂次 n 必须是正整数，实际 {n}")
        v = self._enter(x)
        for _ in range(1 if self.idempotent else int(n)):
            v = self._map(v)
        return v

    def _enter_precise(self, x: list, pg: PreciseGeometry) -> list:
        gap = self.domain.max_violation(pg.to_array(x))
        if gap > DOMAIN_TOL:
            raise DomainError(f"{self.kind}: 点 {pg.to_array(x).tolist()} 不在定义域 {self.domain.describe()} 内 (越界 {gap:.3e})")
        return x

    def apply_precise(self, x: list, pg: PreciseGeometry) -> list:
        """扩展精度下的 Tx，x 为 mpf 列表"""
        return self._map_precise(self._enter_precise(x, pg), pg)

    def apply_power_precise(self, x: list, n: int, pg: PreciseGeometry) -> list:
        v = self._enter_precise(x, pg)
        for _ in range(1 if self.idempotent else int(n)):
            v = self._map_precise(v, pg)
        return v

    def apply_power_batch(self, X: np.ndarray, n: int) -> np.ndarray:
        """对矩阵每一行求 T^n（不做定义域检查，供采样验证使用）"""
        Y = np.asarray(X, dtype=float)
        for _ in range(int(n)):
            Y = self._map_rows(Y)
        return Y


class Rotation(MappingSpec):
    """平面旋转（仅 d = 2），欧氏等距"""

    kind = "rotation"

    def __init__(self, angle: float, geometry: SpaceGeometry, domain=None, k_schedule=None):
        if geometry.d != 2:
            raise ConfigurationError(f"rotation 只定义在 d = 2，实际 d = {geometry.d}")
        super().__init__(geometry, domain, k_schedule)
        self.angle = float(angle)
        c, s = math.cos(self.angle), math.sin(self.angle)
        self._matrix = np.array([[c, -s], [s, c]])

    def _map(self, x):
        return self._matrix @ x

    def _map_rows(self, X):
        return X @ self._matrix.T

    def _map_precise(self, x, pg):
        ctx = pg.ctx
        fraction = pi_fraction(self.angle)
        if fraction is not None:
            turn = ctx.mpf(fraction[0]) / fraction[1]
            c, s = ctx.cospi(turn), ctx.sinpi(turn)
        else:
            angle = pg.scalar(self.angle)
            c, s = ctx.cos(angle), ctx.sin(angle)
        return [c * x[0] - s * x[1], s * x[0] + c * x[1]]

    def supports_extended_precision(self) -> bool:
        return True

    def fixed_set(self) -> FixedSetRef:
        turns = self.angle / (2.0 * math.pi)
        if abs(turns - round(turns)) < 1e-15:
            return FixedSetRef(self.domain, self.geometry)
        return FixedSetRef(Box.point(np.zeros(2)), self.geometry)

    def describe(self) -> str:
        return f"rotation({self.angle:g})"


class Contraction(MappingSpec):
    """x ↦ center + factor·(x - center)，0 ≤ factor < 1"""

    kind = "contraction"

    def __init__(self, factor: float, center: ArrayLike, geometry: SpaceGeometry, domain=None, k_schedule=None):
        super().__init__(geometry, domain, k_schedule)
        if not (0.0 <= factor < 1.0):
            raise ConfigurationError(f"contraction 要求 0 ≤ factor < 1，实际 {factor}")
        self.factor = float(factor)
        self.center = geometry.check(center, "center")
        if not self.domain.contains(self.center):
            raise ConfigurationError("contraction 的中心必须在定义域内")

    def _map(self, x):
        return self.center + self.factor * (x - self.center)

    def _map_rows(self, X):
        return self.center + self.factor * (X - self.center)

    def _map_precise(self, x, pg):
        center = pg.vec(self.center)
        return pg.add(center, pg.scale(pg.scalar(self.factor), pg.sub(x, center)))

    def supports_extended_precision(self) -> bool:
        return True

    def fixed_set(self) -> FixedSetRef:
        return FixedSetRef(Box.point(self.center), self.geometry)

    def describe(self) -> str:
        return f"contraction({self.factor:g}, {self.center.tolist()})"


class MetricProjectionMap(MappingSpec):
    """T = P_K，不动点集为 K"""

    kind = "metric_projection"
    idempotent = True

    def __init__(self, target: ConvexSet, geometry: SpaceGeometry, domain=None, k_schedule=None):
        super().__init__(geometry, domain, k_schedule)
        if target.dim != geometry.d:
            raise ConfigurationError("投影目标集合维度与空间不一致")
        self.target = target

    def _map(self, x):
        return self.target.metric_project(x).point

    def _map_rows(self, X):
        return self.target.project_rows(X)

    def _map_precise(self, x, pg):
        return self.target.metric_project_precise(x, pg)

    def supports_extended_precision(self) -> bool:
        return self.target.supports_extended_precision

    def fixed_set(self) -> FixedSetRef:
        return FixedSetRef(self.target, self.geometry)

    def describe(self) -> str:
        return f"metric_projection({self.target.describe()})"


class GeneralizedProjectionMap(MappingSpec):
    """T = Π_K（映射自身几何下的广义投影），在该几何下相对非扩张"""

    kind = "generalized_projection"
    idempotent = True

    def __init__(self, target: ConvexSet, geometry: SpaceGeometry, domain=None, k_schedule=None):
        super().__init__(geometry, domain, k_schedule)
        if target.dim != geometry.d:
            raise ConfigurationError("投影目标集合维度与空间不一致")
        self.target = target

    def _map(self, x):
        return generalized_project(self.geometry, self.target, x).point

    def _map_precise(self, x, pg):
        return generalized_project_precise(pg, self.target, x)

    def supports_extended_precision(self) -> bool:
        return supports_generalized_precise(self.geometry, self.target)

    def fixed_set(self) -> FixedSetRef:
        return FixedSetRef(self.target, self.geometry)

    def is_relative_in(self, g: SpaceGeometry) -> bool:
        return g.same_space(self.geometry)

    def describe(self) -> str:
        return f"generalized_projection({self.target.describe()}, {self.geometry.describe()})"


class Averaged(MappingSpec):
    """weight·x + (1 - weight)·inner(x)，0 ≤ weight < 1 时 F 与 inner 相同"""

    kind = "averaged"

    def __init__(self, inner: MappingSpec, weight: float, geometry: SpaceGeometry, domain=None, k_schedule=None):
        super().__init__(geometry, domain, k_schedule)
        if not (0.0 <= weight < 1.0):
            raise ConfigurationError(f"averaged 要求 0 ≤ weight < 1，实际 {weight}")
        if inner.geometry.d != geometry.d:
            raise ConfigurationError("averaged 内层映射维度与空间不一致")
        self.inner = inner
        self.weight = float(weight)

    def _map(self, x):
        return self.weight * x + (1.0 - self.weight) * self.inner._map(x)

    def _map_rows(self, X):
        return self.weight * X + (1.0 - self.weight) * self.inner._map_rows(X)

    def _map_precise(self, x, pg):
        w = pg.scalar(self.weight)
        inner = self.inner._map_precise(x, pg)
        return [w * a + (1 - w) * b for a, b in zip(x, inner)]

    def supports_extended_precision(self) -> bool:
        return self.inner.supports_extended_precision()

    def fixed_set(self) -> FixedSetRef:
        inner_fixed = self.inner.fixed_set()
        return FixedSetRef(inner_fixed.set, self.geometry)

    def describe(self) -> str:
        return f"averaged({self.inner.describe()}, {self.weight:g})"


def uniform_goebel_kirk_coefficients(d: int) -> Tuple[float, ...]:
    """a_2 = … = a_{d-1} = (1/2)^{1/(d-2)}，乘积恰为 1/2"""
    if d < 3:
        raise ConfigurationError(f"goebel_kirk 要求 d ≥ 3，实际 d = {d}")
    return (0.5 ** (1.0 / (d - 2)),) * (d - 2)


class GoebelKirk(MappingSpec):
    """
    单位球上的 (x₁, …, x_d) ↦ (0, x₁², a₂x₂, …, a_{d-1}x_{d-1})

    渐近非扩张但不是非扩张：k_1 = 2，k_n = 2·∏_{i=2}^{n} a_i 递减到 1，
    n ≥ d - 1 之后 k_n = 1；唯一不动点为 0
    """

    kind = "goebel_kirk"

    def __init__(
        self,
        geometry: SpaceGeometry,
        coefficients: Optional[Sequence[float]] = None,
        domain=None,
        k_schedule=None
    ):
        d = geometry.d
        coeffs = tuple(coefficients) if coefficients is not None else uniform_goebel_kirk_coefficients(d)
        if d < 3 or len(coeffs) != d - 2:
            raise ConfigurationError(f"goebel_kirk 需要 d ≥ 3 且 d - 2 = {d - 2} 个系数，实际 {len(coeffs)}")
        if any(not (0.0 < a < 1.0) for a in coeffs):
            raise ConfigurationError("goebel_kirk 系数必须位于 (0, 1)")
        if abs(math.prod(coeffs) - 0.5) > 1e-12:
            raise ConfigurationError(f"goebel_kirk 系数乘积必须为 1/2，实际 {math.prod(coeffs):.6g}")
        if domain is None:
            domain = Ball(np.zeros(d), 1.0)
        if k_schedule is None:
            k_schedule = KSchedule("goebel_kirk", coefficients=coeffs)
        super().__init__(geometry, domain, k_schedule)
        self.coefficients = np.array(coeffs)

    def _map(self, x):
        out = np.zeros_like(x)
        out[1] = x[0] * x[0]
        out[2:] = self.coefficients * x[1:-1]
        return out

    def _map_rows(self, X):
        out = np.zeros_like(X)
        out[:, 1] = X[:, 0] ** 2
        out[:, 2:] = X[:, 1:-1] * self.coefficients
        return out

    def _map_precise(self, x, pg):
        coeffs = pg.vec(self.coefficients)
        return [pg.ctx.mpf(0), x[0] * x[0]] + [a * c for a, c in zip(coeffs, x[1:-1])]

    def supports_extended_precision(self) -> bool:
        return True

    def fixed_set(self) -> FixedSetRef:
        return FixedSetRef(Box.point(np.zeros(self.geometry.d)), self.geometry)

    def describe(self) -> str:
        return f"goebel_kirk(d={self.geometry.d})"


# =============================================================================
# 函数式入口与采样验证
# =============================================================================

def apply(m: MappingSpec, x: ArrayLike) -> np.ndarray:
    return m.apply(x)


def apply_power(m: MappingSpec, x: ArrayLike, n: int) -> np.ndarray:
    return m.apply_power(x, n)


def fixed_set(m: MappingSpec) -> FixedSetRef:
    return m.fixed_set()


@dataclass
class VerificationReport:
    """采样验证结果；witness 为 (x, p, n) 的最坏三元组"""
    samples: int
    max_violation: float
    witness: Optional[Tuple[np.ndarray, np.ndarray, int]] = None
    tolerance: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance


def verify_relative_asymptotic_nonexpansiveness(
    m: MappingSpec,
    samples: int = 200,
    seed: int = 0,
    max_power: int = 20,
    tol: float = 1e-8
) -> VerificationReport:
    """
    采样检查 φ(p, T^n x) ≤ k_n²·φ(p, x)

    x 取自定义域，p 取自 F(T)，n 在 1..max_power 中均匀抽取；
    报告 φ(p, T^n x) - k_n²·φ(p, x) 的最大值
    """
    g = m.geometry
    fixed = m.fixed_set()
    rng = np.random.default_rng(seed)
    xs = m.domain.sample(rng, samples)
    ps = fixed.sample(rng, samples)
    powers = rng.integers(1, max_power + 1, size=samples)

    worst, witness = -math.inf, None
    for x, p, n in zip(xs, ps, powers):
        k = m.k(int(n))
        excess = g.lyapunov(p, m.apply_power(x, int(n))) - k * k * g.lyapunov(p, x)
        if excess > worst:
            worst, witness = excess, (x, p, int(n))
    return VerificationReport(samples, float(worst), witness, tol)


def estimate_lipschitz_violation(m: MappingSpec, n: int, pairs: int = 10000, seed: int = 0) -> float:
    """
    采样估计 max(‖T^n x - T^n y‖ - k_n‖x - y‖)，x, y 取自定义域

    一半的点对取相互靠近的点，局部 Lipschitz 常数主要由它们体现
    """
    g = m.geometry
    rng = np.random.default_rng(seed)
    X = m.domain.sample(rng, pairs)
    Y = m.domain.sample(rng, pairs)
    half = pairs // 2
    Y[:half] = m.domain.project_rows(X[:half] + 1e-3 * rng.normal(size=(half, g.d)))

    TX = m.apply_power_batch(X, n)
    TY = m.apply_power_batch(Y, n)
    lhs = g.norm_rows(TX - TY)
    rhs = m.k(n) * g.norm_rows(X - Y)
    return float(np.max(lhs - rhs))
