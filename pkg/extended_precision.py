"""
扩展精度内核 - 在独立的 mpmath 上下文中执行 CQ 族的单步运算

C_n 的法向量是两个相近向量之差，x_n 上的扰动经过一步会被放大约
‖x₀ - x_{n+1}‖/‖x_n - y_n‖ 倍，倍数沿轨迹相乘。本模块提供任意位数下的
对偶映射、半空间与 C_n ∩ Q_n 上的投影；solvers 累计放大的位数，
位数用完时抛出 PrecisionExhaustedError，加倍位数后从头重算。

每个 PreciseGeometry 持有自己的 MPContext，不修改 mpmath 的全局精度，
不同运行可以在线程池中并发。
"""
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from mpmath import MPContext

from errors import ConvergenceError, InfeasibleError, NumericalError
from geometry import SpaceGeometry

# 首次运行的位数
START_BITS = 256

# 放大量之外保留的位数
GUARD_BITS = 128

# 可行性判断与求根的容差为 2^-(bits - TOL_MARGIN_BITS)
TOL_MARGIN_BITS = 32

ROOT_MAX_ITER = 400
NEWTON_MAX_ITER = 100
MAX_DOUBLINGS = 200

# 旋转角按 kπ/m 还原时尝试的分母上限
PI_DENOMINATORS = 12


class PrecisionExhaustedError(NumericalError):
    """累计放大量超出当前位数；step 为出现时的步号"""

    def __init__(self, step: int, used_bits: float, bits: int):
        self.step = step
        self.used_bits = used_bits
        self.bits = bits
        super().__init__(f"第 {step} 步累计放大 {used_bits:.0f} 位，超出 {bits} 位精度的余量")


class PreciseGeometry:
    """
    SpaceGeometry 的任意精度版本，向量用 mpf 列表表示

    运算与 geometry.py 一一对应；Hilbert 情形 J 为恒等映射，
    所以 p = 2 与 euclidean 给出逐位相同的结果
    """

    def __init__(self, g: SpaceGeometry, bits: int):
        self.geometry = g
        self.bits = int(bits)
        self.ctx = MPContext()
        self.ctx.prec = self.bits
        self.is_hilbert = g.is_hilbert
        self.d = g.d
        self.p = self.ctx.mpf(g.p)
        self.q = self.p / (self.p - 1)
        self.tol = self.ctx.ldexp(self.ctx.mpf(1), -(self.bits - TOL_MARGIN_BITS))

    # 转换 ---------------------------------------------------------------

    def scalar(self, t: float):
        return self.ctx.mpf(float(t))

    def vec(self, x: Sequence[float]) -> list:
        return [self.ctx.mpf(float(c)) for c in x]

    def zeros(self) -> list:
        return [self.ctx.mpf(0)] * self.d

    @staticmethod
    def to_array(v: Sequence) -> np.ndarray:
        return np.array([float(c) for c in v], dtype=float)

    # 线性运算 -----------------------------------------------------------

    @staticmethod
    def add(u: list, v: list) -> list:
        return [a + b for a, b in zip(u, v)]

    @staticmethod
    def sub(u: list, v: list) -> list:
        return [a - b for a, b in zip(u, v)]

    @staticmethod
    def scale(t, v: list) -> list:
        return [t * a for a in v]

    def dot(self, u: list, v: list):
        return self.ctx.fdot(u, v)

    def euclidean_norm(self, v: list):
        return self.ctx.sqrt(self.ctx.fdot(v, v))

    # 范数与对偶映射 -----------------------------------------------------

    def _pnorm(self, v: list, r):
        total = self.ctx.fsum(self.ctx.power(abs(c), r) for c in v)
        return self.ctx.power(total, 1 / r)

    def _signed_power(self, v: list, r) -> list:
        n = self._pnorm(v, r)
        if n == 0:
            return self.zeros()
        return [n * self.ctx.sign(c) * self.ctx.power(abs(c) / n, r - 1) for c in v]

    def norm(self, v: list):
        if self.is_hilbert:
            return self.euclidean_norm(v)
        return self._pnorm(v, self.p)

    def norm_sq(self, v: list):
        if self.is_hilbert:
            return self.ctx.fdot(v, v)
        n = self._pnorm(v, self.p)
        return n * n

    def dual_norm(self, f: list):
        if self.is_hilbert:
            return self.euclidean_norm(f)
        return self._pnorm(f, self.q)

    def duality_map(self, v: list) -> list:
        if self.is_hilbert:
            return list(v)
        return self._signed_power(v, self.p)

    def inverse_duality_map(self, f: list) -> list:
        if self.is_hilbert:
            return list(f)
        return self._signed_power(f, self.q)

    def inverse_duality_jacobian(self, f: list) -> List[list]:
        """
        J⁻¹ 在 f 处的 Jacobian：(q-1)‖f‖^{2-q}diag(|f_i|^{q-2}) + (2-q)ggᵀ，
        g_i = sign(f_i)(|f_i|/‖f‖)^{q-1}；分量为 0 处的对角项略去
        """
        ctx, d = self.ctx, self.d
        if self.is_hilbert:
            return [[ctx.mpf(1) if i == j else ctx.mpf(0) for j in range(d)] for i in range(d)]
        q = self.q
        n = self._pnorm(f, q)
        if n == 0:
            raise NumericalError("J⁻¹ 在原点不可微")
        g = [ctx.sign(c) * ctx.power(abs(c) / n, q - 1) for c in f]
        jac = [[(2 - q) * g[i] * g[j] for j in range(d)] for i in range(d)]
        for i, c in enumerate(f):
            if c != 0:
                jac[i][i] += (q - 1) * ctx.power(abs(c) / n, q - 2)
        return jac

    def combine(self, t: float, u: list, v: list) -> list:
        """J⁻¹(tJu + (1-t)Jv)，Hilbert 情形即凸组合"""
        s = self.scalar(t)
        if self.is_hilbert:
            return [s * a + (1 - s) * b for a, b in zip(u, v)]
        ju, jv = self.duality_map(u), self.duality_map(v)
        return self.inverse_duality_map([s * a + (1 - s) * b for a, b in zip(ju, jv)])


@dataclass(frozen=True)
class PreciseHalfSpace:
    """{v : ⟨v, a⟩ ≤ b}，a、b 为 mpf"""
    a: list
    b: object

    def violation(self, pg: PreciseGeometry, v: list):
        return pg.dot(v, self.a) - self.b

    def normal_norm(self, pg: PreciseGeometry):
        return pg.euclidean_norm(self.a)

    def is_degenerate(self, pg: PreciseGeometry) -> bool:
        return self.normal_norm(pg) <= pg.tol

    def holds(self, pg: PreciseGeometry, v: list) -> bool:
        """到边界的距离不超过 pg.tol·max(1, ‖v‖)"""
        norm_a = self.normal_norm(pg)
        if norm_a <= pg.tol:
            return self.b >= -pg.tol
        return self.violation(pg, v) / norm_a <= pg.tol * max(1, pg.euclidean_norm(v))


# =============================================================================
# 标量求根
# =============================================================================

def safeguarded_root(
    f: Callable,
    fprime: Callable,
    lo,
    hi,
    ftol,
    xtol,
    max_iter: int = ROOT_MAX_ITER
):
    """
    有界 Newton：区间 [lo, hi] 两端 f 异号，Newton 步落到区间外或导数为 0 时改二分

    对 mpf 与 float 都适用。|f| ≤ ftol 或区间宽度 ≤ xtol 时停止

    Raises:
        ConvergenceError: 迭代次数用完
    """
    f_lo = f(lo)
    if f_lo == 0:
        return lo
    f_hi = f(hi)
    if f_hi == 0:
        return hi
    if (f_lo > 0) == (f_hi > 0):
        raise NumericalError("求根区间两端函数值同号")
    increasing = f_hi > 0

    x = (lo + hi) / 2
    for _ in range(max_iter):
        fx = f(x)
        if abs(fx) <= ftol:
            return x
        if (fx > 0) == increasing:
            hi = x
        else:
            lo = x
        if hi - lo <= xtol:
            return (lo + hi) / 2
        slope = fprime(x)
        candidate = x - fx / slope if slope != 0 else None
        if candidate is None or not (lo < candidate < hi):
            candidate = (lo + hi) / 2
        x = candidate
    raise ConvergenceError(f"有界 Newton 在 {max_iter} 步内未收敛", residual=float(abs(f(x))))


# =============================================================================
# 半空间上的投影
# =============================================================================

def project_halfspace(pg: PreciseGeometry, h: PreciseHalfSpace, x: list, jx: list) -> Tuple[list, object]:
    """
    Π_h x = J⁻¹(Jx - λa)，λ 为 m(λ) = ⟨J⁻¹(Jx - λa), a⟩ - b 的根；m 严格递减

    调用方保证 x 违反 h
    """
    viol = h.violation(pg, x)
    aa = pg.dot(h.a, h.a)
    if pg.is_hilbert:
        lam = viol / aa
        return pg.sub(x, pg.scale(lam, h.a)), lam

    def point(lam) -> list:
        return pg.inverse_duality_map(pg.sub(jx, pg.scale(lam, h.a)))

    def m(lam):
        return pg.dot(point(lam), h.a) - h.b

    def m_prime(lam):
        jac = pg.inverse_duality_jacobian(pg.sub(jx, pg.scale(lam, h.a)))
        return -pg.dot(h.a, [pg.dot(row, h.a) for row in jac])

    hi = max(viol / aa, pg.tol)
    doublings = 0
    while m(hi) > 0:
        hi *= 2
        doublings += 1
        if doublings > MAX_DOUBLINGS:
            raise NumericalError("乘子区间倍增后仍未变号，法向量可能退化")
    # m(λ) 是带 ‖a‖ 倍数的有符号距离
    norm_a = pg.euclidean_norm(h.a)
    reach = pg.tol * max(1, pg.euclidean_norm(x))
    lam = safeguarded_root(m, m_prime, pg.ctx.mpf(0), hi, reach * norm_a, reach / norm_a)
    return point(lam), lam


def _both_active_hilbert(pg: PreciseGeometry, h1: PreciseHalfSpace, h2: PreciseHalfSpace, x: list):
    g11, g12, g22 = pg.dot(h1.a, h1.a), pg.dot(h1.a, h2.a), pg.dot(h2.a, h2.a)
    det = g11 * g22 - g12 * g12
    if det <= pg.tol * g11 * g22:
        raise InfeasibleError("两个半空间法向量平行且边界不重合，双约束有效情形无解")
    r1, r2 = h1.violation(pg, x), h2.violation(pg, x)
    lam = (g22 * r1 - g12 * r2) / det
    mu = (g11 * r2 - g12 * r1) / det
    return lam, mu


def _both_active_newton(
    pg: PreciseGeometry,
    h1: PreciseHalfSpace,
    h2: PreciseHalfSpace,
    jx: list,
    start: Tuple[float, float]
):
    """Newton 解 ⟨J⁻¹(Jx - λa₁ - μa₂), a_i⟩ = b_i，Jacobian 为 -A·DJ⁻¹·Aᵀ，残差不降时步长减半"""
    ctx = pg.ctx
    a1, a2 = h1.a, h2.a

    def residual(lam, mu):
        w = [j - lam * u - mu * v for j, u, v in zip(jx, a1, a2)]
        y = pg.inverse_duality_map(w)
        return w, (pg.dot(y, a1) - h1.b, pg.dot(y, a2) - h2.b)

    lam, mu = max(pg.scalar(start[0]), ctx.mpf(0)), max(pg.scalar(start[1]), ctx.mpf(0))
    w, (r1, r2) = residual(lam, mu)
    rnorm = max(abs(r1), abs(r2))
    scale = max(1, abs(h1.b), abs(h2.b))
    for _ in range(NEWTON_MAX_ITER):
        if rnorm <= pg.tol * scale:
            return lam, mu
        jac = pg.inverse_duality_jacobian(w)
        ja1 = [pg.dot(row, a1) for row in jac]
        ja2 = [pg.dot(row, a2) for row in jac]
        # ∂r/∂(λ, μ) = -[[a₁ᵀDa₁, a₁ᵀDa₂], [a₂ᵀDa₁, a₂ᵀDa₂]]
        j11, j12 = -pg.dot(a1, ja1), -pg.dot(a1, ja2)
        j21, j22 = -pg.dot(a2, ja1), -pg.dot(a2, ja2)
        det = j11 * j22 - j12 * j21
        if det == 0:
            break
        d_lam = (-r1 * j22 + r2 * j12) / det
        d_mu = (-r2 * j11 + r1 * j21) / det

        damping = ctx.mpf(1)
        while True:
            t_lam, t_mu = max(lam + damping * d_lam, ctx.mpf(0)), max(mu + damping * d_mu, ctx.mpf(0))
            t_w, (t_r1, t_r2) = residual(t_lam, t_mu)
            t_norm = max(abs(t_r1), abs(t_r2))
            if t_norm < rnorm:
                break
            damping /= 2
            if damping < pg.tol:
                raise ConvergenceError("双约束 Newton 停滞", residual=float(rnorm))
        lam, mu, w, r1, r2, rnorm = t_lam, t_mu, t_w, t_r1, t_r2, t_norm
    raise ConvergenceError(f"双约束 Newton 在 {NEWTON_MAX_ITER} 步内未收敛", residual=float(rnorm))


def project_two_halfspaces(
    pg: PreciseGeometry,
    h1: PreciseHalfSpace,
    h2: PreciseHalfSpace,
    x: list,
    start: Optional[Callable[[], Tuple[float, float]]] = None
) -> Tuple[list, Tuple[object, object]]:
    """
    Π_{h1∩h2} x：依次尝试 x 本身、只有 h1 有效、只有 h2 有效、两者都有效

    start 在需要双约束 Newton 时给出 (λ, μ) 的初值（通常来自双精度求解）

    Returns:
        (投影点, (λ, μ))
    """
    ctx = pg.ctx
    hs = (h1, h2)
    live = []
    for i, h in enumerate(hs):
        if h.is_degenerate(pg):
            if h.b < -pg.tol:
                raise InfeasibleError(f"第 {i + 1} 个半空间法向量退化且 b < 0，集合为空")
            continue
        live.append(i)

    zero = ctx.mpf(0)
    if all(hs[i].holds(pg, x) for i in live):
        return x, (zero, zero)

    jx = pg.duality_map(x)
    for i in live:
        if hs[i].violation(pg, x) <= 0:
            continue
        y, lam = project_halfspace(pg, hs[i], x, jx)
        if all(hs[j].holds(pg, y) for j in live if j != i):
            multipliers = [zero, zero]
            multipliers[i] = lam
            return y, tuple(multipliers)

    if len(live) < 2:
        raise InfeasibleError("单约束投影不可行")

    if pg.is_hilbert:
        lam, mu = _both_active_hilbert(pg, h1, h2, x)
    else:
        lam, mu = _both_active_newton(pg, h1, h2, jx, start() if start is not None else (0.0, 0.0))
    if min(lam, mu) < -pg.tol:
        raise InfeasibleError(f"双约束有效情形乘子为负 (λ={float(lam):.3e}, μ={float(mu):.3e})")
    lam, mu = max(lam, zero), max(mu, zero)
    w = [j - lam * u - mu * v for j, u, v in zip(jx, h1.a, h2.a)]
    y = pg.inverse_duality_map(w)
    if not (h1.holds(pg, y) and h2.holds(pg, y)):
        raise InfeasibleError("四种有效集情形均不可行，C_n∩Q_n 可能为空")
    return y, (lam, mu)


# =============================================================================
# 盒子上的广义投影
# =============================================================================

def box_generalized_project(pg: PreciseGeometry, lower: list, upper: list, x: list) -> list:
    """
    p-范数下盒子上的广义投影，化为关于 t = ‖y‖ 的一维方程

    给定 t，KKT 条件逐坐标给出 y_i(t) = clamp(c_i·t^γ, l_i, u_i)，
    c_i = sign(f_i)|f_i|^{1/(p-1)}，f = Jx，γ = (p-2)/(p-1)；再解 ‖y(t)‖ = t
    """
    ctx = pg.ctx
    if all(lo <= c <= hi for c, lo, hi in zip(x, lower, upper)):
        return list(x)
    if pg.is_hilbert:
        return [min(max(c, lo), hi) for c, lo, hi in zip(x, lower, upper)]

    p = pg.p
    f = pg.duality_map(x)
    coeffs = [ctx.sign(c) * ctx.power(abs(c), 1 / (p - 1)) for c in f]
    gamma = (p - 2) / (p - 1)

    def y_of(t) -> Tuple[list, list]:
        tg = ctx.power(t, gamma)
        y, free = [], []
        for c, lo, hi in zip(coeffs, lower, upper):
            u = c * tg
            y.append(min(max(u, lo), hi))
            free.append(lo < u < hi)
        return y, free

    def r(t):
        return pg.norm(y_of(t)[0]) - t

    def r_prime(t):
        y, free = y_of(t)
        n = pg.norm(y)
        if n == 0:
            return ctx.mpf(-1)
        slope = ctx.mpf(0)
        dtg = gamma * ctx.power(t, gamma - 1)
        for yi, c, is_free in zip(y, coeffs, free):
            if is_free:
                slope += ctx.sign(yi) * ctx.power(abs(yi) / n, p - 1) * c * dtg
        return slope - 1

    hi = pg.norm([max(abs(lo), abs(up)) for lo, up in zip(lower, upper)])
    if hi == 0:
        return pg.zeros()
    lo = hi
    for _ in range(MAX_DOUBLINGS):
        lo /= 2
        if r(lo) > 0:
            break
    else:
        return y_of(lo)[0]
    t = safeguarded_root(r, r_prime, lo, hi, pg.tol * hi, pg.tol * hi)
    return y_of(t)[0]


# =============================================================================
# 旋转角还原
# =============================================================================

def pi_fraction(angle: float) -> Optional[Tuple[int, int]]:
    """
    angle 等于 kπ/m（m ≤ 12）的双精度舍入值时返回 (k, m)，否则 None；
    扩展精度下这类角度按 kπ/m 精确计算
    """
    for m in range(1, PI_DENOMINATORS + 1):
        k = round(angle * m / math.pi)
        if k != 0 and math.pi * k / m == angle:
            return k, m
    return None
