"""
有限维赋范空间内核 - 范数、对偶配对、正规化对偶映射 J 及其逆、Lyapunov 泛函 φ

空间取 R^d 上的 p-范数 (1 < p < ∞)，它一致凸且一致光滑；euclidean 即 p = 2 的 Hilbert 情形。
所有函数都是输入的纯函数，可在多线程中并发调用。
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from errors import ConfigurationError, NumericalError

ArrayLike = Union[Sequence[float], np.ndarray]

# 允许的 p 范围：超出后 |x|^{p-1} 在双精度下病态
P_MIN = 1.05
P_MAX = 20.0

# φ 的负向舍入容差（按 ‖x‖²+‖y‖² 缩放）
PHI_ROUNDOFF = 1e-12


def as_vector(x: ArrayLike, d: Optional[int] = None, name: str = "x") -> np.ndarray:
    """
    转换为有限的一维 float64 向量并检查维度

    Args:
        x: 坐标序列
        d: 期望维度（None 表示不检查）
        name: 报错时使用的名称

    Returns:
        新的 numpy 向量
    """
    v = np.array(x, dtype=float)
    if v.ndim != 1:
        raise ConfigurationError(f"{name} 必须是一维向量，实际形状 {v.shape}")
    if d is not None and v.shape[0] != d:
        raise ConfigurationError(f"{name} 维度不匹配: 期望 {d}，实际 {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise ConfigurationError(f"{name} 含有 NaN 或 Inf")
    return v


def _signed_power(v: np.ndarray, r: float) -> np.ndarray:
    """
    r-范数空间的正规化对偶映射，沿最后一维计算

    ‖v‖^{2-r}|v_i|^{r-1}sign(v_i) 改写成 ‖v‖·|u_i|^{r-1}sign(u_i)，u = v/‖v‖，避免大数幂溢出
    """
    n = np.linalg.norm(v, ord=r, axis=-1, keepdims=True)
    safe = np.where(n > 0.0, n, 1.0)
    u = v / safe
    out = n * np.sign(u) * np.abs(u) ** (r - 1.0)
    return np.where(n > 0.0, out, 0.0)


@dataclass(frozen=True)
class SpaceGeometry:
    """环境赋范空间：euclidean 或 p_norm"""
    kind: str = "euclidean"
    p: float = 2.0
    d: int = 2

    def __post_init__(self):
        if self.kind not in ("euclidean", "p_norm"):
            raise ConfigurationError(f"未知几何类型: {self.kind}")
        if int(self.d) != self.d or self.d < 1:
            raise ConfigurationError(f"维度 d 必须是正整数，实际 {self.d}")
        if self.kind == "euclidean":
            object.__setattr__(self, "p", 2.0)
        elif not (P_MIN < self.p < P_MAX):
            raise ConfigurationError(f"p 必须位于 ({P_MIN}, {P_MAX})，实际 {self.p}")
        object.__setattr__(self, "d", int(self.d))

    @classmethod
    def euclidean(cls, d: int) -> "SpaceGeometry":
        return cls(kind="euclidean", d=d)

    @classmethod
    def p_norm(cls, p: float, d: int) -> "SpaceGeometry":
        return cls(kind="p_norm", p=float(p), d=d)

    @property
    def q(self) -> float:
        """共轭指数 q = p/(p-1)"""
        return self.p / (self.p - 1.0)

    @property
    def is_hilbert(self) -> bool:
        """p = 2 时 J 为恒等映射，所有运算走闭式"""
        return self.kind == "euclidean" or self.p == 2.0

    def describe(self) -> str:
        if self.kind == "euclidean":
            return f"euclidean(d={self.d})"
        return f"p_norm(p={self.p:g}, d={self.d})"

    def same_space(self, other: "SpaceGeometry") -> bool:
        """维度相同且范数一致（两个 Hilbert 几何视为同一空间）"""
        if self.d != other.d:
            return False
        if self.is_hilbert and other.is_hilbert:
            return True
        return self.p == other.p

    def check(self, x: ArrayLike, name: str = "x") -> np.ndarray:
        return as_vector(x, self.d, name)

    # ------------------------------------------------------------------
    # 核心运算
    # ------------------------------------------------------------------

    def norm(self, x: ArrayLike) -> float:
        v = self.check(x)
        if self.is_hilbert:
            return float(np.linalg.norm(v))
        return float(np.linalg.norm(v, ord=self.p))

    def dual_norm(self, f: ArrayLike) -> float:
        v = self.check(f, "f")
        if self.is_hilbert:
            return float(np.linalg.norm(v))
        return float(np.linalg.norm(v, ord=self.q))

    def duality_map(self, x: ArrayLike) -> np.ndarray:
        """
        正规化对偶映射 J

        满足 ⟨x, Jx⟩ = ‖x‖² = ‖Jx‖_q²，J(0) = 0
        """
        v = self.check(x)
        if self.is_hilbert:
            return v
        return _signed_power(v, self.p)

    def inverse_duality_map(self, f: ArrayLike) -> np.ndarray:
        """J⁻¹，即对偶空间 (q-范数) 的对偶映射"""
        v = self.check(f, "f")
        if self.is_hilbert:
            return v
        return _signed_power(v, self.q)

    def inverse_duality_jacobian(self, f: ArrayLike) -> np.ndarray:
        """
        J⁻¹ 在 f 处的 Jacobian

        (q-1)diag((|f_i|/‖f‖)^{q-2}) + (2-q)ggᵀ，g_i = sign(f_i)(|f_i|/‖f‖)^{q-1}；
        分量为 0 处的对角项取 0（q < 2 时该处不可微）
        """
        v = self.check(f, "f")
        if self.is_hilbert:
            return np.eye(self.d)
        q = self.q
        n = float(np.linalg.norm(v, ord=q))
        if n == 0.0:
            raise NumericalError("J⁻¹ 在原点不可微")
        u = np.abs(v) / n
        g = np.sign(v) * u ** (q - 1.0)
        diag = np.zeros_like(u)
        nonzero = u > 0.0
        diag[nonzero] = (q - 1.0) * u[nonzero] ** (q - 2.0)
        return np.diag(diag) + (2.0 - q) * np.outer(g, g)

    def duality_map_rows(self, X: np.ndarray) -> np.ndarray:
        """对矩阵的每一行求 J，供批量计算使用（不做逐行校验）"""
        X = np.asarray(X, dtype=float)
        if self.is_hilbert:
            return X.copy()
        return _signed_power(X, self.p)

    def norm_rows(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.linalg.norm(X, ord=self.p, axis=-1)

    def lyapunov(self, x: ArrayLike, y: ArrayLike) -> float:
        """
        Lyapunov 泛函 φ(x, y) = ‖x‖² - 2⟨x, Jy⟩ + ‖y‖²

        Hilbert 情形直接返回 ‖x - y‖²；微小负舍入截断为 0，明显为负时报数值错误
        """
        u = self.check(x)
        w = self.check(y, "y")
        if self.is_hilbert:
            diff = u - w
            return float(np.dot(diff, diff))
        nx = self.norm(u)
        ny = self.norm(w)
        value = nx * nx - 2.0 * pairing(u, self.duality_map(w)) + ny * ny
        if value < 0.0:
            if value >= -PHI_ROUNDOFF * max(1.0, nx * nx + ny * ny):
                return 0.0
            raise NumericalError(f"φ(x,y) = {value:.3e} < 0，违反 (‖y‖-‖x‖)² ≤ φ 下界")
        return float(value)

    def lyapunov_rows(self, X: np.ndarray, jy: np.ndarray) -> np.ndarray:
        """对每一行 x 计算 φ(x, y)，jy 为预先算好的 Jy（不含常数项 ‖y‖²）"""
        n = self.norm_rows(X)
        return n * n - 2.0 * (X @ jy)


def pairing(x: ArrayLike, f: ArrayLike) -> float:
    """对偶配对 ⟨x, f⟩ = Σ x_i f_i"""
    u = np.asarray(x, dtype=float)
    w = np.asarray(f, dtype=float)
    if u.shape != w.shape:
        raise ConfigurationError(f"配对维度不匹配: {u.shape} 与 {w.shape}")
    return float(np.dot(u, w))


# 函数式入口

def norm(g: SpaceGeometry, x: ArrayLike) -> float:
    return g.norm(x)


def dual_norm(g: SpaceGeometry, f: ArrayLike) -> float:
    return g.dual_norm(f)


def duality_map(g: SpaceGeometry, x: ArrayLike) -> np.ndarray:
    return g.duality_map(x)


def inverse_duality_map(g: SpaceGeometry, f: ArrayLike) -> np.ndarray:
    return g.inverse_duality_map(f)


def lyapunov(g: SpaceGeometry, x: ArrayLike, y: ArrayLike) -> float:
    return g.lyapunov(x, y)
