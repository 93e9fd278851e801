"""
错误类型模块 - 求解器各模块共用的异常层次

配置类错误同时继承 ValueError，命令行据此区分退出码：
- 配置/假设校验失败 -> 退出码 1
- 运行期错误（越界、不可行、内层求解不收敛、数值错误、输出写入失败）-> 退出码 2
"""
from typing import List, Optional

import numpy as np


class CQError(Exception):
    """所有求解器错误的基类"""


class ConfigurationError(CQError, ValueError):
    """参数或维度不合法"""


class HypothesisError(ConfigurationError):
    """定理前提条件不满足，condition 为被违反的条件原文"""

    def __init__(self, condition: str, detail: str = ""):
        self.condition = condition
        self.detail = detail
        message = f"违反定理前提 {condition}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class ConfigValidationError(ConfigurationError):
    """配置文件校验失败，errors 中是逐条的字段级错误"""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("配置校验失败:\n" + "\n".join(f"  - {e}" for e in self.errors))


class UnsupportedMappingError(ConfigurationError):
    """映射类型未经认证，或与所选几何/格式不兼容"""


class DomainError(CQError):
    """点离开了映射的定义域 C"""


class InfeasibleError(CQError):
    """交集为空，或有效集枚举的所有候选都不可行"""


class NumericalError(CQError):
    """数值异常：φ 明显为负、乘子区间扩张失败等"""


class ConvergenceError(CQError):
    """内层求解器达到迭代上限，携带目前最好的点和残差"""

    def __init__(self, message: str, best_point: Optional[np.ndarray] = None, residual: float = float("nan")):
        self.best_point = best_point
        self.residual = residual
        super().__init__(f"{message} (残差 {residual:.3e})")


class OutputError(CQError):
    """轨迹或摘要文件写入失败，path 为目标路径"""

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"写入 {path} 失败: {reason}")
