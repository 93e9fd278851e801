"""
配置加载器 - 从YAML文件和环境变量加载实验配置

环境变量优先级高于配置文件，支持以下环境变量：
- CQ_OUTPUT_DIR: 输出目录，轨迹CSV与摘要文件都改写到该目录下（保留文件名）
- CQ_LOG_LEVEL: 日志级别
- CQ_LOG_DIR: 日志目录

配置中的未知字段一律视为错误；所有问题收集后一次性以 ConfigValidationError 报告，
每条错误带字段路径（YAML 语法错误带行列号）。
"""
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from convex_sets import Ball, Box, ConvexSet, DualHalfSpace, Intersection
from errors import ConfigValidationError, ConfigurationError
from geometry import SpaceGeometry
from mappings import (
    Averaged, Contraction, GeneralizedProjectionMap, GoebelKirk, KSchedule, MappingSpec,
    MetricProjectionMap, Rotation, uniform_goebel_kirk_coefficients
)
from solvers import SCHEMES, Rule, Schedule, SolverConfig, hypothesis_violations

TOP_KEYS = (
    "name", "geometry", "mapping", "scheme", "schedule", "x0", "M", "diam_C", "max_iter",
    "stop_tol", "residual_tol", "projection_tol", "extended_precision", "max_precision_bits",
    "seed", "outputs", "logging"
)

MAPPING_KEYS = {
    "rotation": ("angle",),
    "contraction": ("factor", "center"),
    "metric_projection": ("set",),
    "generalized_projection": ("set",),
    "averaged": ("weight", "inner"),
    "goebel_kirk": ("coefficients",),
}

SET_KEYS = {
    "box": ("lower", "upper"),
    "ball": ("center", "radius"),
    "halfspace": ("a", "b"),
    "intersection": ("sets",),
}


@dataclass
class ExperimentConfig:
    """一次实验的完整配置"""
    name: str
    geometry: SpaceGeometry
    mapping: MappingSpec
    solver: SolverConfig
    seed: int = 0
    trace_csv: Optional[str] = None
    summary_path: Optional[str] = None

    # 日志配置
    log_dir: str = "./logs"
    log_level: str = "INFO"
    enable_log_rotation: bool = True

    source_path: Optional[str] = None

    @property
    def scheme(self) -> str:
        return self.solver.scheme

    def get_log_file(self, name: str = "cq_solver") -> str:
        """获取日志文件路径"""
        return os.path.join(self.log_dir, f"{name}.log")


def load_config_from_yaml(yaml_path: str) -> Tuple[dict, Dict[str, int]]:
    """
    从YAML文件加载配置

    Returns:
        (数据, 字段路径 -> 行号)
    """
    with open(yaml_path, 'r', encoding='utf-8') as f:
        text = f.read()
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"第 {mark.line + 1} 行第 {mark.column + 1} 列" if mark is not None else "未知位置"
        raise ConfigValidationError([f"YAML 语法错误 ({where}): {e.problem}"]) from e
    lines: Dict[str, int] = {}
    if node is not None:
        _collect_lines(node, "", lines)
    return (data if data is not None else {}), lines


def _collect_lines(node, prefix: str, out: Dict[str, int]):
    """记录每个字段路径所在的行号（1 起）"""
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            out[path] = key_node.start_mark.line + 1
            _collect_lines(value_node, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _collect_lines(item, f"{prefix}[{i}]", out)


def _resolve_path(path: str, base_dir: str) -> str:
    """将相对路径转换为绝对路径（基于配置文件所在目录）"""
    if os.path.isabs(path):
        return path
    return os.path.abspath(os.path.join(base_dir, path))


class _Reader:
    """带错误收集的字段读取器"""

    def __init__(self, lines: Optional[Dict[str, int]] = None):
        self.errors: List[str] = []
        self.lines = lines or {}

    def fail(self, path: str, message: str):
        line = self.lines.get(path)
        suffix = f" (第 {line} 行)" if line else ""
        self.errors.append(f"{path}: {message}{suffix}")

    def section(self, raw: Any, path: str, allowed) -> Optional[dict]:
        if not isinstance(raw, dict):
            self.fail(path, f"应为映射（键值对），实际 {type(raw).__name__}")
            return None
        for key in raw:
            if key not in allowed:
                self.fail(f"{path}.{key}" if path else str(key), "未知字段")
        return raw

    def required(self, raw: dict, key: str, path: str) -> Any:
        if key not in raw:
            self.fail(f"{path}.{key}" if path else key, "缺少必填字段")
            return None
        return raw[key]

    def get(self, sec: dict, key: str, path: str, parse, *args, **kwargs) -> Any:
        """读取必填字段并用 parse(值, 字段路径, ...) 解析；缺失时记错误并返回 None"""
        full = f"{path}.{key}" if path else key
        if key not in sec:
            self.fail(full, "缺少必填字段")
            return None
        return parse(sec[key], full, *args, **kwargs)

    def number(self, raw: Any, path: str, positive: bool = False) -> Optional[float]:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or not math.isfinite(raw):
            self.fail(path, f"应为有限实数，实际 {raw!r}")
            return None
        if positive and raw <= 0:
            self.fail(path, f"应为正数，实际 {raw}")
            return None
        return float(raw)

    def integer(self, raw: Any, path: str, minimum: int = 0) -> Optional[int]:
        if isinstance(raw, bool) or not isinstance(raw, int) or raw < minimum:
            self.fail(path, f"应为 ≥ {minimum} 的整数，实际 {raw!r}")
            return None
        return raw

    def boolean(self, raw: Any, path: str) -> Optional[bool]:
        if not isinstance(raw, bool):
            self.fail(path, f"应为 true/false，实际 {raw!r}")
            return None
        return raw

    def vector(self, raw: Any, path: str, d: Optional[int] = None) -> Optional[np.ndarray]:
        if not isinstance(raw, list) or not raw:
            self.fail(path, f"应为非空数值列表，实际 {raw!r}")
            return None
        values = [self.number(v, f"{path}[{i}]") for i, v in enumerate(raw)]
        if any(v is None for v in values):
            return None
        if d is not None and len(values) != d:
            self.fail(path, f"维度应为 {d}，实际 {len(values)}")
            return None
        return np.array(values)

    def build(self, path: str, factory, *args, **kwargs):
        """调用构造函数，把 ConfigurationError 记为该路径的错误"""
        try:
            return factory(*args, **kwargs)
        except ConfigurationError as e:
            self.fail(path, str(e))
            return None


def _parse_geometry(r: _Reader, raw: Any) -> Optional[SpaceGeometry]:
    sec = r.section(raw, "geometry", ("kind", "p", "d"))
    if sec is None:
        return None
    kind = sec.get("kind", "euclidean")
    d = r.get(sec, "d", "geometry", r.integer, minimum=1)
    if d is None:
        return None
    if kind == "euclidean":
        if "p" in sec:
            r.fail("geometry.p", "euclidean 几何不接受 p")
        return r.build("geometry", SpaceGeometry.euclidean, d)
    if kind == "p_norm":
        p = r.get(sec, "p", "geometry", r.number)
        if p is None:
            return None
        return r.build("geometry", SpaceGeometry.p_norm, p, d)
    r.fail("geometry.kind", f"未知几何类型 {kind!r}，可选 euclidean / p_norm")
    return None


def _parse_set(r: _Reader, raw: Any, path: str, d: int) -> Optional[ConvexSet]:
    if not isinstance(raw, dict) or raw.get("type") not in SET_KEYS:
        r.fail(f"{path}.type", f"集合类型应为 {tuple(SET_KEYS)} 之一")
        return None
    kind = raw["type"]
    sec = r.section(raw, path, ("type",) + SET_KEYS[kind])
    if sec is None:
        return None
    if kind == "box":
        lower = r.get(sec, "lower", path, r.vector, d)
        upper = r.get(sec, "upper", path, r.vector, d)
        if lower is None or upper is None:
            return None
        return r.build(path, Box, lower, upper)
    if kind == "ball":
        center = r.get(sec, "center", path, r.vector, d)
        radius = r.get(sec, "radius", path, r.number, positive=True)
        if center is None or radius is None:
            return None
        return r.build(path, Ball, center, radius)
    if kind == "halfspace":
        a = r.get(sec, "a", path, r.vector, d)
        b = r.get(sec, "b", path, r.number)
        if a is None or b is None:
            return None
        return r.build(path, DualHalfSpace, a, b)
    members_raw = r.required(sec, "sets", path)
    if not isinstance(members_raw, list) or not members_raw:
        r.fail(f"{path}.sets", "应为非空集合列表")
        return None
    members = [_parse_set(r, m, f"{path}.sets[{i}]", d) for i, m in enumerate(members_raw)]
    if any(m is None for m in members):
        return None
    return r.build(path, Intersection, members)


def _parse_k_schedule(r: _Reader, raw: Any, path: str, d: int) -> Optional[KSchedule]:
    sec = r.section(raw, path, ("kind", "ratio", "coefficients"))
    if sec is None:
        return None
    kind = sec.get("kind", "unit")
    ratio = 0.5
    if "ratio" in sec:
        ratio = r.number(sec["ratio"], f"{path}.ratio")
        if ratio is None:
            return None
    coefficients: Tuple[float, ...] = ()
    if kind == "goebel_kirk":
        if "coefficients" in sec:
            vec = r.vector(sec["coefficients"], f"{path}.coefficients", d - 2)
            if vec is None:
                return None
            coefficients = tuple(vec)
        else:
            coefficients = r.build(path, uniform_goebel_kirk_coefficients, d) or ()
    return r.build(path, KSchedule, kind, ratio, coefficients)


def _parse_mapping(
    r: _Reader,
    raw: Any,
    path: str,
    g: SpaceGeometry,
    top_level: bool = True
) -> Optional[MappingSpec]:
    if not isinstance(raw, dict) or raw.get("kind") not in MAPPING_KEYS:
        r.fail(f"{path}.kind", f"映射类型应为 {tuple(MAPPING_KEYS)} 之一")
        return None
    kind = raw["kind"]
    extra = ("domain", "k_schedule") if top_level else ()
    sec = r.section(raw, path, ("kind",) + MAPPING_KEYS[kind] + extra)
    if sec is None:
        return None

    domain = None
    if "domain" in sec:
        domain = _parse_set(r, sec["domain"], f"{path}.domain", g.d)
        if domain is None:
            return None
    k_schedule = None
    if "k_schedule" in sec:
        k_schedule = _parse_k_schedule(r, sec["k_schedule"], f"{path}.k_schedule", g.d)
        if k_schedule is None:
            return None
    common = dict(domain=domain, k_schedule=k_schedule)

    if kind == "rotation":
        angle = r.get(sec, "angle", path, r.number)
        return None if angle is None else r.build(path, Rotation, angle, g, **common)
    if kind == "contraction":
        factor = r.get(sec, "factor", path, r.number)
        center = r.vector(sec["center"], f"{path}.center", g.d) if "center" in sec else np.zeros(g.d)
        if factor is None or center is None:
            return None
        return r.build(path, Contraction, factor, center, g, **common)
    if kind in ("metric_projection", "generalized_projection"):
        target = r.get(sec, "set", path, lambda raw, p: _parse_set(r, raw, p, g.d))
        if target is None:
            return None
        cls = MetricProjectionMap if kind == "metric_projection" else GeneralizedProjectionMap
        return r.build(path, cls, target, g, **common)
    if kind == "averaged":
        weight = r.get(sec, "weight", path, r.number)
        inner = r.get(sec, "inner", path, lambda raw, p: _parse_mapping(r, raw, p, g, top_level=False))
        if weight is None or inner is None:
            return None
        return r.build(path, Averaged, inner, weight, g, **common)

    coefficients = None
    if "coefficients" in sec:
        vec = r.vector(sec["coefficients"], f"{path}.coefficients", g.d - 2)
        if vec is None:
            return None
        coefficients = tuple(vec)
    return r.build(path, GoebelKirk, g, coefficients, **common)


def _parse_rule(r: _Reader, raw: Any, path: str, default: Rule) -> Optional[Rule]:
    if raw is None:
        return default
    sec = r.section(raw, path, ("rule", "value", "n0"))
    if sec is None:
        return None
    value = 0.5
    if "value" in sec:
        value = r.number(sec["value"], f"{path}.value")
    n0 = 1
    if "n0" in sec:
        n0 = r.integer(sec["n0"], f"{path}.n0", minimum=1)
    if value is None or n0 is None:
        return None
    return r.build(path, Rule, sec.get("rule", "constant"), value, n0)


def _auto_or_number(r: _Reader, raw: Any, path: str) -> Tuple[bool, Optional[float]]:
    """返回 (是否有效, 数值或 None 表示 auto)"""
    if raw is None or raw == "auto":
        return True, None
    value = r.number(raw, path, positive=True)
    return value is not None, value


def config_from_dict(
    data: Any,
    base_dir: str = ".",
    lines: Optional[Dict[str, int]] = None,
    source_path: Optional[str] = None
) -> ExperimentConfig:
    """
    由已解析的字典构建并校验配置

    Args:
        data: YAML 解析结果
        base_dir: 相对路径的基准目录
        lines: 字段路径 -> 行号，用于错误定位

    Returns:
        ExperimentConfig

    Raises:
        ConfigValidationError: 存在任何问题时，包含全部错误
    """
    r = _Reader(lines)
    top = r.section(data, "", TOP_KEYS)
    if top is None:
        raise ConfigValidationError(r.errors)

    # ==========================================================================
    # 基本信息
    # ==========================================================================
    name = top.get("name")
    if not isinstance(name, str) or not name.strip():
        r.fail("name", "缺少实验名称")
        name = "unnamed"

    # ==========================================================================
    # 几何、映射与初始点
    # ==========================================================================
    geometry = r.get(top, "geometry", "", lambda raw, p: _parse_geometry(r, raw))
    mapping, x0 = None, None
    if geometry is not None:
        if "mapping" in top:
            mapping = _parse_mapping(r, top["mapping"], "mapping", geometry)
        else:
            r.required(top, "mapping", "")
        if "x0" in top:
            x0 = r.vector(top["x0"], "x0", geometry.d)
        else:
            r.required(top, "x0", "")

    # ==========================================================================
    # 迭代格式与参数序列
    # ==========================================================================
    scheme = top.get("scheme", "hybrid_hilbert")
    if scheme not in SCHEMES:
        r.fail("scheme", f"未知迭代格式 {scheme!r}，可选 {SCHEMES}")
        scheme = None

    sched_raw = top.get("schedule", {})
    sched_sec = r.section(sched_raw, "schedule", ("alpha", "beta")) if sched_raw is not None else {}
    default_schedule = Schedule()
    alpha = beta = None
    if sched_sec is not None:
        alpha = _parse_rule(r, sched_sec.get("alpha"), "schedule.alpha", default_schedule.alpha)
        beta = _parse_rule(r, sched_sec.get("beta"), "schedule.beta", default_schedule.beta)

    ok_m, M = _auto_or_number(r, top.get("M"), "M")
    ok_d, diam = _auto_or_number(r, top.get("diam_C"), "diam_C")

    max_iter = r.integer(top.get("max_iter", 500), "max_iter", minimum=1)
    tolerances = {}
    for key, default in (("stop_tol", 1e-9), ("residual_tol", 1e-8), ("projection_tol", 1e-12)):
        tolerances[key] = r.number(top.get(key, default), key, positive=True)
    precision = {
        "extended_precision": r.boolean(top.get("extended_precision", True), "extended_precision"),
        "max_precision_bits": r.integer(top.get("max_precision_bits", 8192), "max_precision_bits", minimum=64),
    }
    seed = r.integer(top.get("seed", 0), "seed", minimum=0)

    # ==========================================================================
    # 输出与日志（转换为绝对路径，环境变量优先）
    # ==========================================================================
    out_sec = r.section(top.get("outputs", {}) or {}, "outputs", ("trace_csv", "summary")) or {}
    trace_csv = _resolve_path(str(out_sec.get("trace_csv", f"outputs/{name}_trace.csv")), base_dir)
    summary_path = _resolve_path(str(out_sec.get("summary", f"outputs/{name}_summary.yaml")), base_dir)
    env_output = os.environ.get("CQ_OUTPUT_DIR", "").strip()
    if env_output:
        trace_csv = os.path.join(os.path.abspath(env_output), os.path.basename(trace_csv))
        summary_path = os.path.join(os.path.abspath(env_output), os.path.basename(summary_path))

    log_sec = r.section(top.get("logging", {}) or {}, "logging", ("dir", "level", "rotation")) or {}
    log_dir = os.environ.get("CQ_LOG_DIR") or _resolve_path(str(log_sec.get("dir", "./logs")), base_dir)
    log_level = os.environ.get("CQ_LOG_LEVEL") or str(log_sec.get("level", "INFO"))
    rotation = log_sec.get("rotation", True)

    parsed = (geometry, mapping, x0, scheme, alpha, beta, max_iter, seed, *tolerances.values(), *precision.values())
    if r.errors or any(v is None for v in parsed) or not (ok_m and ok_d):
        raise ConfigValidationError(r.errors or ["配置不完整"])

    solver = r.build("", SolverConfig, x0, scheme, Schedule(alpha, beta), M, diam, max_iter, **tolerances, **precision)
    if solver is None:
        raise ConfigValidationError(r.errors)

    # ==========================================================================
    # 定理前提
    # ==========================================================================
    for problem in hypothesis_violations(mapping, geometry, solver):
        r.errors.append(str(problem))
    if r.errors:
        raise ConfigValidationError(r.errors)

    return ExperimentConfig(
        name=name,
        geometry=geometry,
        mapping=mapping,
        solver=solver,
        seed=seed,
        trace_csv=trace_csv,
        summary_path=summary_path,
        log_dir=log_dir,
        log_level=log_level,
        enable_log_rotation=bool(rotation),
        source_path=source_path,
    )


def load_config(config_path: Optional[str] = None) -> ExperimentConfig:
    """
    加载并校验实验配置

    Args:
        config_path: 配置文件路径，默认为项目根目录的 config.yaml

    Returns:
        ExperimentConfig对象
    """
    if config_path is None:
        config_path = os.path.join(os.path.dirname(__file__), "config.yaml")
    if not os.path.exists(config_path):
        raise ConfigValidationError([f"配置文件不存在: {config_path}"])

    data, lines = load_config_from_yaml(config_path)
    base_dir = os.path.dirname(os.path.abspath(config_path))
    return config_from_dict(data, base_dir, lines, source_path=str(Path(config_path).resolve()))
