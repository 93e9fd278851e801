"""
实验执行模块 - 运行实验、输出轨迹CSV与摘要、多格式对比

轨迹 CSV 的浮点数以 17 位有效数字输出，可原样读回做离线复核；
相同配置（含 seed）两次运行产生逐字节相同的 CSV。
"""
import csv
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from config_loader import ExperimentConfig
from errors import ConfigurationError, OutputError
from logger_setup import experiment_context, get_logger
from solvers import IterationTrace, check_trace_invariants, run_scheme

CSV_HEADER = ["n", "x", "phi_step", "residual", "dist_to_target", "cn_slack_pref", "qn_slack_pref"]


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _fmt_vector(v: np.ndarray) -> str:
    return ";".join(_fmt(c) for c in v)


@dataclass
class Summary:
    """单次实验的摘要"""
    name: str
    scheme: str
    converged: bool
    iterations: int
    final_distance_to_target: float
    max_invariant_violation: float
    wall_time_seconds: float
    terminated_by: str
    final_point: List[float] = field(default_factory=list)
    error: Optional[str] = None
    precision_bits: int = 53

    def to_dict(self) -> Dict[str, object]:
        """扁平的键值表示，向量以分号连接"""
        return {
            "name": self.name,
            "scheme": self.scheme,
            "converged": self.converged,
            "iterations": self.iterations,
            "terminated_by": self.terminated_by,
            "final_distance_to_target": _fmt(self.final_distance_to_target),
            "max_invariant_violation": _fmt(self.max_invariant_violation),
            "wall_time_seconds": round(self.wall_time_seconds, 6),
            "final_point": _fmt_vector(self.final_point),
            "error": self.error or "",
            "precision_bits": self.precision_bits,
        }


def run_experiment(cfg: ExperimentConfig) -> Tuple[IterationTrace, Summary]:
    """
    运行一次实验

    求解器的运行期错误记录在摘要中（converged = False），
    配置/前提错误直接抛出

    Returns:
        (轨迹, 摘要)
    """
    with experiment_context(cfg.name):
        return _run_experiment(cfg)


def _run_experiment(cfg: ExperimentConfig) -> Tuple[IterationTrace, Summary]:
    logger = get_logger()
    start = time.perf_counter()
    trace = run_scheme(cfg.mapping, cfg.geometry, cfg.solver)
    elapsed = time.perf_counter() - start

    if trace.target is not None:
        final_distance = cfg.geometry.norm(trace.final_point - trace.target)
    else:
        final_distance = math.nan
    report = check_trace_invariants(trace, cfg.mapping, cfg.geometry, seed=cfg.seed)
    if not report.passed:
        worst = max(report.checks, key=report.checks.get)
        logger.warning(f"轨迹不变量 {worst} 超出容差 {report.max_violation:.3e}")

    summary = Summary(
        name=cfg.name,
        scheme=cfg.scheme,
        converged=trace.converged,
        iterations=trace.iterations,
        final_distance_to_target=float(final_distance),
        max_invariant_violation=report.max_violation,
        wall_time_seconds=elapsed,
        terminated_by=trace.terminated_by,
        final_point=[float(c) for c in trace.final_point],
        error=trace.error,
        precision_bits=trace.precision_bits,
    )
    logger.info(
        f"{cfg.scheme}: {trace.terminated_by}, 迭代 {trace.iterations} 次, "
        f"末点距离 {final_distance:.3e}, 用时 {elapsed:.3f}s"
    )
    return trace, summary


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as e:
        raise OutputError(path, str(e)) from e


def write_trace_csv(trace: IterationTrace, path: str):
    """写出轨迹：表头 + 每条记录一行"""
    _ensure_parent(path)
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for rec in trace.records:
                writer.writerow([
                    rec.n,
                    _fmt_vector(rec.x),
                    _fmt(rec.phi_step),
                    _fmt(rec.residual),
                    _fmt(rec.dist_to_target),
                    _fmt(rec.cn_slack_pref),
                    _fmt(rec.qn_slack_pref),
                ])
    except OSError as e:
        raise OutputError(path, str(e)) from e


def read_trace_csv(path: str) -> List[Dict[str, object]]:
    """读回轨迹 CSV，x 还原为向量，其余列还原为浮点数"""
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            parsed: Dict[str, object] = {"n": int(row["n"])}
            parsed["x"] = np.array([float(c) for c in row["x"].split(";")])
            for key in CSV_HEADER[2:]:
                parsed[key] = float(row[key])
            rows.append(parsed)
    return rows


def write_summary(summary: Summary, path: str):
    """写出摘要（扁平 YAML 键值文档）"""
    _ensure_parent(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(summary.to_dict(), f, sort_keys=False, allow_unicode=True)
    except OSError as e:
        raise OutputError(path, str(e)) from e


# =============================================================================
# 多格式对比
# =============================================================================

@dataclass
class ComparisonRow:
    scheme: str
    name: str
    iterations: int
    final_distance: float
    converged: bool
    terminated_by: str


def _instance_key(cfg: ExperimentConfig) -> Tuple[str, str, Tuple[float, ...]]:
    m = cfg.mapping
    return m.describe(), m.domain.describe(), tuple(float(c) for c in cfg.solver.x0)


def compare_schemes(configs: Sequence[ExperimentConfig], max_workers: int = 4) -> List[ComparisonRow]:
    """
    在同一问题实例上运行多个格式

    各实验相互独立，并发执行；结果按 (scheme, name) 排序

    Raises:
        ConfigurationError: 配置不共享同一几何、映射和初始点
    """
    if not configs:
        raise ConfigurationError("compare_schemes 至少需要一个配置")
    first = configs[0]
    for cfg in configs[1:]:
        if not cfg.geometry.same_space(first.geometry) or _instance_key(cfg) != _instance_key(first):
            raise ConfigurationError(
                f"配置 {cfg.name} 与 {first.name} 不是同一问题实例（几何/映射/x0 不一致）"
            )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        summaries = [s for _, s in pool.map(run_experiment, configs)]

    rows = [
        ComparisonRow(s.scheme, s.name, s.iterations, s.final_distance_to_target, s.converged, s.terminated_by)
        for s in summaries
    ]
    rows.sort(key=lambda r: (r.scheme, r.name))
    return rows


def format_comparison_table(rows: Sequence[ComparisonRow]) -> str:
    """
    生成对比表格

    Returns:
        Markdown格式的表格
    """
    if not rows:
        return ""

    table = "| 格式 | 实验 | 迭代次数 | 末点距离 | 收敛 | 终止原因 |\n"
    table += "|:---|:---|:---:|:---:|:---:|:---|\n"
    for row in rows:
        converged = "✅" if row.converged else "❌"
        table += (
            f"| {row.scheme} | {row.name} | {row.iterations} | {row.final_distance:.3e} "
            f"| {converged} | {row.terminated_by} |\n"
        )
    return table
