#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
CQ 混合投影不动点求解器 - 命令行入口

子命令:
1. run <config>         运行单个实验，输出轨迹CSV与摘要
2. validate <config>    只校验配置与定理前提
3. compare <config-dir> 在同一问题实例上对比目录中的全部配置
4. selftest [suite]     运行模块自检

退出码: 0 成功；1 配置/前提校验失败；2 运行期错误或未收敛
"""

import argparse
import glob
import os
import sys
from typing import List, Optional

# 添加项目目录到路径
project_dir = os.path.dirname(os.path.abspath(__file__))
if project_dir not in sys.path:
    sys.path.insert(0, project_dir)

from config_loader import ExperimentConfig, load_config
from errors import CQError, ConfigurationError, ConfigValidationError
from harness import (
    compare_schemes, format_comparison_table, run_experiment, write_summary, write_trace_csv
)
from logger_setup import get_logger, setup_logger

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def _print_validation_errors(err: ConfigValidationError):
    print("❌ 配置校验失败:")
    for item in err.errors:
        print(f"   - {item}")


class ExperimentRunner:
    """单个实验的加载、运行与输出"""

    def __init__(self, config_path: Optional[str] = None):
        self.config_path = config_path
        self.config: Optional[ExperimentConfig] = None
        self.logger = get_logger()

    def step1_load(self) -> bool:
        """步骤1: 加载并校验配置"""
        print("\n" + "=" * 60)
        print("📥 步骤 1/3: 加载配置")
        print("=" * 60)

        try:
            self.config = load_config(self.config_path)
        except ConfigValidationError as e:
            _print_validation_errors(e)
            return False

        cfg = self.config
        self.logger = setup_logger(
            log_file=cfg.get_log_file(),
            level=cfg.log_level,
            enable_rotation=cfg.enable_log_rotation
        )
        print(f"✅ 配置有效: {cfg.name}")
        print(f"   📐 几何: {cfg.geometry.describe()}")
        print(f"   🔁 映射: {cfg.mapping.describe()}  k_n = {cfg.mapping.k_schedule.describe()}")
        print(f"   🧮 格式: {cfg.scheme}  α_n = {cfg.solver.schedule.alpha.describe()}  "
              f"β_n = {cfg.solver.schedule.beta.describe()}")
        print(f"   📍 x0: {cfg.solver.x0.tolist()}")
        return True

    def step2_run(self):
        """步骤2: 迭代求解"""
        print("\n" + "=" * 60)
        print("🚀 步骤 2/3: 迭代求解")
        print("=" * 60)

        trace, summary = run_experiment(self.config)
        if summary.converged:
            print(f"✅ 收敛: 迭代 {summary.iterations} 次，末点距离 {summary.final_distance_to_target:.3e}")
        elif summary.error:
            print(f"❌ 运行出错: {summary.error}")
        else:
            print(f"⚠️ 达到迭代上限 {summary.iterations}，末点距离 {summary.final_distance_to_target:.3e}")
        if summary.max_invariant_violation > 0:
            print(f"⚠️ 轨迹不变量最大超出量: {summary.max_invariant_violation:.3e}")
        return trace, summary

    def step3_save(self, trace, summary):
        """步骤3: 写出轨迹与摘要"""
        print("\n" + "=" * 60)
        print("💾 步骤 3/3: 保存结果")
        print("=" * 60)

        write_trace_csv(trace, self.config.trace_csv)
        write_summary(summary, self.config.summary_path)
        print(f"📄 轨迹: {self.config.trace_csv}")
        print(f"📄 摘要: {self.config.summary_path}")
        self.logger.info(f"结果已保存: {self.config.trace_csv}, {self.config.summary_path}")

    def run(self) -> int:
        if not self.step1_load():
            return EXIT_INVALID
        try:
            trace, summary = self.step2_run()
            self.step3_save(trace, summary)
        except ConfigurationError as e:
            print(f"❌ {e}")
            return EXIT_INVALID
        except CQError as e:
            self.logger.exception(f"运行失败: {e}")
            print(f"❌ 运行失败: {e}")
            return EXIT_RUNTIME
        return EXIT_OK if summary.converged else EXIT_RUNTIME


def cmd_run(args) -> int:
    return ExperimentRunner(args.config).run()


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigValidationError as e:
        _print_validation_errors(e)
        return EXIT_INVALID
    print(f"✅ 配置有效: {cfg.name} ({cfg.scheme}, {cfg.geometry.describe()})")
    return EXIT_OK


def _load_directory(config_dir: str) -> List[ExperimentConfig]:
    paths = sorted(glob.glob(os.path.join(config_dir, "*.yaml")) + glob.glob(os.path.join(config_dir, "*.yml")))
    if not paths:
        raise ConfigValidationError([f"目录 {config_dir} 中没有 YAML 配置"])
    configs, problems = [], []
    for path in paths:
        try:
            configs.append(load_config(path))
        except ConfigValidationError as e:
            problems.extend(f"{os.path.basename(path)}: {item}" for item in e.errors)
    if problems:
        raise ConfigValidationError(problems)
    return configs


def cmd_compare(args) -> int:
    try:
        configs = _load_directory(args.config_dir)
    except ConfigValidationError as e:
        _print_validation_errors(e)
        return EXIT_INVALID

    first = configs[0]
    setup_logger(log_file=first.get_log_file(), level=first.log_level,
                 enable_rotation=first.enable_log_rotation)
    print(f"🔬 对比 {len(configs)} 个配置: {', '.join(c.name for c in configs)}")
    try:
        rows = compare_schemes(configs, max_workers=args.workers)
    except ConfigurationError as e:
        print(f"❌ {e}")
        return EXIT_INVALID

    table = format_comparison_table(rows)
    print("\n" + table)
    output_dir = os.environ.get("CQ_OUTPUT_DIR") or os.path.join(args.config_dir, "outputs")
    os.makedirs(output_dir, exist_ok=True)
    output_file = os.path.join(output_dir, "comparison.md")
    with open(output_file, "w", encoding="utf-8") as f:
        f.write(table)
    print(f"📄 对比表已保存到: {output_file}")
    return EXIT_OK if all(r.converged for r in rows) else EXIT_RUNTIME


def cmd_selftest(args) -> int:
    import test_modules
    return EXIT_OK if test_modules.run_suites(args.suite) else EXIT_RUNTIME


def main():
    """主函数"""
    parser = argparse.ArgumentParser(
        description="CQ 混合投影不动点求解器",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python main.py run experiments/a1_geometric.yaml   # 运行单个实验
  python main.py run                                 # 使用默认配置 config.yaml
  python main.py validate experiments/a2_banach.yaml # 只校验配置
  python main.py compare experiments/compare_box     # 对比目录中的全部格式
  python main.py selftest                            # 模块自检
  CQ_OUTPUT_DIR=/tmp/out python main.py run config.yaml  # 改写输出目录
"""
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="运行单个实验")
    p_run.add_argument("config", nargs="?", default=None, help="配置文件路径 (默认: config.yaml)")
    p_run.set_defaults(func=cmd_run)

    p_validate = sub.add_parser("validate", help="校验配置与定理前提")
    p_validate.add_argument("config", help="配置文件路径")
    p_validate.set_defaults(func=cmd_validate)

    p_compare = sub.add_parser("compare", help="对比目录中的全部配置")
    p_compare.add_argument("config_dir", help="配置目录")
    p_compare.add_argument("--workers", "-w", type=int, default=4, help="并发运行的实验数 (默认: 4)")
    p_compare.set_defaults(func=cmd_compare)

    p_selftest = sub.add_parser("selftest", help="运行模块自检")
    p_selftest.add_argument(
        "suite", nargs="?", default="all",
        choices=["geometry", "projection", "mappings", "solvers", "harness", "all"],
        help="自检项目 (默认: all)"
    )
    p_selftest.set_defaults(func=cmd_selftest)

    args = parser.parse_args()

    try:
        sys.exit(args.func(args))
    except KeyboardInterrupt:
        print("\n\n⏹️ 用户中断")
        sys.exit(EXIT_RUNTIME)
    except ConfigurationError as e:
        print(f"\n❌ 配置错误: {e}")
        sys.exit(EXIT_INVALID)
    except CQError as e:
        print(f"\n❌ 运行错误: {e}")
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    main()
