"""
日志设置模块 - 求解器统一的日志配置

库模块通过 get_logger() 记录日志；命令行在读取配置后调用 setup_logger() 接上日志文件。
compare 会在多个线程里同时跑实验，每条日志带上当前实验名（见 experiment_context）。
"""
import logging
import os
from contextlib import contextmanager
from contextvars import ContextVar
from logging.handlers import RotatingFileHandler
from typing import Iterator, Optional

LOGGER_NAME = "cq_solver"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(experiment)s] %(message)s'

_current_experiment: ContextVar[str] = ContextVar("experiment", default="-")

# 全局日志实例
_logger: Optional[logging.Logger] = None


class ExperimentFilter(logging.Filter):
    """给每条记录补上 experiment 字段"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.experiment = _current_experiment.get()
        return True


@contextmanager
def experiment_context(name: str) -> Iterator[None]:
    """在该上下文内（当前线程）记录的日志都标记为实验 name"""
    token = _current_experiment.set(name)
    try:
        yield
    finally:
        _current_experiment.reset(token)


def setup_logger(
    name: str = LOGGER_NAME,
    log_file: Optional[str] = None,
    level: str = "INFO",
    enable_rotation: bool = True,
    max_bytes: int = 10 * 1024 * 1024,
    backup_count: int = 5
) -> logging.Logger:
    """
    设置日志记录器

    run / compare 可能在同一进程里多次调用（例如测试），每次都替换原有 handler，
    避免同一条日志写两遍。

    Args:
        name: 日志名称
        log_file: 日志文件路径，None 表示只输出到控制台
        level: 日志级别，无法识别时按 INFO
        enable_rotation: 是否按大小轮转日志文件
        max_bytes: 单个日志文件最大大小
        backup_count: 保留的日志备份数量

    Returns:
        配置好的Logger对象
    """
    global _logger

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    logger.propagate = False

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')
    handlers = [logging.StreamHandler()]

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        if enable_rotation:
            handlers.append(RotatingFileHandler(
                log_file,
                maxBytes=max_bytes,
                backupCount=backup_count,
                encoding='utf-8'
            ))
        else:
            handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    for handler in handlers:
        handler.setFormatter(formatter)
        handler.addFilter(ExperimentFilter())
        logger.addHandler(handler)

    _logger = logger
    return logger


def get_logger() -> logging.Logger:
    """获取求解器日志记录器，未设置时创建只输出到控制台的默认logger"""
    global _logger
    if _logger is None:
        _logger = setup_logger()
    return _logger
