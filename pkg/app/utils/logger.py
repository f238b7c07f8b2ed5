# app/utils/logger.py

import functools
import logging
import os
import time
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(log_path: Optional[str] = None, log_level: Optional[str] = None) -> Optional[str]:
    """设置全局日志配置

    log_path 为 None 时只输出到控制台；日志级别优先使用参数，其次是环境变量 HPDS_LOG_LEVEL。
    """
    level_name = (log_level or os.getenv('HPDS_LOG_LEVEL') or 'INFO').upper()
    level = getattr(logging, level_name, logging.INFO)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)

    # 清除现有的处理器
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
        handler.close()

    if log_path is not None:
        log_dir = os.path.dirname(log_path)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(log_path, encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    logging.getLogger(__name__).debug(f"日志系统初始化完成，级别: {level_name}，日志文件: {log_path}")
    return log_path


def get_logger(name: str) -> logging.Logger:
    """获取指定名称的日志器"""
    return logging.getLogger(name)


def log_performance(func):
    """装饰器：记录函数执行时间"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger = get_logger(func.__module__)
        start_time = time.perf_counter()

        try:
            result = func(*args, **kwargs)
            execution_time = (time.perf_counter() - start_time) * 1000
            logger.info(f"{func.__name__} 执行完成，耗时: {execution_time:.2f}ms")
            return result
        except Exception as e:
            execution_time = (time.perf_counter() - start_time) * 1000
            logger.error(f"{func.__name__} 执行失败，耗时: {execution_time:.2f}ms，错误: {e}")
            raise
    return wrapper
