#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
错误处理模块 - 统一的异常层次和退出码分类

主要功能:
1. 定义集合函数工具包的异常层次
2. 错误分类 (配置 / 数值 / 检查失败)
3. 异常到命令行退出码的映射
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

from app.utils.logger import get_logger

logger = get_logger(__name__)


class SetFunctionError(Exception):
    """工具包所有异常的基类"""


class ShapeError(SetFunctionError, ValueError):
    """矩阵形状不匹配"""

    def __init__(self, message: str, left: Sequence[int] = (), right: Sequence[int] = ()):
        self.left = tuple(left)
        self.right = tuple(right)
        if self.left or self.right:
            message = f"{message}: {self.left} vs {self.right}"
        super().__init__(message)


class DomainError(SetFunctionError, ValueError):
    """输入超出定义域 (空集合、非正元素、k > |S| 等)"""

    def __init__(self, message: str, index: Optional[Any] = None):
        self.index = index
        if index is not None:
            message = f"{message} (index={index})"
        super().__init__(message)


class ConfigurationError(SetFunctionError, ValueError):
    """配置或规格不合法"""

    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class ResourceError(SetFunctionError):
    """枚举规模超出预算"""


class ContractViolationError(SetFunctionError, RuntimeError):
    """调用约定被破坏，例如使用过期的前向缓存"""


class NumericalAbortError(SetFunctionError, ArithmeticError):
    """出现非有限数值，训练或搜索中止"""

    def __init__(self, message: str, tensor: Optional[str] = None,
                 partial_history: Optional[List[Any]] = None):
        self.tensor = tensor
        self.partial_history = list(partial_history or [])
        if tensor:
            message = f"{message} (first non-finite tensor: {tensor})"
        super().__init__(message)


class DatasetParseError(SetFunctionError, ValueError):
    """数据集文件解析失败"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class CheckFailure(SetFunctionError):
    """性质检查未通过"""


class ErrorCategory(Enum):
    """错误分类"""
    CHECK = "check"
    CONFIGURATION = "configuration"
    FILE_SYSTEM = "file_system"
    NUMERICAL = "numerical"
    UNKNOWN = "unknown"


EXIT_CODES: Dict[ErrorCategory, int] = {
    ErrorCategory.CHECK: 1,
    ErrorCategory.CONFIGURATION: 2,
    ErrorCategory.FILE_SYSTEM: 2,
    ErrorCategory.NUMERICAL: 3,
    ErrorCategory.UNKNOWN: 2,
}


@dataclass
class ErrorInfo:
    """错误信息"""
    category: ErrorCategory
    exit_code: int
    message: str
    exception_type: str
    context: Dict[str, Any] = field(default_factory=dict)


def classify_error(exception: BaseException) -> ErrorCategory:
    """根据异常类型自动分类"""
    from pydantic import ValidationError

    if isinstance(exception, CheckFailure):
        return ErrorCategory.CHECK
    if isinstance(exception, NumericalAbortError):
        return ErrorCategory.NUMERICAL
    if isinstance(exception, (ConfigurationError, ValidationError, DatasetParseError,
                              ShapeError, DomainError, ResourceError)):
        return ErrorCategory.CONFIGURATION
    if isinstance(exception, OSError):
        return ErrorCategory.FILE_SYSTEM
    return ErrorCategory.UNKNOWN


def handle_error(exception: BaseException, context: Optional[Dict[str, Any]] = None) -> ErrorInfo:
    """
    处理错误: 分类、记录日志并给出退出码

    Args:
        exception: 异常对象
        context: 错误上下文

    Returns:
        错误信息对象
    """
    category = classify_error(exception)
    info = ErrorInfo(
        category=category,
        exit_code=EXIT_CODES[category],
        message=str(exception),
        exception_type=type(exception).__name__,
        context=context or {},
    )
    logger.error(f"[{category.value}] {info.exception_type}: {info.message}")
    if info.context:
        logger.debug(f"错误上下文: {info.context}")
    return info
