"""性能监控模块

记录试验、训练轮次等操作的耗时，供搜索历史和训练报告使用。
"""

import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List

from app.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass
class Timing:
    """一次计时结果"""
    operation: str
    seconds: float = 0.0


@dataclass
class PerformanceMonitor:
    """按操作名累计耗时"""
    durations: Dict[str, List[float]] = field(default_factory=lambda: defaultdict(list))
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @contextmanager
    def measure_time(self, operation: str) -> Iterator[Timing]:
        """测量操作执行时间的上下文管理器"""
        timing = Timing(operation)
        start_time = time.perf_counter()
        try:
            yield timing
        finally:
            timing.seconds = time.perf_counter() - start_time
            with self._lock:
                self.durations[operation].append(timing.seconds)
            logger.debug(f"操作 {operation} 执行时间: {timing.seconds * 1000:.2f}ms")

    def total_seconds(self, operation: str) -> float:
        with self._lock:
            return float(sum(self.durations.get(operation, [])))

    def summary(self) -> Dict[str, Dict[str, float]]:
        """获取各操作的次数与耗时统计"""
        with self._lock:
            return {
                op: {'count': len(values), 'total_seconds': sum(values),
                     'mean_seconds': sum(values) / len(values)}
                for op, values in self.durations.items() if values
            }
