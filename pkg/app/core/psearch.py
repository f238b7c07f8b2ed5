#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
幂指数 p 搜索 - 网格搜索、梯度联合训练与一维高斯过程贝叶斯优化

目标函数 objective(p) 一般为: 以 p 训练新模型后的验证指标。
每个试验记录 (p, 目标值, 墙钟耗时)。
"""

import math
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import norm

from app.core.setnn import SetBatch, SetModel
from app.core.training import train
from app.schemas import (DirectionEnum, SearchConfig, SearchResult, SearchStrategyEnum, SearchTrial,
                         TrainConfig)
from app.utils.error_handler import ConfigurationError, NumericalAbortError
from app.utils.logger import get_logger
from app.utils.numerics import pairwise_sum
from app.utils.performance_monitor import PerformanceMonitor

logger = get_logger(__name__)

Objective = Callable[[float], float]

MAX_JITTER = 1e-2
SPECIAL_CASE_PS: Tuple[float, ...] = (-1.0, 0.0, 1.0, 2.0, 3.0)


def _better(a: float, b: float, direction: DirectionEnum) -> bool:
    """a 是否严格优于 b"""
    return a > b if direction == DirectionEnum.MAXIMIZE else a < b


def _best_trial(history: Sequence[SearchTrial], direction: DirectionEnum) -> SearchTrial:
    """最优试验；目标值相同时取较小的 p"""
    best = history[0]
    for trial in history[1:]:
        if _better(trial.objective, best.objective, direction) or (
                trial.objective == best.objective and trial.p < best.p):
            best = trial
    return best


def _run_trial(objective: Objective, p: float, trial: int, monitor: PerformanceMonitor) -> SearchTrial:
    with monitor.measure_time('trial') as timing:
        value = float(objective(p))
    if not math.isfinite(value):
        raise NumericalAbortError(f"objective is not finite at p={p}", tensor='objective')
    logger.info(f"试验 {trial}: p={p:.6g}, objective={value:.6g} ({timing.seconds:.2f}s)")
    return SearchTrial(trial=trial, p=p, objective=value, seconds=timing.seconds)


def grid_points(cfg: SearchConfig) -> List[float]:
    """p_min, p_min+step, … ≤ p_max (按索引计算以避免累积误差)"""
    p_min, p_max = cfg.p_range
    count = int(math.floor((p_max - p_min) / cfg.step + 1e-9)) + 1
    points = [p_min + i * cfg.step for i in range(count)]
    points = [min(p, p_max) for p in points]
    if not points:
        raise ConfigurationError("empty grid", field_path='search.step')
    return points


def grid_search(objective: Objective, cfg: SearchConfig) -> SearchResult:
    """在等距网格上逐点求值，返回网格内的精确最优"""
    monitor = PerformanceMonitor()
    history = [_run_trial(objective, p, i, monitor) for i, p in enumerate(grid_points(cfg))]
    best = _best_trial(history, cfg.direction)
    return SearchResult(strategy=SearchStrategyEnum.GRID, best_p=best.p, best_objective=best.objective,
                        history=history)


def gradient_search(model: SetModel, train_set: SetBatch, val_set: Optional[SetBatch],
                    train_cfg: TrainConfig, cfg: SearchConfig,
                    metric: Callable[[SetModel], float]) -> SearchResult:
    """
    p 与网络权重联合训练；历史中每轮记录一次 p

    Raises:
        ConfigurationError: 聚合不是可学习幂平均
        NumericalAbortError: 训练发散，partial_history 中带有已完成的轮次
    """
    if not model.learnable_p:
        raise ConfigurationError("gradient search requires a learnable power_mean aggregator",
                                 field_path='model.aggregator.learnable')
    clamp = (max(cfg.p_range[0], train_cfg.p_clamp[0]), min(cfg.p_range[1], train_cfg.p_clamp[1]))
    train_cfg = train_cfg.model_copy(update={'p_clamp': clamp})
    history: List[SearchTrial] = []

    def on_epoch(epoch: int, m: SetModel):
        history.append(SearchTrial(trial=epoch, p=float(m.p), objective=float(metric(m)), seconds=0.0))

    try:
        _, report = train(model, train_set, val_set, train_cfg, on_epoch=on_epoch)
    except NumericalAbortError as e:
        e.partial_history = list(history)
        raise
    # 联合训练只有一次运行，耗时按轮次平均分摊
    epoch_seconds = report.seconds / max(len(history), 1)
    history = [t.model_copy(update={'seconds': epoch_seconds}) for t in history]
    final = history[-1]
    return SearchResult(strategy=SearchStrategyEnum.GRADIENT, best_p=float(model.p),
                        best_objective=final.objective, history=history)


class GaussianProcess1D:
    """一维高斯过程代理: 平方指数核，观测抖动，失败时抖动 ×10 直到 1e-2"""

    def __init__(self, length_scale: float = 2.0, jitter: float = 1e-6):
        self.length_scale = length_scale
        self.jitter = jitter
        self.x = np.zeros(0)
        self.y_mean = 0.0
        self.y_scale = 1.0
        self._factor = None
        self._alpha = None

    def kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        diff = a[:, None] - b[None, :]
        return np.exp(-0.5 * (diff / self.length_scale) ** 2)

    def fit(self, x: Sequence[float], y: Sequence[float]):
        self.x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = float(np.mean(y))
        spread = float(np.std(y))
        self.y_scale = spread if spread > 0 else 1.0
        y_norm = (y - self.y_mean) / self.y_scale
        k = self.kernel(self.x, self.x)
        jitter = self.jitter
        while True:
            try:
                self._factor = cho_factor(k + jitter * np.eye(self.x.size), lower=True)
                break
            except LinAlgError:
                if jitter * 10 > MAX_JITTER * (1 + 1e-12):
                    raise NumericalAbortError("GP covariance is singular even with maximum jitter",
                                              tensor='gp_covariance')
                jitter *= 10
                logger.warning(f"GP 协方差矩阵奇异，抖动提升至 {jitter:g}")
        self._alpha = cho_solve(self._factor, y_norm)

    def predict(self, x: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        k_star = self.kernel(x, self.x)
        mean = k_star @ self._alpha
        v = cho_solve(self._factor, k_star.T)
        var = np.clip(1.0 - np.sum(k_star * v.T, axis=1), 0.0, None)
        return mean * self.y_scale + self.y_mean, np.sqrt(var) * self.y_scale


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float,
                         direction: DirectionEnum) -> np.ndarray:
    """期望改进 (按最大化方向统一处理)"""
    sign = 1.0 if direction == DirectionEnum.MAXIMIZE else -1.0
    improvement = sign * (mean - best)
    ei = np.zeros_like(mean)
    positive = std > 0
    z = improvement[positive] / std[positive]
    ei[positive] = improvement[positive] * norm.cdf(z) + std[positive] * norm.pdf(z)
    ei[~positive] = np.maximum(improvement[~positive], 0.0)
    return ei


def initial_points(cfg: SearchConfig) -> List[float]:
    """均匀分布的初始点 (低差异)，含两端点"""
    p_min, p_max = cfg.p_range
    return [float(v) for v in np.linspace(p_min, p_max, cfg.init_points)]


def bayes_search(objective: Objective, cfg: SearchConfig) -> SearchResult:
    """
    一维贝叶斯优化: 先评估 init_points 个均匀点，其余试验由期望改进在
    candidates 个候选网格点上取最大值决定 (平局取最小的 p)
    """
    monitor = PerformanceMonitor()
    history: List[SearchTrial] = []
    for p in initial_points(cfg):
        history.append(_run_trial(objective, p, len(history), monitor))

    candidates = np.linspace(cfg.p_range[0], cfg.p_range[1], cfg.candidates)
    gp = GaussianProcess1D(length_scale=cfg.length_scale, jitter=cfg.jitter)
    while len(history) < cfg.trials:
        xs = [t.p for t in history]
        ys = [t.objective for t in history]
        if max(ys) == min(ys):
            # 观测全部相同: 代理不含信息，EI 视为处处相等
            ei = np.zeros_like(candidates)
        else:
            gp.fit(xs, ys)
            mean, std = gp.predict(candidates)
            best_so_far = _best_trial(history, cfg.direction).objective
            ei = expected_improvement(mean, std, best_so_far, cfg.direction)
        # np.argmax 返回第一个最大值，即最小的候选 p
        p_next = float(candidates[int(np.argmax(ei))])
        logger.debug(f"EI 最大值 {float(np.max(ei)):.3g} 位于 p={p_next:.4f}")
        history.append(_run_trial(objective, p_next, len(history), monitor))

    best = _best_trial(history, cfg.direction)
    return SearchResult(strategy=SearchStrategyEnum.BAYES, best_p=best.p, best_objective=best.objective,
                        history=history)


def special_cases_sweep(objective_for_seed: Callable[[Optional[float], int], float],
                        seeds: Iterable[int] = (0, 1, 2),
                        ps: Sequence[Optional[float]] = SPECIAL_CASE_PS + (None,)) -> List[dict]:
    """
    固定 p 的特例对比 (p = −1, 0, 1, 2, 3 与 +∞，即最大池化)

    objective_for_seed(p, seed) 中 p 为 None 表示最大池化。

    Returns:
        每个 p 一行: {'p', 'label', 'values', 'mean', 'std'}
    """
    seeds = list(seeds)
    rows = []
    for p in ps:
        values = [float(objective_for_seed(p, seed)) for seed in seeds]
        mean = pairwise_sum(values) / len(values)
        std = math.sqrt(pairwise_sum([(v - mean) ** 2 for v in values]) / len(values))
        label = 'max' if p is None else f"{p:g}"
        logger.info(f"特例 p={label}: mean={mean:.6g}, std={std:.3g}")
        rows.append({'p': p, 'label': label, 'values': values, 'mean': mean, 'std': std})
    return rows


SEARCH_CSV_HEADER = ('trial', 'p', 'objective', 'seconds')


def history_rows(result: SearchResult) -> List[Tuple[int, float, float, float]]:
    return [(t.trial, t.p, t.objective, t.seconds) for t in result.history]
