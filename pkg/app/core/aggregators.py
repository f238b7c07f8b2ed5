#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
聚合算子模块 - 对元素嵌入矩阵的各行做置换不变的逐维归约

主要功能:
1. 求和 / 平均 / 最大 / 最小 / log-mean-exp 聚合
2. 数值稳定的幂平均 (Hölder 平均) 及其可学习指数
3. 拟算术平均 g⁻¹(mean(g(x))) 与加权幂平均
4. 解析梯度 (对嵌入和对指数 p)

幂平均在对数空间中计算: M_p = exp((1/p)·(logsumexp(p·ln x) − ln n))。
|p| < EPS_P 时使用几何平均分支 ln M = μ + (p/2)·σ² (μ, σ² 为 ln x 的均值与方差)，
p = 0 时正好是几何平均，且与稳定分支在切换点处一致到 ~1e-8。
"""

import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.schemas import AggregatorKind, AggregatorSpec, MonotoneMapKind, MonotoneMapSpec
from app.utils.error_handler import ConfigurationError, DomainError, ShapeError
from app.utils.logger import get_logger
from app.utils.numerics import as_vector, logsumexp, softmax

logger = get_logger(__name__)

EPS_P = 1e-4
WEIGHT_SIMPLEX_TOLERANCE = 1e-9


class MonotoneMap:
    """在正实数上严格单调的映射 g，同时提供 g⁻¹ 与 g'"""

    def __init__(self, spec: MonotoneMapSpec):
        self.spec = spec
        self.kind = spec.kind
        self.q = spec.q
        if self.kind == MonotoneMapKind.POWER and self.q == 0.0:
            raise DomainError("power map with q = 0 is not injective; use the ln map")

    @classmethod
    def of(cls, kind: str, q: Optional[float] = None) -> 'MonotoneMap':
        return cls(MonotoneMapSpec(kind=kind, q=q))

    def _require_positive(self, x: np.ndarray, what: str):
        bad = np.flatnonzero(np.asarray(x).reshape(-1) <= 0)
        if bad.size:
            raise DomainError(f"{self.kind.value} map {what} requires positive input", index=int(bad[0]))

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == MonotoneMapKind.IDENTITY:
            return x.copy()
        if self.kind == MonotoneMapKind.LN:
            self._require_positive(x, 'forward')
            return np.log(x)
        if self.kind == MonotoneMapKind.EXP:
            return np.exp(x)
        self._require_positive(x, 'forward')
        return np.power(x, self.q)

    def inverse(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if self.kind == MonotoneMapKind.IDENTITY:
            return y.copy()
        if self.kind == MonotoneMapKind.LN:
            return np.exp(y)
        if self.kind == MonotoneMapKind.EXP:
            self._require_positive(y, 'inverse')
            return np.log(y)
        self._require_positive(y, 'inverse')
        return np.power(y, 1.0 / self.q)


def quasi_arithmetic_mean(values: Sequence[float], g: MonotoneMapSpec) -> float:
    """拟算术平均 g⁻¹(mean(g(values)))；g = exp 时按最大值平移的 logsumexp 计算"""
    values = as_vector(values, 'values')
    if values.size == 0:
        raise DomainError("quasi-arithmetic mean of an empty vector")
    if g.kind == MonotoneMapKind.EXP:
        return float(logsumexp(values) - math.log(values.size))
    gmap = MonotoneMap(g)
    return float(gmap.inverse(np.mean(gmap.forward(values))))


def sum_isomorphic(values: Sequence[float], g: MonotoneMapSpec) -> float:
    """同构空间中的求和 g(Σ g⁻¹(xᵢ))；g = ln 时即 logsumexp"""
    values = as_vector(values, 'values')
    if values.size == 0:
        raise DomainError("sum in an isomorphic space of an empty vector")
    if g.kind == MonotoneMapKind.LN:
        return float(logsumexp(values))
    gmap = MonotoneMap(g)
    return float(gmap.forward(np.sum(gmap.inverse(values))))


def sum_isomorphic_aggregate(emb: np.ndarray, mask: Optional[np.ndarray], g: MonotoneMapSpec) -> np.ndarray:
    """逐维的 g∘(掩码求和)∘g⁻¹ 聚合"""
    x, _ = _valid_rows(emb, mask)
    if g.kind == MonotoneMapKind.LN:
        return logsumexp(x, axis=0)
    gmap = MonotoneMap(g)
    return gmap.forward(np.sum(gmap.inverse(x), axis=0))


def weighted_power_mean(values: Sequence[float], weights: Sequence[float], p: float) -> float:
    """加权幂平均 (Σ wᵢ xᵢ^p)^(1/p)；|p| < EPS_P 时使用几何极限分支"""
    values = as_vector(values, 'values')
    weights = as_vector(weights, 'weights')
    if values.shape != weights.shape:
        raise ShapeError("values and weights differ in length", values.shape, weights.shape)
    _check_simplex(weights, WEIGHT_SIMPLEX_TOLERANCE)
    _check_positive(values.reshape(-1, 1), np.arange(values.size), AggregatorKind.WEIGHTED_POWER_MEAN)
    nonzero = np.flatnonzero(weights > 0)
    if nonzero.size == 1:
        return float(values[nonzero[0]])
    log_m = _log_power_mean(np.log(values).reshape(-1, 1), float(p), _log_weights(weights))
    return float(np.exp(log_m[0]))


def special_case_spec(name: str) -> AggregatorSpec:
    """按名称获取幂平均的特例"""
    table: Dict[str, AggregatorSpec] = {
        'min': AggregatorSpec(kind=AggregatorKind.MIN),
        'harmonic': AggregatorSpec(kind=AggregatorKind.POWER_MEAN, p=-1.0),
        'geometric': AggregatorSpec(kind=AggregatorKind.POWER_MEAN, p=0.0),
        'mean': AggregatorSpec(kind=AggregatorKind.POWER_MEAN, p=1.0),
        'deepsets': AggregatorSpec(kind=AggregatorKind.POWER_MEAN, p=1.0),
        'max': AggregatorSpec(kind=AggregatorKind.MAX),
        'pointnet': AggregatorSpec(kind=AggregatorKind.MAX),
    }
    try:
        return table[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown special case '{name}'", field_path='aggregator') from None


def _check_simplex(weights: np.ndarray, tol: float):
    if np.any(weights < 0):
        raise ConfigurationError("weights must be nonnegative", field_path='weights')
    if abs(math.fsum(weights) - 1.0) > tol:
        raise ConfigurationError(f"weights must sum to 1 (got {math.fsum(weights)!r})", field_path='weights')


def _log_weights(weights: np.ndarray) -> np.ndarray:
    with np.errstate(divide='ignore'):
        return np.log(weights)


def _valid_rows(emb: np.ndarray, mask: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ShapeError("embedding matrix must be 2-D", emb.shape, ())
    if mask is None:
        idx = np.arange(emb.shape[0])
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.shape[0] != emb.shape[0]:
            raise ShapeError("mask length differs from embedding rows", mask.shape, emb.shape)
        idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise DomainError("aggregation over a set with no valid rows")
    return emb[idx], idx


def _check_positive(x: np.ndarray, idx: np.ndarray, kind: AggregatorKind):
    bad = np.argwhere(~(x > 0))
    if bad.size:
        row, col = bad[0]
        raise DomainError(f"{kind.value} requires strictly positive entries", index=(int(idx[row]), int(col)))


def _log_power_mean(log_x: np.ndarray, p: float, log_w: Optional[np.ndarray] = None) -> np.ndarray:
    """逐列的 ln M_p；log_w 缺省为均匀权重"""
    n = log_x.shape[0]
    if log_w is None:
        log_w = np.full(n, -math.log(n))
    if abs(p) < EPS_P:
        w = np.exp(log_w)[:, None]
        mu = np.sum(w * log_x, axis=0)
        var = np.sum(w * (log_x - mu) ** 2, axis=0)
        return mu + 0.5 * p * var
    return logsumexp(p * log_x + log_w[:, None], axis=0) / p


def _power_mean_backward(log_x: np.ndarray, p: float, log_w: np.ndarray,
                         upstream: np.ndarray) -> Tuple[np.ndarray, float]:
    """幂平均对 x 与 p 的解析梯度"""
    w = np.exp(log_w)[:, None]
    log_m = _log_power_mean(log_x, p, log_w)
    m = np.exp(log_m)
    x = np.exp(log_x)
    if abs(p) < EPS_P:
        mu = np.sum(w * log_x, axis=0)
        var = np.sum(w * (log_x - mu) ** 2, axis=0)
        d_x = w * (1.0 + p * (log_x - mu)) / x * m
        d_p = m * 0.5 * var
    else:
        d_x = np.exp(log_w[:, None] + (p - 1.0) * log_x + (1.0 - p) * log_m)
        z = p * log_x + log_w[:, None]
        log_a = logsumexp(z, axis=0)
        v = softmax(z, axis=0)
        d_p = m * (np.sum(v * log_x, axis=0) / p - log_a / (p * p))
    grad_x = d_x * upstream[None, :]
    grad_p = float(np.dot(d_p, upstream))
    return grad_x, grad_p


def _effective_power(spec: AggregatorSpec) -> Optional[float]:
    """幂平均类聚合对应的指数；不是幂平均时返回 None"""
    if spec.kind in (AggregatorKind.POWER_MEAN, AggregatorKind.WEIGHTED_POWER_MEAN):
        return float(spec.p)
    if spec.kind == AggregatorKind.QUASI_ARITHMETIC:
        if spec.g.kind == MonotoneMapKind.LN:
            return 0.0
        if spec.g.kind == MonotoneMapKind.POWER:
            return float(spec.g.q)
    return None


def _set_log_weights(spec: AggregatorSpec, n: int) -> np.ndarray:
    if spec.kind == AggregatorKind.WEIGHTED_POWER_MEAN:
        weights = np.asarray(spec.weights, dtype=np.float64)
        if weights.size != n:
            raise ShapeError("weights length differs from number of valid rows", weights.shape, (n,))
        return _log_weights(weights)
    return np.full(n, -math.log(n))


def aggregate(emb: np.ndarray, mask: Optional[np.ndarray], spec: AggregatorSpec) -> np.ndarray:
    """
    按聚合规格对有效行做逐维归约

    Args:
        emb: n×m 嵌入矩阵
        mask: 长度 n 的有效性掩码，None 表示全部有效
        spec: 聚合规格

    Returns:
        长度 m 的向量
    """
    x, idx = _valid_rows(emb, mask)
    n = x.shape[0]
    kind = spec.kind

    if kind == AggregatorKind.SUM:
        return np.sum(x, axis=0)
    if kind == AggregatorKind.MEAN:
        return np.mean(x, axis=0)
    if kind == AggregatorKind.MAX:
        return np.max(x, axis=0)
    if kind == AggregatorKind.MIN:
        return np.min(x, axis=0)
    if kind == AggregatorKind.LOGSUMEXP_MEAN:
        return logsumexp(x, axis=0) - math.log(n)
    if kind == AggregatorKind.QUASI_ARITHMETIC:
        g = spec.g.kind
        if g == MonotoneMapKind.IDENTITY:
            return np.mean(x, axis=0)
        if g == MonotoneMapKind.EXP:
            return logsumexp(x, axis=0) - math.log(n)

    p = _effective_power(spec)
    if p is None:
        raise ConfigurationError(f"unsupported aggregator kind '{kind}'", field_path='aggregator.kind')
    _check_positive(x, idx, kind)
    log_w = _set_log_weights(spec, n)
    return np.exp(_log_power_mean(np.log(x), p, log_w))


def aggregate_backward(emb: np.ndarray, mask: Optional[np.ndarray], spec: AggregatorSpec,
                       upstream_grad: np.ndarray) -> Tuple[np.ndarray, Optional[float]]:
    """
    聚合的反向传播

    Returns:
        (grad_emb, grad_p): grad_emb 与 emb 同形，无效行为 0；
        grad_p 仅对幂平均类聚合给出，其他情况为 None
    """
    emb = np.asarray(emb, dtype=np.float64)
    x, idx = _valid_rows(emb, mask)
    n, m = x.shape
    upstream = np.asarray(upstream_grad, dtype=np.float64).reshape(-1)
    if upstream.shape[0] != m:
        raise ShapeError("upstream gradient length differs from embedding width", upstream.shape, (m,))

    grad_valid = np.zeros_like(x)
    grad_p: Optional[float] = None
    kind = spec.kind
    g = spec.g.kind if kind == AggregatorKind.QUASI_ARITHMETIC else None

    if kind == AggregatorKind.SUM:
        grad_valid[:] = upstream[None, :]
    elif kind == AggregatorKind.MEAN or g == MonotoneMapKind.IDENTITY:
        grad_valid[:] = upstream[None, :] / n
    elif kind in (AggregatorKind.MAX, AggregatorKind.MIN):
        # np.argmax/argmin 取第一次出现，即最小行号
        rows = np.argmax(x, axis=0) if kind == AggregatorKind.MAX else np.argmin(x, axis=0)
        grad_valid[rows, np.arange(m)] = upstream
    elif kind == AggregatorKind.LOGSUMEXP_MEAN or g == MonotoneMapKind.EXP:
        grad_valid = softmax(x, axis=0) * upstream[None, :]
    else:
        p = _effective_power(spec)
        if p is None:
            raise ConfigurationError(f"unsupported aggregator kind '{kind}'", field_path='aggregator.kind')
        _check_positive(x, idx, kind)
        log_w = _set_log_weights(spec, n)
        grad_valid, grad_p_value = _power_mean_backward(np.log(x), p, log_w, upstream)
        if kind in (AggregatorKind.POWER_MEAN, AggregatorKind.WEIGHTED_POWER_MEAN):
            grad_p = grad_p_value

    grad_emb = np.zeros_like(emb)
    grad_emb[idx] = grad_valid
    return grad_emb, grad_p
