#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数值基础模块 - 64位浮点矩阵运算、可复现随机数和数值稳定的标量核函数

所有矩阵均为 float64、行优先 (C order) 的 numpy 数组。
"""

import math
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np

from app.utils.error_handler import DomainError, ShapeError

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]

SOFTPLUS_LINEAR_THRESHOLD = 30.0
ACTIVATIONS = ('relu', 'tanh', 'softplus', 'identity')


def as_matrix(data: ArrayLike, name: str = 'matrix') -> np.ndarray:
    """转换为二维 float64 行优先矩阵并检查有限性"""
    matrix = np.array(data, dtype=np.float64, order='C')
    if matrix.ndim == 1:
        matrix = matrix.reshape(1, -1)
    if matrix.ndim != 2:
        raise ShapeError(f"{name} must be 2-D", matrix.shape, ())
    if not np.all(np.isfinite(matrix)):
        raise DomainError(f"{name} contains non-finite entries")
    return matrix


def as_vector(data: ArrayLike, name: str = 'vector') -> np.ndarray:
    """转换为一维 float64 向量"""
    vector = np.array(data, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise DomainError(f"{name} contains non-finite entries")
    return vector


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """矩阵乘法，维度不匹配时抛出带两个形状的 ShapeError"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul dimension mismatch", a.shape, b.shape)
    return a @ b


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    clipped = np.minimum(x, SOFTPLUS_LINEAR_THRESHOLD)
    return np.where(x > SOFTPLUS_LINEAR_THRESHOLD, x, np.log1p(np.exp(clipped)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    """逐元素激活函数"""
    x = np.asarray(x, dtype=np.float64)
    if kind == 'relu':
        return np.maximum(x, 0.0)
    if kind == 'tanh':
        return np.tanh(x)
    if kind == 'softplus':
        return softplus(x)
    if kind == 'identity':
        return x.copy()
    raise DomainError(f"unknown activation '{kind}'")


def activation_grad(x: np.ndarray, kind: str) -> np.ndarray:
    """激活函数对其输入的逐元素导数 (relu 在 0 处取 0)"""
    x = np.asarray(x, dtype=np.float64)
    if kind == 'relu':
        return (x > 0).astype(np.float64)
    if kind == 'tanh':
        return 1.0 - np.tanh(x) ** 2
    if kind == 'softplus':
        return sigmoid(x)
    if kind == 'identity':
        return np.ones_like(x)
    raise DomainError(f"unknown activation '{kind}'")


def logsumexp(v: ArrayLike, axis: Optional[int] = None) -> Union[float, np.ndarray]:
    """
    数值稳定的 ln Σ exp(v)，通过减去最大值避免溢出

    axis 为 None 时把输入展平并返回标量。
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DomainError("logsumexp of an empty input")
    if axis is None:
        v = v.reshape(-1)
        v_max = np.max(v)
        if np.isneginf(v_max):
            return float('-inf')
        return float(v_max + np.log(np.sum(np.exp(v - v_max))))

    v_max = np.max(v, axis=axis, keepdims=True)
    safe_max = np.where(np.isfinite(v_max), v_max, 0.0)
    total = np.sum(np.exp(v - safe_max), axis=axis, keepdims=True)
    with np.errstate(divide='ignore'):
        result = safe_max + np.log(total)
    return np.squeeze(result, axis=axis)


def softmax(v: np.ndarray, axis: int = 0) -> np.ndarray:
    """最大值平移的 softmax"""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def fsum_columns(stack: np.ndarray) -> np.ndarray:
    """逐列精确求和 (math.fsum)，结果与行顺序无关"""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim == 1:
        stack = stack.reshape(-1, 1)
    return np.array([math.fsum(stack[:, j]) for j in range(stack.shape[1])], dtype=np.float64)


def pairwise_sum(values: Iterable[float]) -> float:
    """成对树形求和，规约顺序固定"""
    items: List[float] = [float(v) for v in values]
    if not items:
        return 0.0
    while len(items) > 1:
        merged = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def glorot_uniform(fan_in: int, fan_out: int, rng: 'Rng') -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Rng:
    """
    基于计数器 (Philox) 的可复现随机数发生器

    相同 seed 产生相同序列；spawn/child 产生互不相关且可复现的子流。
    实例只归单一调用方所有，并行任务应先拆分。
    """

    def __init__(self, seed: int = 0, _seed_sequence: Optional[np.random.SeedSequence] = None):
        if _seed_sequence is None:
            if seed < 0 or seed >= 2 ** 64:
                raise DomainError("seed must be a 64-bit unsigned integer", index=seed)
            _seed_sequence = np.random.SeedSequence(int(seed))
        self.seed = int(_seed_sequence.entropy)
        self._seed_sequence = _seed_sequence
        self.generator = np.random.Generator(np.random.Philox(_seed_sequence))

    def spawn(self, n: int) -> List['Rng']:
        """拆分出 n 个独立子流"""
        return [Rng(_seed_sequence=child) for child in self._seed_sequence.spawn(n)]

    def child(self, *key: int) -> 'Rng':
        """按固定路径派生子流，与调用顺序无关"""
        seq = np.random.SeedSequence(self._seed_sequence.entropy,
                                     spawn_key=tuple(self._seed_sequence.spawn_key) + tuple(key))
        return Rng(_seed_sequence=seq)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.normal(loc, scale, size=size)

    def gamma(self, shape: float, scale: float = 1.0, size=None) -> np.ndarray:
        return self.generator.gamma(shape, scale, size=size)

    def integers(self, low: int, high: Optional[int] = None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random_raw(self, n: int) -> np.ndarray:
        """原始 64 位输出，用于确定性检查"""
        return self.generator.bit_generator.random_raw(n)
