#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Janossy 池化 - 对置换敏感函数在置换上取平均以获得置换不变性

主要功能:
1. 完全枚举 (|S|! 个置换)
2. k 元限制: 对所有互异元素的有序 k 元组取平均，归一化常数 τ(|S|,k) = |S|!/(|S|−k)!
3. 规范排序 (单一置换)
4. 置换采样
5. 两两池化 (权重·值 分解) 的直接实现

求和统一使用逐列精确求和，结果与枚举顺序无关。
"""

import itertools
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.core.setnn import MlpParams, SetBatch
from app.schemas import ActivationEnum, JanossyKind, JanossyStrategySpec, MlpSpec
from app.utils.error_handler import DomainError, ResourceError, ShapeError
from app.utils.logger import get_logger
from app.utils.numerics import Rng, fsum_columns

logger = get_logger(__name__)

MAX_FULL_SET_SIZE = 8
MAX_TUPLES = 10 ** 6


@dataclass
class PermSensitiveFn:
    """
    置换敏感函数: 输入有序元组 (行堆叠成 k×d 矩阵)，输出潜向量

    arity 为 None 时接受任意长度的完整元组。
    """
    fn: Callable[[np.ndarray], np.ndarray]
    arity: Optional[int] = None

    def __call__(self, ordered: np.ndarray) -> np.ndarray:
        ordered = np.atleast_2d(np.asarray(ordered, dtype=np.float64))
        if self.arity is not None and ordered.shape[0] != self.arity:
            raise ShapeError("tuple length differs from function arity", ordered.shape, (self.arity,))
        return np.asarray(self.fn(ordered), dtype=np.float64).reshape(-1)


def mlp_perm_fn(d: int, arity: int, hidden: Sequence[int], out: int, rng: Rng,
                activation: str = 'tanh') -> PermSensitiveFn:
    """由拼接输入上的小型 MLP 构成的置换敏感函数"""
    spec = MlpSpec(layer_widths=[d * arity, *hidden, out], activation=ActivationEnum(activation))
    mlp = MlpParams.initialize(spec, rng)

    def apply(ordered: np.ndarray) -> np.ndarray:
        return mlp.forward(ordered.reshape(1, -1))[0][0]

    return PermSensitiveFn(fn=apply, arity=arity)


def _as_set(elements) -> np.ndarray:
    s = np.atleast_2d(np.asarray(elements, dtype=np.float64))
    if s.shape[0] == 0:
        raise DomainError("Janossy pooling of an empty set")
    return s


def _mean_of(outputs: List[np.ndarray]) -> np.ndarray:
    return fsum_columns(np.vstack(outputs)) / len(outputs)


def k_permutation_count(n: int, k: int) -> int:
    """τ(n, k) = n!/(n−k)!"""
    return math.perm(n, k)


def janossy_full(fn: PermSensitiveFn, elements) -> np.ndarray:
    """对全部 |S|! 个置换取平均"""
    s = _as_set(elements)
    n = s.shape[0]
    if n > MAX_FULL_SET_SIZE:
        raise ResourceError(f"full Janossy pooling over {n}! permutations exceeds |S| <= {MAX_FULL_SET_SIZE}")
    outputs = [fn(s[list(order)]) for order in itertools.permutations(range(n))]
    return _mean_of(outputs)


def janossy_k(fn: PermSensitiveFn, elements, k: int) -> np.ndarray:
    """k 元 Janossy 池化: 对所有互异元素的有序 k 元组取平均"""
    s = _as_set(elements)
    n = s.shape[0]
    if k < 1:
        raise DomainError("k must be >= 1", index=k)
    if k > n:
        raise DomainError(f"k = {k} exceeds set size {n}", index=k)
    if fn.arity is not None and fn.arity != k:
        raise ShapeError("function arity differs from k", (fn.arity,), (k,))
    tau = k_permutation_count(n, k)
    if tau > MAX_TUPLES:
        raise ResourceError(f"{tau} ordered {k}-tuples exceed the budget of {MAX_TUPLES}")
    outputs = [fn(s[list(order)]) for order in itertools.permutations(range(n), k)]
    return fsum_columns(np.vstack(outputs)) / tau


def canonical_order(elements, key_dim: int) -> np.ndarray:
    """按 key_dim 坐标升序，平局按整行字典序，再按原始下标"""
    s = _as_set(elements)
    if not 0 <= key_dim < s.shape[1]:
        raise DomainError(f"key_dim {key_dim} outside element dimension {s.shape[1]}", index=key_dim)
    # np.lexsort 以最后一个键为主键
    keys = [np.arange(s.shape[0])] + [s[:, j] for j in reversed(range(s.shape[1]))] + [s[:, key_dim]]
    return np.lexsort(keys)


def janossy_sorted(fn: PermSensitiveFn, elements, key_dim: int = 0) -> np.ndarray:
    """只在规范排序后的单一置换上求值"""
    s = _as_set(elements)
    return fn(s[canonical_order(s, key_dim)])


def janossy_sampled(fn: PermSensitiveFn, elements, num: int, rng: Rng) -> np.ndarray:
    """在 num 个均匀采样的置换上取平均"""
    s = _as_set(elements)
    if num < 1:
        raise DomainError("num must be >= 1", index=num)
    outputs = [fn(s[rng.permutation(s.shape[0])]) for _ in range(num)]
    return _mean_of(outputs)


def janossy_pool(fn: PermSensitiveFn, elements, strategy: JanossyStrategySpec,
                 rng: Optional[Rng] = None) -> np.ndarray:
    """按策略分派 Janossy 池化"""
    if strategy.kind == JanossyKind.FULL:
        return janossy_full(fn, elements)
    if strategy.kind == JanossyKind.KARY:
        return janossy_k(fn, elements, strategy.k)
    if strategy.kind == JanossyKind.SORTED:
        return janossy_sorted(fn, elements, strategy.key_dim)
    return janossy_sampled(fn, elements, strategy.num, rng or Rng(strategy.seed))


def pairwise_pool(weight_fn: Callable[[np.ndarray, np.ndarray], float],
                  value_fn: Callable[[np.ndarray], np.ndarray], elements) -> np.ndarray:
    """
    两两池化的直接实现: (1/τ(|S|,2))·Σ_{i≠j} w(sᵢ,sⱼ)·v(sⱼ)
    """
    s = _as_set(elements)
    n = s.shape[0]
    if n < 2:
        raise DomainError(f"pairwise pooling needs at least two elements, got {n}", index=n)
    terms = []
    for i in range(n):
        for j in range(n):
            if i != j:
                terms.append(float(weight_fn(s[i], s[j])) * np.asarray(value_fn(s[j]), dtype=np.float64))
    return fsum_columns(np.vstack(terms)) / k_permutation_count(n, 2)


def pairwise_as_perm_fn(weight_fn: Callable[[np.ndarray, np.ndarray], float],
                        value_fn: Callable[[np.ndarray], np.ndarray]) -> PermSensitiveFn:
    """把 权重·值 分解包装成二元置换敏感函数"""
    def apply(pair: np.ndarray) -> np.ndarray:
        return float(weight_fn(pair[0], pair[1])) * np.asarray(value_fn(pair[1]), dtype=np.float64)
    return PermSensitiveFn(fn=apply, arity=2)


@dataclass
class JanossyModel:
    """ρ(janossy_pool(fn, S))，仅用于推理"""
    fn: PermSensitiveFn
    strategy: JanossyStrategySpec
    rho: Optional[MlpParams] = None

    def predict(self, batch: SetBatch) -> np.ndarray:
        rng = Rng(self.strategy.seed)
        pooled = np.vstack([janossy_pool(self.fn, s, self.strategy, rng.child(i))
                            for i, s in enumerate(batch.iter_sets())])
        if self.rho is None:
            return pooled
        return self.rho.forward(pooled)[0]
