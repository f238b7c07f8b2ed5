#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
性质检查器 - 用穷举与解析方法验证置换不变性、模/次模性、梯度与同构求和

每个检查返回 CheckReport，passed 当且仅当 worst_violation ≤ tolerance。
同样的输入与种子给出完全相同的 worst_violation。
"""

import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from app.core.aggregators import MonotoneMap, sum_isomorphic_aggregate
from app.core.setnn import SetBatch, SetModel, backward, forward, predict
from app.core.training import compute_loss
from app.schemas import CheckReport, LossEnum, MonotoneMapKind, MonotoneMapSpec
from app.utils.error_handler import ConfigurationError, NumericalAbortError, ResourceError
from app.utils.logger import get_logger
from app.utils.numerics import Rng, logsumexp

logger = get_logger(__name__)

MAX_ENUMERATED_PERMUTATION_SIZE = 6
MAX_GROUND_SET_SIZE = 10
KINK_TOLERANCE = 1e-2
GRAD_CHECK_FLOOR = 1e-4
SUM_ISOMORPHISM_TOLERANCE = 1e-10

Predictor = Callable[[SetBatch], np.ndarray]
SetFunction = Union[Mapping[frozenset, float], Callable[[frozenset], float]]


def _report(name: str, worst: float, tol: float, witness: Any = None, skipped: int = 0) -> CheckReport:
    passed = bool(worst <= tol)
    report = CheckReport(name=name, passed=passed, worst_violation=float(worst), tolerance=tol,
                         witness=None if passed else witness, skipped=skipped)
    level = logger.info if passed else logger.warning
    level(f"检查 {name}: {'通过' if passed else '失败'} (worst={worst:.3g}, tol={tol:g})")
    return report


def as_predictor(model: Union[SetModel, Predictor, Any]) -> Predictor:
    """SetModel、带 predict 方法的对象或普通可调用对象统一为 batch → 预测"""
    if isinstance(model, SetModel):
        return lambda batch: predict(model, batch)
    if hasattr(model, 'predict'):
        return model.predict
    return model


@dataclass
class FirstElementProbe:
    """故意对顺序敏感的探针: 输出每个集合第一个元素的坐标"""

    def predict(self, batch: SetBatch) -> np.ndarray:
        return batch.elements[batch.offsets].copy()


# 置换不变性
def _permutations_for(n: int, n_perms: int, rng: Rng) -> List[np.ndarray]:
    if n <= MAX_ENUMERATED_PERMUTATION_SIZE:
        return [np.array(order) for order in itertools.permutations(range(n))]
    return [rng.permutation(n) for _ in range(n_perms)]


def check_permutation_invariance(model, sets: Sequence[np.ndarray], n_perms: int = 20, tol: float = 1e-9,
                                 rng: Optional[Rng] = None) -> CheckReport:
    """
    max |f(S) − f(πS)|，|S| ≤ 6 时枚举全部置换，否则采样 n_perms 个
    """
    if tol <= 0:
        raise ConfigurationError("tolerance must be positive", field_path='tol')
    run = as_predictor(model)
    rng = rng or Rng(0)
    worst, witness = 0.0, None
    for index, elements in enumerate(sets):
        s = np.atleast_2d(np.asarray(elements, dtype=np.float64))
        orders = _permutations_for(s.shape[0], n_perms, rng.child(index))
        out = run(SetBatch.from_sets([s[order] for order in orders]))
        deviation = np.max(np.abs(out - out[0]), axis=1)
        j = int(np.argmax(deviation))
        if deviation[j] > worst:
            worst = float(deviation[j])
            witness = {'set_index': index, 'permutation': orders[j].tolist(), 'deviation': worst}
    return _report('permutation_invariance', worst, tol, witness)


# 模性 / 次模性
def _value_table(f: SetFunction, n: int) -> np.ndarray:
    """按位掩码索引的集合函数值表，f(∅) = 0"""
    if n > MAX_GROUND_SET_SIZE:
        raise ResourceError(f"brute-force set-function checks are capped at |V| <= {MAX_GROUND_SET_SIZE}, got {n}")
    if n < 1:
        raise ConfigurationError("ground set must be non-empty", field_path='ground_set')
    lookup = f.__getitem__ if isinstance(f, Mapping) else f
    table = np.zeros(2 ** n)
    for mask in range(1, 2 ** n):
        table[mask] = float(lookup(frozenset(i for i in range(n) if mask >> i & 1)))
    return table


def _pair_gaps(table: np.ndarray) -> np.ndarray:
    """gap[S, T] = f(S) + f(T) − f(S∪T) − f(S∩T)，S、T 取全部非空子集"""
    masks = np.arange(1, table.size)
    union = masks[:, None] | masks[None, :]
    inter = masks[:, None] & masks[None, :]
    return table[masks][:, None] + table[masks][None, :] - table[union] - table[inter]


def _subset_indices(mask: int) -> List[int]:
    return [i for i in range(mask.bit_length()) if mask >> i & 1]


def _pair_witness(gaps: np.ndarray, flat_index: int) -> Dict[str, Any]:
    i, j = np.unravel_index(flat_index, gaps.shape)
    return {'S': _subset_indices(int(i) + 1), 'T': _subset_indices(int(j) + 1), 'gap': float(gaps[i, j])}


def check_modularity(f: SetFunction, n: int, tol: float = 1e-9) -> CheckReport:
    """max |f(S)+f(T) − f(S∪T) − f(S∩T)| 于所有非空 S, T ⊆ V"""
    gaps = _pair_gaps(_value_table(f, n))
    abs_gaps = np.abs(gaps)
    k = int(np.argmax(abs_gaps))
    return _report('modularity', float(abs_gaps.reshape(-1)[k]), tol, _pair_witness(gaps, k))


def check_submodularity(f: SetFunction, n: int, tol: float = 1e-9) -> CheckReport:
    """min f(S)+f(T) − f(S∪T) − f(S∩T)；worst_violation 为该最小值的负部"""
    gaps = _pair_gaps(_value_table(f, n))
    k = int(np.argmin(gaps))
    worst = max(0.0, -float(gaps.reshape(-1)[k]))
    return _report('submodularity', worst, tol, _pair_witness(gaps, k))


def cardinality_squared(subset: frozenset) -> float:
    """超模探针 f(S) = |S|²"""
    return float(len(subset) ** 2)


# 梯度检查
def grad_check(model: SetModel, batch: SetBatch, h: float = 1e-5, tol: float = 1e-5,
               loss: LossEnum = LossEnum.MSE) -> CheckReport:
    """
    反向传播梯度与中心差分的最大相对误差

    分母为 max(|解析|, |数值|, GRAD_CHECK_FLOOR·max(1, |loss|))。

    前向与后向单侧差分明显不一致的坐标位于折点 (例如 max 的平局)，计入 skipped。
    检查结束后参数恢复原值。

    Raises:
        ConfigurationError: h 不在 [1e-7, 1e-3]
        NumericalAbortError: 损失或梯度非有限
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigurationError(f"finite-difference step {h} outside [1e-7, 1e-3]", field_path='h')
    targets = batch.targets

    def loss_at(theta: np.ndarray) -> float:
        model.set_flat(theta)
        value, _ = compute_loss(loss, predict(model, batch), targets)
        return value

    theta = model.get_flat().copy()
    model.set_flat(theta)
    pred, cache = forward(model, batch)
    base, loss_grad = compute_loss(loss, pred, targets)
    analytic = backward(model, batch, cache, loss_grad).flat()
    if not (math.isfinite(base) and np.all(np.isfinite(analytic))):
        raise NumericalAbortError("non-finite loss or gradient in grad_check", tensor='gradient')

    floor = GRAD_CHECK_FLOOR * max(1.0, abs(base))
    names = model.flat_parameter_names()
    worst, witness, skipped = 0.0, None, 0
    try:
        for i in range(theta.size):
            step = np.zeros_like(theta)
            step[i] = h
            plus, minus = loss_at(theta + step), loss_at(theta - step)
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericalAbortError(f"non-finite loss while perturbing {names[i]}", tensor=names[i])
            numeric = (plus - minus) / (2.0 * h)
            fwd, bwd = (plus - base) / h, (base - minus) / h
            if abs(fwd - bwd) > KINK_TOLERANCE * max(1.0, abs(fwd), abs(bwd)):
                skipped += 1
                logger.warning(f"grad_check 跳过折点坐标 {names[i]}")
                continue
            err = abs(analytic[i] - numeric) / max(floor, abs(analytic[i]), abs(numeric))
            if err > worst:
                worst = err
                witness = {'parameter': names[i], 'analytic': float(analytic[i]), 'numeric': float(numeric)}
    finally:
        model.set_flat(theta)
    return _report('grad_check', worst, tol, witness, skipped)


# 同构求和
def check_sum_isomorphism(g: MonotoneMapSpec, sets: Sequence[np.ndarray],
                          tol: float = SUM_ISOMORPHISM_TOLERANCE) -> CheckReport:
    """
    组合聚合器 g(Σ g⁻¹(xᵢ)) 与逐元素直接求值比较；g = ln 时再与 logsumexp 比较，
    并检查 g(g⁻¹(y)) = y。误差为相对误差 (分母下限为 1)。
    """
    gmap = MonotoneMap(g)
    worst, witness = 0.0, None

    def record(err: float, info: Dict[str, Any]):
        nonlocal worst, witness
        if err > worst:
            worst, witness = err, info

    for index, elements in enumerate(sets):
        x = np.asarray(elements, dtype=np.float64)
        x = x.reshape(-1, 1) if x.ndim == 1 else x
        composed = sum_isomorphic_aggregate(x, None, g)
        with np.errstate(over='ignore', under='ignore'):
            inverse = gmap.inverse(x)
        # g⁻¹ 上溢或下溢的项无法直接求值，只参与 logsumexp 比较
        representable = np.isfinite(inverse)
        if g.kind in (MonotoneMapKind.LN, MonotoneMapKind.POWER):
            representable &= inverse > 0
        for j in range(x.shape[1]):
            if np.all(representable[:, j]):
                direct = float(gmap.forward(np.array(math.fsum(inverse[:, j]))))
                record(abs(composed[j] - direct) / max(1.0, abs(direct)),
                       {'set_index': index, 'dim': j, 'composed': float(composed[j]), 'direct': direct})
            if g.kind == MonotoneMapKind.LN:
                reference = float(logsumexp(x[:, j]))
                record(abs(composed[j] - reference) / max(1.0, abs(reference)),
                       {'set_index': index, 'dim': j, 'composed': float(composed[j]), 'logsumexp': reference})
        round_trip = np.where(representable, gmap.forward(np.where(representable, inverse, 1.0)), x)
        err = np.abs(round_trip - x) / np.maximum(1.0, np.abs(x))
        k = int(np.argmax(err))
        record(float(err.reshape(-1)[k]), {'set_index': index, 'round_trip_index': k})
    return _report(f'sum_isomorphism[{g.kind.value}]', worst, tol, witness)
