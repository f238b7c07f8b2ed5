#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
训练模块 - 损失函数、优化器、训练循环与评估指标

主要功能:
1. 均方误差与交叉熵损失 (含对预测的梯度)
2. SGD / Adam 更新，可学习 p 与权重共用优化器，更新后截断到 p_clamp
3. 确定性训练循环: 固定初始化、固定洗牌顺序，出现非有限值立即中止
4. 评估指标 RMSE / MAE / 准确率
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.setnn import ModelGrads, SetBatch, SetModel, backward, forward, model_parameter_count, predict
from app.schemas import (EpochRecord, LossEnum, Metrics, OptimizerEnum, OptimizerSpec, TrainConfig,
                         TrainReport)
from app.utils.error_handler import ConfigurationError, NumericalAbortError, ShapeError
from app.utils.logger import get_logger
from app.utils.numerics import Rng, logsumexp, pairwise_sum, softmax
from app.utils.performance_monitor import PerformanceMonitor

logger = get_logger(__name__)


# 损失函数
def _regression_targets(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """把目标整理成与 pred 同形；元素个数不符时抛出 ShapeError"""
    target = np.asarray(target, dtype=np.float64)
    if target.size != pred.size:
        raise ShapeError("prediction and target shapes differ", pred.shape, target.shape)
    return target.reshape(pred.shape)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """均方误差 (对所有元素取平均) 及其对 pred 的梯度"""
    pred = np.asarray(pred, dtype=np.float64)
    target = _regression_targets(pred, target)
    diff = pred - target
    loss = float(np.mean(diff ** 2))
    grad = 2.0 * diff / diff.size
    return loss, grad


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """平均交叉熵 (最大值平移 softmax) 及其对 logits 的梯度"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.size != logits.shape[0]:
        raise ShapeError("logits and labels shapes differ", logits.shape, labels.shape)
    labels = labels.astype(np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ShapeError("label index outside number of classes", labels.shape, logits.shape)
    b = logits.shape[0]
    log_z = logsumexp(logits, axis=1)
    loss = float(np.mean(log_z - logits[np.arange(b), labels]))
    grad = softmax(logits, axis=1)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def compute_loss(kind: LossEnum, pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    if kind == LossEnum.CROSS_ENTROPY:
        return cross_entropy_loss(pred, target)
    return mse_loss(pred, target)


# 优化器
@dataclass
class OptimizerState:
    """优化器状态 (Adam 的一阶/二阶矩与步数)"""
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            't': self.t,
            'm': None if self.m is None else self.m.tolist(),
            'v': None if self.v is None else self.v.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OptimizerState':
        return cls(t=int(data.get('t', 0)),
                   m=None if data.get('m') is None else np.array(data['m'], dtype=np.float64),
                   v=None if data.get('v') is None else np.array(data['v'], dtype=np.float64))


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[np.ndarray, OptimizerState]:
    """带偏差修正的 Adam 更新"""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError("parameter and gradient shapes differ", params.shape, grads.shape)
    m = np.zeros_like(params) if state.m is None else state.m
    v = np.zeros_like(params) if state.v is None else state.v
    if m.shape != params.shape or v.shape != params.shape:
        raise ShapeError("optimizer state shape differs from parameters", m.shape, params.shape)
    t = state.t + 1
    m = beta1 * m + (1.0 - beta1) * grads
    v = beta2 * v + (1.0 - beta2) * grads ** 2
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, OptimizerState(t=t, m=m, v=v)


def sgd_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState,
             lr: float) -> Tuple[np.ndarray, OptimizerState]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeError("parameter and gradient shapes differ", params.shape, grads.shape)
    return params - lr * grads, OptimizerState(t=state.t + 1)


def optimizer_step(spec: OptimizerSpec, params: np.ndarray, grads: np.ndarray,
                   state: OptimizerState) -> Tuple[np.ndarray, OptimizerState]:
    if spec.kind == OptimizerEnum.ADAM:
        return adam_step(params, grads, state, spec.lr, spec.beta1, spec.beta2, spec.eps)
    return sgd_step(params, grads, state, spec.lr)


def clamp_p(model: SetModel, p_clamp: Tuple[float, float]):
    """把可学习 p 截断到 [p_min, p_max]"""
    if model.learnable_p:
        p_min, p_max = p_clamp
        model.p = float(min(max(model.p, p_min), p_max))


def apply_update(model: SetModel, grads: ModelGrads, spec: OptimizerSpec, state: OptimizerState,
                 p_clamp: Tuple[float, float]) -> OptimizerState:
    """一次优化步: 更新所有参数 (含 p)，随后截断 p"""
    new_params, new_state = optimizer_step(spec, model.get_flat(), grads.flat(), state)
    model.set_flat(new_params)
    clamp_p(model, p_clamp)
    return new_state


# 评估
def _first_non_finite(named: Sequence[Tuple[str, np.ndarray]]) -> Optional[str]:
    for name, value in named:
        if not np.all(np.isfinite(value)):
            return name
    return None


def evaluate(model: SetModel, data: SetBatch, loss: LossEnum = LossEnum.MSE,
             metrics: Sequence[str] = ('rmse', 'mae', 'accuracy')) -> Metrics:
    """在全部集合上计算指标，不修改模型"""
    pred = predict(model, data)
    loss_value, _ = compute_loss(loss, pred, data.targets)
    result = Metrics(loss=loss_value)
    if loss == LossEnum.CROSS_ENTROPY:
        if 'accuracy' in metrics:
            correct = (np.argmax(pred, axis=1) == np.asarray(data.targets).astype(np.int64).reshape(-1))
            result.accuracy = float(np.mean(correct))
        return result
    err = pred - _regression_targets(pred, data.targets)
    if 'rmse' in metrics:
        result.rmse = math.sqrt(pairwise_sum((err ** 2).reshape(-1)) / err.size)
    if 'mae' in metrics:
        result.mae = pairwise_sum(np.abs(err).reshape(-1)) / err.size
    return result


# 训练循环
@dataclass
class TrainState:
    """可恢复的训练状态"""
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    epochs_done: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {'optimizer': self.optimizer.to_dict(), 'epochs_done': self.epochs_done}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainState':
        return cls(optimizer=OptimizerState.from_dict(data.get('optimizer', {})),
                   epochs_done=int(data.get('epochs_done', 0)))


def _epoch_record(epoch: int, split: str, metrics: Metrics, p: Optional[float]) -> EpochRecord:
    return EpochRecord(epoch=epoch, split=split, loss=metrics.loss, rmse=metrics.rmse,
                       mae=metrics.mae, accuracy=metrics.accuracy, p=p)


def train(model: SetModel, train_set: SetBatch, val_set: Optional[SetBatch], cfg: TrainConfig,
          state: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[int, SetModel], None]] = None) -> Tuple[SetModel, TrainReport]:
    """
    训练模型 (原地更新并返回)

    洗牌顺序由 (cfg.seed, epoch) 决定，因此从检查点恢复后的下一轮与不间断训练完全一致。

    Raises:
        ConfigurationError: 损失与任务类型不匹配
        NumericalAbortError: 出现非有限的损失、预测或梯度
    """
    if cfg.loss == LossEnum.CROSS_ENTROPY and model.out_dim < 2:
        raise ConfigurationError("cross_entropy requires at least two output classes", field_path='train.loss')
    state = state or TrainState()
    monitor = PerformanceMonitor()
    shuffle_rng = Rng(cfg.seed)
    report = TrainReport(parameter_count=model_parameter_count(model))
    first_epoch = state.epochs_done + 1
    last_epoch = state.epochs_done + cfg.epochs

    for epoch in range(first_epoch, last_epoch + 1):
        with monitor.measure_time('epoch'):
            order = shuffle_rng.child(epoch).permutation(train_set.n_sets)
            for start in range(0, train_set.n_sets, cfg.batch_size):
                batch = train_set.subset(order[start:start + cfg.batch_size])
                pred, cache = forward(model, batch)
                loss_value, loss_grad = compute_loss(cfg.loss, pred, batch.targets)
                grads = backward(model, batch, cache, loss_grad)
                named = [('loss', np.array(loss_value)), ('predictions', pred)]
                named += list(zip(model.parameter_names(), _grad_arrays(grads)))
                bad = _first_non_finite(named)
                if bad is not None:
                    raise NumericalAbortError(f"non-finite value at epoch {epoch}", tensor=bad,
                                              partial_history=list(report.epochs))
                state.optimizer = apply_update(model, grads, cfg.optimizer, state.optimizer, cfg.p_clamp)
            state.epochs_done = epoch

        train_metrics = evaluate(model, train_set, cfg.loss)
        report.epochs.append(_epoch_record(epoch, 'train', train_metrics, model.p))
        val_metrics = None
        if val_set is not None:
            val_metrics = evaluate(model, val_set, cfg.loss)
            report.epochs.append(_epoch_record(epoch, 'val', val_metrics, model.p))
        if model.learnable_p:
            report.p_trajectory.append(model.p)
        report.final_train, report.final_val = train_metrics, val_metrics

        if epoch % cfg.log_every == 0 or epoch == last_epoch:
            val_text = f", val_loss={val_metrics.loss:.6g}" if val_metrics else ""
            p_text = f", p={model.p:.4f}" if model.learnable_p else ""
            logger.info(f"epoch {epoch}/{last_epoch}: train_loss={train_metrics.loss:.6g}{val_text}{p_text}")
        if on_epoch is not None:
            on_epoch(epoch, model)

    report.final_p = model.p
    report.seconds = monitor.total_seconds('epoch')
    return model, report


def _grad_arrays(grads: ModelGrads) -> List[np.ndarray]:
    arrays = grads.arrays()
    if grads.p is not None:
        arrays.append(np.array([grads.p]))
    return arrays


EPOCH_CSV_HEADER = ('epoch', 'split', 'loss', 'rmse', 'mae', 'accuracy', 'p')


def epoch_rows(report: TrainReport) -> List[Tuple[Any, ...]]:
    """训练报告的逐轮 CSV 行"""
    return [(r.epoch, r.split, r.loss, r.rmse, r.mae, r.accuracy, r.p) for r in report.epochs]
