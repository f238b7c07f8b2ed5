#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
置换不变预测器 f(S) = ρ(aggregate(φ(s₁), …, φ(sₙ)))

主要功能:
1. 多层感知机 φ / ρ 的参数、前向与手写反向传播
2. 打包行 + 偏移量的变长集合批 SetBatch
3. SetModel: Deep Sets (求和/平均)、PointNet (最大) 与 Hölder 幂平均 Deep Sets
4. 幂集上的集合函数求值与检查点序列化
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.aggregators import aggregate, aggregate_backward
from app.schemas import FORMAT_VERSION, AggregatorKind, AggregatorSpec, MlpSpec
from app.utils.error_handler import (ConfigurationError, ContractViolationError, DomainError,
                                     ResourceError, ShapeError)
from app.utils.file_handler import load_json_file, save_json_file
from app.utils.logger import get_logger
from app.utils.numerics import (Rng, activation, activation_grad, as_matrix, glorot_uniform, matmul, sigmoid,
                                 softplus)

logger = get_logger(__name__)

POSITIVE_EPS = 1e-6
MAX_POWERSET_ELEMENTS = 12


@dataclass
class MlpCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


@dataclass
class MlpParams:
    """MLP 参数；spec 只有一个宽度时为恒等映射"""
    spec: MlpSpec
    weights: List[np.ndarray] = field(default_factory=list)
    biases: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def initialize(cls, spec: MlpSpec, rng: Rng) -> 'MlpParams':
        widths = spec.layer_widths
        weights = [glorot_uniform(widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)]
        biases = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]
        return cls(spec=spec, weights=weights, biases=biases)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, MlpCache]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_width:
            raise ShapeError("MLP input width mismatch", x.shape, (self.spec.in_width,))
        cache = MlpCache(inputs=[], pre_activations=[])
        a = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(a)
            z = matmul(a, w) + b
            cache.pre_activations.append(z)
            if layer < self.n_layers - 1:
                a = activation(z, self.spec.activation.value)
            elif self.spec.positive_output:
                a = softplus(z) + POSITIVE_EPS
            else:
                a = z
        if self.n_layers == 0 and self.spec.positive_output:
            raise ConfigurationError("identity map cannot enforce positive output", field_path='positive_output')
        return (a if self.n_layers else x.copy()), cache

    def backward(self, cache: MlpCache, grad_out: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
        """返回 (各层权重梯度, 各层偏置梯度, 输入梯度)"""
        grad = np.asarray(grad_out, dtype=np.float64)
        grad_w: List[np.ndarray] = [np.zeros_like(w) for w in self.weights]
        grad_b: List[np.ndarray] = [np.zeros_like(b) for b in self.biases]
        for layer in reversed(range(self.n_layers)):
            z = cache.pre_activations[layer]
            if layer < self.n_layers - 1:
                grad = grad * activation_grad(z, self.spec.activation.value)
            elif self.spec.positive_output:
                grad = grad * sigmoid(z)
            grad_w[layer] = matmul(cache.inputs[layer].T, grad)
            grad_b[layer] = np.sum(grad, axis=0)
            grad = matmul(grad, self.weights[layer].T)
        return grad_w, grad_b, grad

    def copy(self) -> 'MlpParams':
        return MlpParams(spec=self.spec, weights=[w.copy() for w in self.weights],
                         biases=[b.copy() for b in self.biases])


@dataclass
class SetBatch:
    """
    变长集合批: 所有元素按行打包在 elements 中，offsets 给出每个集合的起始行

    targets 为回归目标 (B,) / (B, out) 或分类标签 (B,) 整数。
    """
    elements: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.elements = np.ascontiguousarray(self.elements, dtype=np.float64)
        self.offsets = np.asarray(self.offsets, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets)
        if self.elements.ndim != 2 or self.elements.shape[1] < 1:
            raise ShapeError("elements must be a 2-D matrix with d >= 1", self.elements.shape, ())
        if self.offsets.size == 0:
            raise DomainError("a batch needs at least one set")
        if self.offsets[0] != 0:
            raise DomainError("offsets must start at 0", index=0)
        if np.any(np.diff(self.offsets) <= 0) or self.offsets[-1] >= self.elements.shape[0]:
            bad = int(np.flatnonzero(np.diff(np.append(self.offsets, self.elements.shape[0])) <= 0)[0])
            raise DomainError("offsets must be strictly increasing and every set non-empty", index=bad)
        if self.targets.shape[0] != self.offsets.size:
            raise ShapeError("targets length differs from number of sets", self.targets.shape, self.offsets.shape)

    @classmethod
    def from_sets(cls, sets: Sequence[np.ndarray], targets: Optional[Sequence[Any]] = None) -> 'SetBatch':
        mats = [as_matrix(s, f"set {i}") for i, s in enumerate(sets)]
        if not mats:
            raise DomainError("a batch needs at least one set")
        if any(m.shape[0] == 0 for m in mats):
            raise DomainError("every set must be non-empty")
        sizes = np.array([m.shape[0] for m in mats], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        if targets is None:
            targets = np.zeros(len(mats))
        return cls(elements=np.vstack(mats), offsets=offsets, targets=np.asarray(targets))

    @property
    def n_sets(self) -> int:
        return int(self.offsets.size)

    @property
    def dim(self) -> int:
        return int(self.elements.shape[1])

    @property
    def ends(self) -> np.ndarray:
        return np.append(self.offsets[1:], self.elements.shape[0])

    @property
    def sizes(self) -> np.ndarray:
        return self.ends - self.offsets

    def set_elements(self, i: int) -> np.ndarray:
        return self.elements[self.offsets[i]:self.ends[i]]

    def iter_sets(self) -> Iterator[np.ndarray]:
        for start, end in zip(self.offsets, self.ends):
            yield self.elements[start:end]

    def subset(self, indices: Sequence[int]) -> 'SetBatch':
        indices = list(indices)
        return SetBatch.from_sets([self.set_elements(i) for i in indices], self.targets[indices])


@dataclass
class ModelGrads:
    """与 SetModel 参数一一对应的梯度"""
    phi_weights: List[np.ndarray]
    phi_biases: List[np.ndarray]
    rho_weights: List[np.ndarray]
    rho_biases: List[np.ndarray]
    p: Optional[float] = None

    def arrays(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for w, b in zip(self.phi_weights, self.phi_biases):
            out.extend([w, b])
        for w, b in zip(self.rho_weights, self.rho_biases):
            out.extend([w, b])
        return out

    def flat(self) -> np.ndarray:
        parts = [a.reshape(-1) for a in self.arrays()]
        if self.p is not None:
            parts.append(np.array([self.p]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


@dataclass
class SetModel:
    """完整的置换不变预测器；p 仅在可学习幂平均时为可训练标量"""
    phi: MlpParams
    agg: AggregatorSpec
    rho: MlpParams
    p: Optional[float] = None
    revision: int = 0

    @property
    def learnable_p(self) -> bool:
        return self.agg.kind == AggregatorKind.POWER_MEAN and self.agg.learnable

    @property
    def latent_dim(self) -> int:
        return self.phi.spec.out_width

    @property
    def out_dim(self) -> int:
        return self.rho.spec.out_width

    def effective_aggregator(self) -> AggregatorSpec:
        if self.learnable_p:
            return self.agg.with_p(self.p)
        return self.agg

    def _arrays(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for mlp in (self.phi, self.rho):
            for w, b in zip(mlp.weights, mlp.biases):
                out.extend([w, b])
        return out

    def parameter_names(self) -> List[str]:
        names: List[str] = []
        for prefix, mlp in (('phi', self.phi), ('rho', self.rho)):
            for i in range(mlp.n_layers):
                names.extend([f"{prefix}.W{i}", f"{prefix}.b{i}"])
        if self.learnable_p:
            names.append('p')
        return names

    def flat_parameter_names(self) -> List[str]:
        """与 get_flat() 逐坐标对应的名称，例如 phi.W0[3]"""
        names: List[str] = []
        for name, a in zip(self.parameter_names(), self._arrays()):
            names.extend(f"{name}[{i}]" for i in range(a.size))
        if self.learnable_p:
            names.append('p')
        return names

    def get_flat(self) -> np.ndarray:
        """所有可训练参数展平为一个向量 (p 在最后)"""
        parts = [a.reshape(-1) for a in self._arrays()]
        if self.learnable_p:
            parts.append(np.array([self.p], dtype=np.float64))
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, vector: np.ndarray):
        """从展平向量写回参数，并使旧的前向缓存失效"""
        vector = np.asarray(vector, dtype=np.float64)
        expected = self.parameter_count()
        if vector.shape != (expected,):
            raise ShapeError("flat parameter vector has wrong length", vector.shape, (expected,))
        pos = 0
        for a in self._arrays():
            a[...] = vector[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if self.learnable_p:
            self.p = float(vector[pos])
        self.revision += 1

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self._arrays()) + (1 if self.learnable_p else 0))

    def copy(self) -> 'SetModel':
        return SetModel(phi=self.phi.copy(), agg=self.agg, rho=self.rho.copy(), p=self.p, revision=0)

    def to_dict(self) -> Dict[str, Any]:
        def mlp_dict(mlp: MlpParams) -> Dict[str, Any]:
            return {
                'spec': mlp.spec.model_dump(mode='json'),
                'weights': [w.reshape(-1).tolist() for w in mlp.weights],
                'biases': [b.tolist() for b in mlp.biases],
            }
        return {
            'format_version': FORMAT_VERSION,
            'aggregator': self.agg.model_dump(mode='json'),
            'phi': mlp_dict(self.phi),
            'rho': mlp_dict(self.rho),
            'p': self.p,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SetModel':
        if data.get('format_version') != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint format_version {data.get('format_version')!r}",
                                     field_path='format_version')

        def mlp_from(d: Dict[str, Any]) -> MlpParams:
            spec = MlpSpec.model_validate(d['spec'])
            widths = spec.layer_widths
            weights = [np.array(w, dtype=np.float64).reshape(widths[i], widths[i + 1])
                       for i, w in enumerate(d['weights'])]
            biases = [np.array(b, dtype=np.float64) for b in d['biases']]
            return MlpParams(spec=spec, weights=weights, biases=biases)

        p = data.get('p')
        return cls(phi=mlp_from(data['phi']), agg=AggregatorSpec.model_validate(data['aggregator']),
                   rho=mlp_from(data['rho']), p=None if p is None else float(p))


@dataclass
class ForwardCache:
    """前向传播中间量，用于反向传播"""
    model_id: int
    model_revision: int
    batch_id: int
    agg: AggregatorSpec
    phi_cache: MlpCache
    embeddings: np.ndarray
    pooled: np.ndarray
    rho_cache: MlpCache


def init_model(phi_spec: MlpSpec, agg: AggregatorSpec, rho_spec: MlpSpec, rng: Rng,
               p_init: float = 1.0) -> SetModel:
    """
    初始化模型: 权重 Glorot 均匀分布，偏置为 0，可学习 p 从 p_init (默认 Deep Sets 点 1.0) 开始
    """
    if phi_spec.out_width != rho_spec.in_width:
        raise ConfigurationError(
            f"phi output width {phi_spec.out_width} differs from rho input width {rho_spec.in_width}",
            field_path='model.rho_widths')
    if agg.kind == AggregatorKind.WEIGHTED_POWER_MEAN:
        # 固定的逐位置权重依赖元素顺序，模型不再置换不变
        raise ConfigurationError("weighted_power_mean is order-dependent and cannot pool a SetModel",
                                 field_path='model.aggregator.kind')
    if agg.requires_positive and not phi_spec.positive_output:
        raise ConfigurationError(f"aggregator {agg.kind.value} requires phi.positive_output",
                                 field_path='model.positive_output')
    if phi_spec.is_identity and phi_spec.positive_output:
        raise ConfigurationError("identity phi cannot enforce positive output", field_path='model.phi_widths')
    phi_rng, rho_rng = rng.spawn(2)
    phi = MlpParams.initialize(phi_spec, phi_rng)
    rho = MlpParams.initialize(rho_spec, rho_rng)
    p: Optional[float] = None
    if agg.kind == AggregatorKind.POWER_MEAN:
        p = float(p_init) if agg.learnable else float(agg.p)
    model = SetModel(phi=phi, agg=agg, rho=rho, p=p)
    logger.debug(f"模型初始化完成: phi={phi_spec.layer_widths}, agg={agg.kind.value}, "
                 f"rho={rho_spec.layer_widths}, 参数数={model.parameter_count()}")
    return model


def forward(model: SetModel, batch: SetBatch) -> Tuple[np.ndarray, ForwardCache]:
    """前向传播: 逐元素 φ、逐维聚合、ρ"""
    if batch.dim != model.phi.spec.in_width:
        raise ShapeError("batch element dimension differs from phi input width",
                         (batch.dim,), (model.phi.spec.in_width,))
    agg = model.effective_aggregator()
    embeddings, phi_cache = model.phi.forward(batch.elements)
    pooled = np.empty((batch.n_sets, embeddings.shape[1]))
    for i, (start, end) in enumerate(zip(batch.offsets, batch.ends)):
        pooled[i] = aggregate(embeddings[start:end], None, agg)
    predictions, rho_cache = model.rho.forward(pooled)
    cache = ForwardCache(model_id=id(model), model_revision=model.revision, batch_id=id(batch), agg=agg,
                         phi_cache=phi_cache, embeddings=embeddings, pooled=pooled, rho_cache=rho_cache)
    return predictions, cache


def predict(model: SetModel, batch: SetBatch) -> np.ndarray:
    return forward(model, batch)[0]


def model_parameter_count(model: SetModel) -> int:
    """可训练标量个数 (含可学习 p)"""
    return model.parameter_count()


def backward(model: SetModel, batch: SetBatch, cache: ForwardCache, loss_grad: np.ndarray) -> ModelGrads:
    """反向传播: 链式法则经过 ρ、聚合与 φ"""
    if cache.model_id != id(model) or cache.model_revision != model.revision or cache.batch_id != id(batch):
        raise ContractViolationError("forward cache does not match the current model/batch (stale cache)")
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    expected = (batch.n_sets, model.out_dim)
    if loss_grad.shape != expected:
        raise ShapeError("loss gradient shape mismatch", loss_grad.shape, expected)

    rho_w, rho_b, grad_pooled = model.rho.backward(cache.rho_cache, loss_grad)

    grad_emb = np.zeros_like(cache.embeddings)
    grad_p = 0.0 if model.learnable_p else None
    for i, (start, end) in enumerate(zip(batch.offsets, batch.ends)):
        g_emb, g_p = aggregate_backward(cache.embeddings[start:end], None, cache.agg, grad_pooled[i])
        grad_emb[start:end] = g_emb
        if grad_p is not None:
            grad_p += g_p

    phi_w, phi_b, _ = model.phi.backward(cache.phi_cache, grad_emb)
    return ModelGrads(phi_weights=phi_w, phi_biases=phi_b, rho_weights=rho_w, rho_biases=rho_b, p=grad_p)


def predict_set_function_over_powerset(model: SetModel, ground_elements: np.ndarray) -> Dict[frozenset, float]:
    """
    在地集 V 的所有非空子集上求模型的集合函数值

    Returns:
        子集 (元素下标的 frozenset) → 标量值
    """
    ground = np.atleast_2d(np.asarray(ground_elements, dtype=np.float64))
    n = ground.shape[0]
    if n > MAX_POWERSET_ELEMENTS:
        raise ResourceError(f"power set of {n} elements exceeds the limit of {MAX_POWERSET_ELEMENTS}")
    if n == 0:
        raise DomainError("ground set must be non-empty")
    if model.out_dim != 1:
        raise ConfigurationError("set-function view requires a scalar-output model", field_path='model.rho_widths')

    subsets = [frozenset(i for i in range(n) if mask >> i & 1) for mask in range(1, 2 ** n)]
    batch = SetBatch.from_sets([ground[sorted(s)] for s in subsets])
    values = predict(model, batch)[:, 0]
    return {s: float(v) for s, v in zip(subsets, values)}


def save_checkpoint(model: SetModel, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    """检查点序列化为单个 JSON 文档，所有参数按位往返"""
    data = model.to_dict()
    if extra:
        data['extra'] = extra
    return save_json_file(data, path)


def load_checkpoint(path: Union[str, Path]) -> Tuple[SetModel, Dict[str, Any]]:
    data = load_json_file(path)
    return SetModel.from_dict(data), data.get('extra', {})
