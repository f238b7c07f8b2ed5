#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
数据模型定义
使用Pydantic定义配置、规格和报告的数据结构，所有 JSON 文档都从这里序列化
"""

import math
from enum import Enum
from typing import Any, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

FORMAT_VERSION = 1
SIMPLEX_TOLERANCE = 1e-12


# 枚举类型定义
class AggregatorKind(str, Enum):
    """聚合算子种类"""
    SUM = "sum"
    MEAN = "mean"
    MAX = "max"
    MIN = "min"
    LOGSUMEXP_MEAN = "logsumexp_mean"
    POWER_MEAN = "power_mean"
    QUASI_ARITHMETIC = "quasi_arithmetic"
    WEIGHTED_POWER_MEAN = "weighted_power_mean"


class MonotoneMapKind(str, Enum):
    """拟算术平均使用的单调映射 g"""
    IDENTITY = "identity"
    LN = "ln"
    EXP = "exp"
    POWER = "power"


class ActivationEnum(str, Enum):
    RELU = "relu"
    TANH = "tanh"


class TaskKind(str, Enum):
    """合成任务种类"""
    MEDIAN = "median"
    MAX_OF_SET = "max_of_set"
    SUM_OF_SET = "sum_of_set"
    MEAN_OF_SET = "mean_of_set"
    RANGE = "range"
    CARDINALITY = "cardinality"
    TOY_POINT_CLOUD = "toy_point_cloud"


class DistributionEnum(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"


class PointCloudClass(str, Enum):
    SPHERE = "sphere"
    CUBE = "cube"
    PLANE = "plane"


class LossEnum(str, Enum):
    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class OptimizerEnum(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class SearchStrategyEnum(str, Enum):
    GRID = "grid"
    GRADIENT = "gd"
    BAYES = "bayes"


class DirectionEnum(str, Enum):
    MINIMIZE = "minimize"
    MAXIMIZE = "maximize"


class JanossyKind(str, Enum):
    FULL = "full"
    KARY = "kary"
    SORTED = "sorted"
    SAMPLED = "sampled"


# 聚合规格
class MonotoneMapSpec(BaseModel):
    """单调映射 g 及其参数"""
    model_config = ConfigDict(frozen=True)

    kind: MonotoneMapKind = MonotoneMapKind.IDENTITY
    q: Optional[float] = Field(None, description="POWER 映射的指数")

    @model_validator(mode='after')
    def _check_power(self):
        if self.kind == MonotoneMapKind.POWER:
            if self.q is None or not math.isfinite(self.q):
                raise ValueError("power map requires a finite exponent q")
        return self


class AggregatorSpec(BaseModel):
    """聚合算子规格 (带标签的变体)"""
    model_config = ConfigDict(frozen=True)

    kind: AggregatorKind = AggregatorKind.MEAN
    p: Optional[float] = Field(None, description="幂平均指数")
    learnable: bool = Field(False, description="p 是否参与训练")
    g: Optional[MonotoneMapSpec] = Field(None, description="拟算术平均的映射")
    weights: Optional[List[float]] = Field(None, description="加权幂平均的单纯形权重")

    @model_validator(mode='after')
    def _check_variant(self):
        if self.kind in (AggregatorKind.POWER_MEAN, AggregatorKind.WEIGHTED_POWER_MEAN):
            if self.p is None or not math.isfinite(self.p):
                raise ValueError(f"{self.kind.value} requires a finite p (use max/min for infinite limits)")
        if self.learnable and self.kind != AggregatorKind.POWER_MEAN:
            raise ValueError("only power_mean supports a learnable p")
        if self.kind == AggregatorKind.QUASI_ARITHMETIC and self.g is None:
            raise ValueError("quasi_arithmetic requires a monotone map g")
        if self.kind == AggregatorKind.WEIGHTED_POWER_MEAN:
            if not self.weights:
                raise ValueError("weighted_power_mean requires weights")
            if any(w < 0 or not math.isfinite(w) for w in self.weights):
                raise ValueError("weights must be finite and nonnegative")
            if abs(math.fsum(self.weights) - 1.0) > SIMPLEX_TOLERANCE:
                raise ValueError("weights must sum to 1")
        return self

    @property
    def requires_positive(self) -> bool:
        """该聚合是否要求输入严格为正"""
        if self.kind in (AggregatorKind.POWER_MEAN, AggregatorKind.WEIGHTED_POWER_MEAN):
            return True
        if self.kind == AggregatorKind.QUASI_ARITHMETIC and self.g is not None:
            return self.g.kind in (MonotoneMapKind.LN, MonotoneMapKind.POWER)
        return False

    def with_p(self, p: float) -> 'AggregatorSpec':
        return self.model_copy(update={'p': float(p)})


class MlpSpec(BaseModel):
    """多层感知机规格；只有一个宽度时表示恒等映射"""
    model_config = ConfigDict(frozen=True)

    layer_widths: List[int] = Field(..., min_length=1, description="输入 → … → 输出 的宽度")
    activation: ActivationEnum = ActivationEnum.RELU
    positive_output: bool = False

    @field_validator('layer_widths')
    @classmethod
    def _check_widths(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError("all widths must be >= 1")
        return v

    @property
    def is_identity(self) -> bool:
        return len(self.layer_widths) == 1

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]


class JanossyStrategySpec(BaseModel):
    """Janossy 池化策略"""
    model_config = ConfigDict(frozen=True)

    kind: JanossyKind = JanossyKind.FULL
    k: int = Field(2, ge=1)
    key_dim: int = Field(0, ge=0)
    num: int = Field(64, ge=1)
    seed: int = Field(0, ge=0)


# 任务规格
class TaskSpec(BaseModel):
    """合成任务描述"""
    model_config = ConfigDict(frozen=True)

    kind: TaskKind = TaskKind.MEDIAN
    distribution: DistributionEnum = DistributionEnum.UNIFORM
    set_size: Optional[int] = Field(None, ge=1, description="固定集合大小 M")
    set_size_range: Optional[Tuple[int, int]] = Field(None, description="集合大小范围 [M_lo, M_hi]")
    element_dim: int = Field(1, ge=1)
    classes: List[PointCloudClass] = Field(
        default_factory=lambda: [PointCloudClass.SPHERE, PointCloudClass.CUBE, PointCloudClass.PLANE])
    points_per_cloud: int = Field(32, ge=1)
    noise_sigma: float = Field(0.05, ge=0.0)
    positive_shift: bool = Field(True, description="为幂平均兼容而平移高斯元素 (+5)")

    @model_validator(mode='after')
    def _check_sizes(self):
        if self.set_size_range is not None:
            lo, hi = self.set_size_range
            if lo < 1 or hi < lo:
                raise ValueError("set_size_range must satisfy 1 <= M_lo <= M_hi")
        elif self.set_size is None and self.kind != TaskKind.TOY_POINT_CLOUD:
            raise ValueError("either set_size or set_size_range is required")
        if self.kind == TaskKind.TOY_POINT_CLOUD:
            if self.element_dim != 3:
                raise ValueError("toy_point_cloud requires element_dim = 3")
            if len(self.classes) < 2:
                raise ValueError("toy_point_cloud requires at least two classes")
        return self

    @property
    def is_classification(self) -> bool:
        return self.kind == TaskKind.TOY_POINT_CLOUD

    @property
    def n_outputs(self) -> int:
        return len(self.classes) if self.is_classification else 1

    @property
    def power_mean_compatible(self) -> bool:
        """元素坐标是否保证严格为正"""
        if self.kind == TaskKind.TOY_POINT_CLOUD:
            return False
        if self.distribution == DistributionEnum.GAUSSIAN:
            return self.positive_shift
        return True

    def size_bounds(self) -> Tuple[int, int]:
        if self.kind == TaskKind.TOY_POINT_CLOUD:
            return self.points_per_cloud, self.points_per_cloud
        if self.set_size_range is not None:
            return self.set_size_range
        return self.set_size, self.set_size


# 训练配置
class OptimizerSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: OptimizerEnum = OptimizerEnum.ADAM
    lr: float = Field(0.001, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class TrainConfig(BaseModel):
    """训练配置"""
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=1)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    seed: int = Field(0, ge=0)
    loss: LossEnum = LossEnum.MSE
    p_clamp: Tuple[float, float] = (-10.0, 10.0)
    log_every: int = Field(10, ge=1)

    @field_validator('p_clamp')
    @classmethod
    def _check_clamp(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        if not v[0] < v[1]:
            raise ValueError("p_clamp requires p_min < p_max")
        return v


class SearchConfig(BaseModel):
    """指数搜索配置"""
    model_config = ConfigDict(frozen=True)

    strategy: SearchStrategyEnum = SearchStrategyEnum.GRID
    step: float = Field(0.5, gt=0.0)
    trials: int = Field(30, ge=2)
    init_points: int = Field(5, ge=2)
    p_range: Tuple[float, float] = (-10.0, 10.0)
    direction: DirectionEnum = DirectionEnum.MINIMIZE
    seed: int = Field(0, ge=0)
    length_scale: float = Field(2.0, gt=0.0)
    jitter: float = Field(1e-6, gt=0.0)
    candidates: int = Field(1000, ge=2)

    @model_validator(mode='after')
    def _check_budget(self):
        if self.trials < self.init_points:
            raise ValueError("trials must be >= init_points")
        if not self.p_range[0] < self.p_range[1]:
            raise ValueError("p_range requires p_min < p_max")
        return self


# 实验配置
class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    phi_widths: List[int] = Field(default_factory=lambda: [1, 32, 16], min_length=1)
    rho_widths: List[int] = Field(default_factory=lambda: [16, 32, 1], min_length=1)
    activation: ActivationEnum = ActivationEnum.RELU
    aggregator: AggregatorSpec = Field(default_factory=AggregatorSpec)
    positive_output: Optional[bool] = Field(None, description="缺省时由聚合算子决定")

    def phi_spec(self) -> MlpSpec:
        positive = self.positive_output
        if positive is None:
            positive = self.aggregator.requires_positive
        return MlpSpec(layer_widths=self.phi_widths, activation=self.activation, positive_output=positive)

    def rho_spec(self) -> MlpSpec:
        return MlpSpec(layer_widths=self.rho_widths, activation=self.activation)

    def with_latent(self, n: int) -> 'ModelConfig':
        phi = list(self.phi_widths[:-1]) + [n]
        rho = [n] + list(self.rho_widths[1:]) if len(self.rho_widths) > 1 else [n]
        return self.model_copy(update={'phi_widths': phi, 'rho_widths': rho})


class LoggingConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    level: str = "INFO"

    @field_validator('level')
    @classmethod
    def _check_level(cls, v: str) -> str:
        if v.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ValueError(f"unknown log level '{v}'")
        return v.upper()


class ExperimentConfig(BaseModel):
    """一次可复现实验的完整配置"""
    model_config = ConfigDict(frozen=True)

    format_version: int = FORMAT_VERSION
    task: TaskSpec = Field(default_factory=lambda: TaskSpec(set_size=8))
    n_sets: int = Field(1000, ge=1)
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    dataset_path: Optional[str] = None
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    search: Optional[SearchConfig] = None
    janossy: JanossyStrategySpec = Field(default_factory=JanossyStrategySpec)
    latent_dims: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    output_dir: str = "runs/default"
    seed: int = Field(0, ge=0)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    @model_validator(mode='after')
    def _check_consistency(self):
        if self.format_version != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {self.format_version}")
        if self.model.phi_widths[0] != self.task.element_dim:
            raise ValueError("model.phi_widths[0] must equal task.element_dim")
        if self.model.phi_widths[-1] != self.model.rho_widths[0]:
            raise ValueError("model.phi_widths[-1] must equal model.rho_widths[0]")
        if self.model.rho_widths[-1] != self.task.n_outputs:
            raise ValueError(f"model.rho_widths[-1] must equal {self.task.n_outputs} for this task")
        if any(f <= 0 for f in self.split) or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        if self.model.aggregator.requires_positive and self.model.positive_output is False:
            raise ValueError("model.positive_output cannot be false for a positivity-requiring aggregator")
        return self


# 报告模型
class CheckReport(BaseModel):
    """性质检查报告"""
    name: str
    passed: bool
    worst_violation: float
    tolerance: float
    witness: Optional[Any] = None
    skipped: int = 0


class SearchTrial(BaseModel):
    trial: int
    p: float
    objective: float
    seconds: float


class SearchResult(BaseModel):
    """指数搜索结果"""
    format_version: int = FORMAT_VERSION
    strategy: SearchStrategyEnum
    best_p: float
    best_objective: float
    history: List[SearchTrial] = Field(default_factory=list)


class EpochRecord(BaseModel):
    epoch: int
    split: str
    loss: float
    rmse: Optional[float] = None
    mae: Optional[float] = None
    accuracy: Optional[float] = None
    p: Optional[float] = None


class Metrics(BaseModel):
    """评估指标"""
    loss: float = 0.0
    rmse: Optional[float] = None
    mae: Optional[float] = None
    accuracy: Optional[float] = Field(None, ge=0.0, le=1.0)


class TrainReport(BaseModel):
    """训练报告"""
    format_version: int = FORMAT_VERSION
    epochs: List[EpochRecord] = Field(default_factory=list)
    final_train: Optional[Metrics] = None
    final_val: Optional[Metrics] = None
    p_trajectory: List[float] = Field(default_factory=list)
    final_p: Optional[float] = None
    parameter_count: int = 0
    seconds: float = 0.0
