#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
合成集合任务 - 中位数估计、集合最大值/和/均值/极差/基数与玩具点云分类

数据集以 NDJSON 保存: 第一行是元数据头，其后每行一个集合 {"x": [[…]], "y": …}。
回归目标都在元素的第 0 个坐标上计算。
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.setnn import SetBatch
from app.schemas import FORMAT_VERSION, DistributionEnum, PointCloudClass, TaskKind, TaskSpec
from app.utils.error_handler import ConfigurationError, DatasetParseError
from app.utils.file_handler import save_csv_file, write_text_atomic
from app.utils.logger import get_logger
from app.utils.numerics import Rng

logger = get_logger(__name__)

GAMMA_SHAPE = 2.0
GAMMA_SCALE = 1.0
GAUSSIAN_SHIFT = 5.0
SPLIT_TOLERANCE = 1e-9


@dataclass
class Dataset:
    """一个 SetBatch 加上任务元数据与生成种子"""
    spec: TaskSpec
    batch: SetBatch
    seed: int
    set_ids: np.ndarray = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.set_ids is None:
            self.set_ids = np.arange(self.batch.n_sets, dtype=np.int64)

    @property
    def n_sets(self) -> int:
        return self.batch.n_sets

    def subset(self, indices: Sequence[int]) -> 'Dataset':
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(spec=self.spec, batch=self.batch.subset(indices), seed=self.seed,
                       set_ids=self.set_ids[indices], metadata=dict(self.metadata))


def _task_metadata(spec: TaskSpec) -> Dict[str, Any]:
    meta: Dict[str, Any] = {'target_coordinate': 0, 'median_convention': 'lower'}
    if spec.distribution == DistributionEnum.GAMMA:
        meta['gamma'] = {'shape': GAMMA_SHAPE, 'scale': GAMMA_SCALE}
    if spec.distribution == DistributionEnum.GAUSSIAN and spec.positive_shift:
        meta['gaussian_shift'] = GAUSSIAN_SHIFT
    meta['power_mean_compatible'] = spec.power_mean_compatible
    return meta


def sample_elements(spec: TaskSpec, size: int, rng: Rng) -> np.ndarray:
    """按任务的元素分布采样 size×d 矩阵"""
    shape = (size, spec.element_dim)
    if spec.distribution == DistributionEnum.UNIFORM:
        return rng.uniform(0.0, 1.0, size=shape)
    if spec.distribution == DistributionEnum.GAUSSIAN:
        x = rng.normal(0.0, 1.0, size=shape)
        return x + GAUSSIAN_SHIFT if spec.positive_shift else x
    return rng.gamma(GAMMA_SHAPE, GAMMA_SCALE, size=shape)


def sample_point_cloud(kind: PointCloudClass, n_points: int, noise_sigma: float, rng: Rng) -> np.ndarray:
    """在类别曲面上采样并加各向同性噪声"""
    if kind == PointCloudClass.SPHERE:
        pts = rng.normal(0.0, 1.0, size=(n_points, 3))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
        pts = pts / np.where(norms > 0, norms, 1.0)
    elif kind == PointCloudClass.CUBE:
        pts = rng.uniform(-1.0, 1.0, size=(n_points, 3))
        faces = rng.integers(0, 3, size=n_points)
        signs = np.where(rng.uniform(0.0, 1.0, size=n_points) < 0.5, -1.0, 1.0)
        pts[np.arange(n_points), faces] = signs
    else:
        pts = rng.uniform(-1.0, 1.0, size=(n_points, 3))
        pts[:, 2] = 0.0
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return pts


def recompute_target(spec: TaskSpec, elements: np.ndarray) -> Optional[float]:
    """由元素重新计算回归目标；分类任务无法从元素推出，返回 None"""
    x = np.asarray(elements, dtype=np.float64)[:, 0]
    if spec.kind == TaskKind.MEDIAN:
        return float(np.sort(x)[(x.size - 1) // 2])
    if spec.kind == TaskKind.MAX_OF_SET:
        return float(np.max(x))
    if spec.kind == TaskKind.SUM_OF_SET:
        return float(np.sum(x))
    if spec.kind == TaskKind.MEAN_OF_SET:
        return float(np.mean(x))
    if spec.kind == TaskKind.RANGE:
        return float(np.max(x) - np.min(x))
    if spec.kind == TaskKind.CARDINALITY:
        return float(x.size)
    return None


def generate(spec: TaskSpec, n_sets: int, rng: Rng) -> Dataset:
    """
    生成 n_sets 个独立同分布的集合

    第 i 个集合只使用子流 rng.child(i)，因此可按集合并行生成且结果不变。
    """
    if n_sets < 1:
        raise ConfigurationError("n_sets must be >= 1", field_path='n_sets')
    lo, hi = spec.size_bounds()
    sets: List[np.ndarray] = []
    targets: List[Any] = []
    for i in range(n_sets):
        set_rng = rng.child(i)
        if spec.kind == TaskKind.TOY_POINT_CLOUD:
            label = int(set_rng.integers(0, len(spec.classes)))
            sets.append(sample_point_cloud(spec.classes[label], spec.points_per_cloud, spec.noise_sigma, set_rng))
            targets.append(label)
            continue
        size = lo if lo == hi else int(set_rng.integers(lo, hi + 1))
        elements = sample_elements(spec, size, set_rng)
        sets.append(elements)
        targets.append(recompute_target(spec, elements))

    target_array = np.asarray(targets, dtype=np.int64 if spec.is_classification else np.float64)
    dataset = Dataset(spec=spec, batch=SetBatch.from_sets(sets, target_array), seed=rng.seed,
                      metadata=_task_metadata(spec))
    logger.info(f"生成数据集: task={spec.kind.value}, sets={n_sets}, d={spec.element_dim}")
    return dataset


def split(dataset: Dataset, fractions: Sequence[float], rng: Rng) -> Tuple[Dataset, ...]:
    """按比例随机划分为互不相交的子集 (最大余数法分配整数个数)"""
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(math.fsum(fractions) - 1.0) > SPLIT_TOLERANCE:
        raise ConfigurationError("fractions must be positive and sum to 1", field_path='split')
    n = dataset.n_sets
    raw = [f * n for f in fractions]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    remainder = n - sum(counts)
    by_fraction = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in by_fraction[:max(remainder, 0)]:
        counts[i] += 1
    if any(c == 0 for c in counts):
        raise ConfigurationError(f"split of {n} sets leaves an empty part: {counts}", field_path='split')
    order = rng.permutation(n)
    parts = []
    start = 0
    for c in counts:
        parts.append(dataset.subset(order[start:start + c]))
        start += c
    return tuple(parts)


# NDJSON 读写
def save(dataset: Dataset, path: Union[str, Path]) -> Path:
    """保存为 NDJSON，浮点数使用最短往返十进制表示"""
    header = {
        'format_version': FORMAT_VERSION,
        'task': dataset.spec.model_dump(mode='json'),
        'd': dataset.batch.dim,
        'seed': dataset.seed,
        'n_sets': dataset.n_sets,
        'metadata': dataset.metadata,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for elements, target in zip(dataset.batch.iter_sets(), dataset.batch.targets):
        y = int(target) if dataset.spec.is_classification else float(target)
        lines.append(json.dumps({'x': elements.tolist(), 'y': y}, sort_keys=True))
    return write_text_atomic('\n'.join(lines) + '\n', path)


def load(path: Union[str, Path]) -> Dataset:
    """
    读取 NDJSON 数据集

    Raises:
        DatasetParseError: 某行格式错误 (带行号) 或没有任何集合
    """
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().split('\n')
    if lines and lines[-1] == '':
        lines.pop()
    if not lines:
        raise DatasetParseError("missing header", line_number=1)

    try:
        header = json.loads(lines[0])
        spec = TaskSpec.model_validate(header['task'])
        d = int(header['d'])
        seed = int(header['seed'])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise DatasetParseError(f"malformed header: {e}", line_number=1) from e
    if header.get('format_version') != FORMAT_VERSION:
        raise DatasetParseError(f"unsupported format_version {header.get('format_version')!r}", line_number=1)

    sets: List[np.ndarray] = []
    targets: List[Any] = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            record = json.loads(line)
            x = np.asarray(record['x'], dtype=np.float64)
            y = record['y']
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DatasetParseError(f"malformed set record: {e}", line_number=number) from e
        if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] != d:
            raise DatasetParseError(f"set must be a non-empty list of {d}-vectors", line_number=number)
        if not isinstance(y, (int, float)) or isinstance(y, bool):
            raise DatasetParseError("target must be a number", line_number=number)
        sets.append(x)
        targets.append(y)
    if not sets:
        raise DatasetParseError("no sets", line_number=len(lines))

    target_array = np.asarray(targets, dtype=np.int64 if spec.is_classification else np.float64)
    return Dataset(spec=spec, batch=SetBatch.from_sets(sets, target_array), seed=seed,
                   metadata=header.get('metadata', {}))


ELEMENT_STATS_HEADER = ('set', 'count', 'mean', 'std', 'min', 'max', 'target')


def export_element_stats_csv(dataset: Dataset, path: Union[str, Path]) -> Path:
    """逐集合的元素统计 (第 0 个坐标)"""
    rows = []
    for set_id, elements, target in zip(dataset.set_ids, dataset.batch.iter_sets(), dataset.batch.targets):
        x = elements[:, 0]
        rows.append((int(set_id), int(x.size), float(np.mean(x)), float(np.std(x)),
                     float(np.min(x)), float(np.max(x)), target.item()))
    return save_csv_file(rows, ELEMENT_STATS_HEADER, path)
