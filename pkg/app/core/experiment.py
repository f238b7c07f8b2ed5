#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
实验流水线 - 命令行各子命令共用的 数据 → 训练 → 搜索 → 检查 → 汇总 流程

所有产物写入 output_dir，并附带 manifest.json (文件名 + SHA-256)。
每条流水线只依赖 (配置, 命令行参数, 种子)，随机流按用途从 Rng(cfg.seed) 派生:
child(0) 生成数据，child(1) 划分，child(2) 初始化模型，child(3) 检查。
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core import tasks
from app.core.aggregators import special_case_spec
from app.core.janossy import JanossyModel, mlp_perm_fn
from app.core.oracles import (FirstElementProbe, check_modularity, check_permutation_invariance,
                              check_submodularity, check_sum_isomorphism, grad_check)
from app.core.psearch import (SEARCH_CSV_HEADER, bayes_search, gradient_search, grid_search, history_rows,
                              special_cases_sweep)
from app.core.setnn import (SetBatch, SetModel, init_model, load_checkpoint,
                            predict_set_function_over_powerset, save_checkpoint)
from app.core.training import EPOCH_CSV_HEADER, TrainState, epoch_rows, evaluate, train
from app.schemas import (AggregatorKind, AggregatorSpec, CheckReport, ExperimentConfig, JanossyKind, MlpSpec,
                         MonotoneMapKind, MonotoneMapSpec, SearchConfig, SearchStrategyEnum)
from app.utils.error_handler import ConfigurationError
from app.utils.file_handler import (ensure_directory_exists, get_file_hash, save_csv_file, save_json_file,
                                    write_manifest)
from app.utils.logger import get_logger, log_performance
from app.utils.numerics import Rng

logger = get_logger(__name__)

DATA_STREAM, SPLIT_STREAM, INIT_STREAM, CHECK_STREAM = 0, 1, 2, 3
CRITICAL_POINT_TOLERANCE = 0.10
JANOSSY_CHECK_SIZE = 4
SECONDS_FIELDS = ('seconds',)


@dataclass
class Splits:
    train: tasks.Dataset
    val: tasks.Dataset
    test: tasks.Dataset


@dataclass
class RunResult:
    """一次流水线运行的摘要，供命令行输出"""
    output_dir: Path
    files: List[Path] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)


def _output_dir(cfg: ExperimentConfig) -> Path:
    return ensure_directory_exists(cfg.output_dir)


def _finish(cfg: ExperimentConfig, command: str, files: List[Path], summary: Dict[str, Any],
            volatile: Optional[Dict[str, Sequence[str]]] = None) -> RunResult:
    out = Path(cfg.output_dir)
    config_path = save_json_file(cfg.model_dump(mode='json'), out / 'config.json')
    files = [config_path, *files]
    write_manifest(out, files, volatile=volatile, command=command)
    return RunResult(output_dir=out, files=files, summary=summary)


# 数据
def load_or_generate(cfg: ExperimentConfig) -> tasks.Dataset:
    """
    读取 cfg.dataset_path 指向的数据集；未配置时按 cfg 生成

    Raises:
        FileNotFoundError: 配置了路径但文件不存在
    """
    if cfg.dataset_path:
        path = Path(cfg.dataset_path)
        if not path.is_file():
            raise FileNotFoundError(f"dataset not found: {path}")
        dataset = tasks.load(path)
        logger.info(f"读取数据集 {path}: {dataset.n_sets} 个集合")
        return dataset
    return tasks.generate(cfg.task, cfg.n_sets, Rng(cfg.seed).child(DATA_STREAM))


def split_dataset(cfg: ExperimentConfig, dataset: tasks.Dataset) -> Splits:
    train_part, val_part, test_part = tasks.split(dataset, cfg.split, Rng(cfg.seed).child(SPLIT_STREAM))
    return Splits(train=train_part, val=val_part, test=test_part)


@log_performance
def gen_data(cfg: ExperimentConfig, out: Optional[str] = None, stats: bool = False) -> RunResult:
    """生成数据集并写入 NDJSON；stats 为真时另写逐集合元素统计 CSV。返回集合数与校验和"""
    dataset = tasks.generate(cfg.task, cfg.n_sets, Rng(cfg.seed).child(DATA_STREAM))
    path = Path(out) if out else _output_dir(cfg) / 'dataset.ndjson'
    tasks.save(dataset, path)
    checksum = get_file_hash(path)
    logger.info(f"数据集已写入 {path}: {dataset.n_sets} 个集合, sha256={checksum}")
    files = [path]
    summary = {'path': str(path), 'n_sets': dataset.n_sets, 'sha256': checksum}
    if stats:
        stats_path = tasks.export_element_stats_csv(dataset, path.with_name(f"{path.stem}_stats.csv"))
        files.append(stats_path)
        summary['stats_path'] = str(stats_path)
    return RunResult(output_dir=path.parent, files=files, summary=summary)



# 模型与训练
def build_model(cfg: ExperimentConfig, aggregator: Optional[AggregatorSpec] = None,
                latent: Optional[int] = None, seed_offset: int = 0,
                positive_output: Optional[bool] = None) -> SetModel:
    """按配置初始化模型，可替换聚合算子、潜在维度或 φ 的正输出约束"""
    model_cfg = cfg.model if latent is None else cfg.model.with_latent(latent)
    if aggregator is not None:
        model_cfg = model_cfg.model_copy(update={'aggregator': aggregator})
    if positive_output is not None:
        model_cfg = model_cfg.model_copy(update={'positive_output': positive_output})
    rng = Rng(cfg.seed + seed_offset).child(INIT_STREAM)
    return init_model(model_cfg.phi_spec(), model_cfg.aggregator, model_cfg.rho_spec(), rng)


def _train_artifacts(out: Path, prefix: str, report) -> List[Path]:
    return [
        save_json_file(report.model_dump(mode='json'), out / f'{prefix}report.json'),
        save_csv_file(epoch_rows(report), EPOCH_CSV_HEADER, out / f'{prefix}metrics.csv'),
    ]


@log_performance
def run_train(cfg: ExperimentConfig, resume: bool = False) -> RunResult:
    """
    训练一个模型: 写出 checkpoint.json、metrics.csv、report.json

    resume 时从 output_dir/checkpoint.json 继续 cfg.train.epochs 轮，
    结果与不间断训练逐位一致。
    """
    out = _output_dir(cfg)
    splits = split_dataset(cfg, load_or_generate(cfg))
    checkpoint_path = out / 'checkpoint.json'
    state = None
    if resume:
        if not checkpoint_path.is_file():
            raise FileNotFoundError(f"no checkpoint to resume from: {checkpoint_path}")
        model, extra = load_checkpoint(checkpoint_path)
        state = TrainState.from_dict(extra.get('train_state', {}))
        logger.info(f"从第 {state.epochs_done} 轮恢复训练")
    else:
        model = build_model(cfg)
        state = TrainState()

    model, report = train(model, splits.train.batch, splits.val.batch, cfg.train, state=state)
    test_metrics = evaluate(model, splits.test.batch, cfg.train.loss)
    save_checkpoint(model, checkpoint_path, extra={'train_state': state.to_dict()})
    files = [checkpoint_path, *_train_artifacts(out, '', report),
             save_json_file(test_metrics.model_dump(mode='json'), out / 'test_metrics.json')]
    summary = {'epochs_done': state.epochs_done, 'final_p': report.final_p,
               'test': test_metrics.model_dump(mode='json'), 'parameter_count': report.parameter_count}
    return _finish(cfg, 'train', files, summary, volatile={'report.json': SECONDS_FIELDS})


def _metric_value(metrics, cfg: ExperimentConfig) -> float:
    """验证指标: 回归取 RMSE，分类取损失"""
    if cfg.task.is_classification or metrics.rmse is None:
        return metrics.loss
    return metrics.rmse


def fixed_p_objective(cfg: ExperimentConfig, splits: Splits, seed_offset: int = 0) -> Callable[[Optional[float]], float]:
    """objective(p): 以固定 p (None 为最大池化) 训练新模型后的验证指标

    所有 p 共用同一个正输出 φ 结构与初始化种子。
    """
    def objective(p: Optional[float]) -> float:
        agg = special_case_spec('max') if p is None else AggregatorSpec(kind=AggregatorKind.POWER_MEAN, p=p)
        model = build_model(cfg, aggregator=agg, seed_offset=seed_offset, positive_output=True)
        train_cfg = cfg.train.model_copy(update={'seed': cfg.train.seed + seed_offset})
        train(model, splits.train.batch, splits.val.batch, train_cfg)
        return _metric_value(evaluate(model, splits.val.batch, cfg.train.loss), cfg)
    return objective


def _require_power_mean(cfg: ExperimentConfig):
    if cfg.model.aggregator.kind != AggregatorKind.POWER_MEAN:
        raise ConfigurationError(f"p search requires a power_mean aggregator, got {cfg.model.aggregator.kind.value}",
                                 field_path='model.aggregator.kind')
    if not cfg.task.power_mean_compatible:
        raise ConfigurationError(f"task {cfg.task.kind.value} has non-positive elements",
                                 field_path='task.kind')


@log_performance
def run_search(cfg: ExperimentConfig, strategy: Optional[SearchStrategyEnum] = None) -> RunResult:
    """在 p 上搜索: 写出 search_result.json 与 search_history.csv"""
    _require_power_mean(cfg)
    search_cfg = cfg.search or SearchConfig()
    if strategy is not None:
        search_cfg = search_cfg.model_copy(update={'strategy': strategy})
    splits = split_dataset(cfg, load_or_generate(cfg))

    if search_cfg.strategy == SearchStrategyEnum.GRADIENT:
        agg = cfg.model.aggregator.model_copy(update={'learnable': True})
        model = build_model(cfg, aggregator=agg)
        result = gradient_search(model, splits.train.batch, splits.val.batch, cfg.train, search_cfg,
                                 metric=lambda m: _metric_value(evaluate(m, splits.val.batch, cfg.train.loss), cfg))
    else:
        objective = fixed_p_objective(cfg, splits)
        search = grid_search if search_cfg.strategy == SearchStrategyEnum.GRID else bayes_search
        result = search(objective, search_cfg)

    out = _output_dir(cfg)
    files = [save_json_file(result.model_dump(mode='json'), out / 'search_result.json'),
             save_csv_file(history_rows(result), SEARCH_CSV_HEADER, out / 'search_history.csv')]
    logger.info(f"搜索完成 ({result.strategy.value}): best_p={result.best_p:.6g}, "
                f"best_objective={result.best_objective:.6g}, trials={len(result.history)}")
    summary = {'strategy': result.strategy.value, 'best_p': result.best_p,
               'best_objective': result.best_objective, 'trials': len(result.history)}
    return _finish(cfg, 'search-p', files, summary,
                   volatile={'search_result.json': SECONDS_FIELDS, 'search_history.csv': SECONDS_FIELDS})


# 性质检查
def _check_sets(cfg: ExperimentConfig, rng: Rng, count: int = 8, max_size: int = 6) -> List[np.ndarray]:
    """正值元素的小集合，对所有聚合算子都有效"""
    sizes = rng.integers(1, max_size + 1, size=count)
    return [rng.child(i).uniform(0.5, 1.5, size=(int(m), cfg.task.element_dim)) for i, m in enumerate(sizes)]


def _scalar_model(agg: AggregatorSpec, rng: Rng, width: int = 1) -> SetModel:
    """φ: 1 → 8 → 1 (正输出)，ρ 为恒等映射"""
    phi = MlpSpec(layer_widths=[width, 8, 1], activation='tanh', positive_output=True)
    return init_model(phi, agg, MlpSpec(layer_widths=[1]), rng)


def _janossy_check(cfg: ExperimentConfig, rng: Rng) -> Optional[CheckReport]:
    strategy = cfg.janossy
    if strategy.kind == JanossyKind.SAMPLED:
        logger.info("采样 Janossy 策略只在期望意义下不变，跳过不变性检查")
        return None
    if strategy.kind == JanossyKind.KARY and strategy.k > JANOSSY_CHECK_SIZE:
        logger.info(f"Janossy k = {strategy.k} 超过检查集合大小 {JANOSSY_CHECK_SIZE}，跳过")
        return None
    arity = strategy.k if strategy.kind == JanossyKind.KARY else JANOSSY_CHECK_SIZE
    d = cfg.task.element_dim
    model = JanossyModel(fn=mlp_perm_fn(d, arity, [8], 1, rng.child(0)), strategy=strategy)
    sets = [rng.child(1, i).uniform(0.5, 1.5, size=(JANOSSY_CHECK_SIZE, d)) for i in range(3)]
    report = check_permutation_invariance(model, sets, rng=rng.child(2))
    return report.model_copy(update={'name': f'permutation_invariance[janossy_{strategy.kind.value}]'})


def check_suite(cfg: ExperimentConfig, inject_order_sensitive: bool = False) -> List[CheckReport]:
    """
    注册的全部性质检查

    1. 配置模型的置换不变性
    2. 求和 + 恒等 ρ 的模性，最大 + 恒等 ρ (标量潜在维度) 的次模性，|V| = 5
    3. 配置的 Janossy 策略的置换不变性 (采样策略除外)
    4. 配置模型的梯度检查
    5. g = identity / ln 的同构求和
    """
    rng = Rng(cfg.seed).child(CHECK_STREAM)
    sets = _check_sets(cfg, rng.child(0))
    model = build_model(cfg)
    reports = [check_permutation_invariance(model, sets, rng=rng.child(1))]
    if inject_order_sensitive:
        logger.warning("注入顺序敏感探针")
        probe_sets = [rng.child(2).uniform(0.5, 1.5, size=(3, cfg.task.element_dim))]
        reports.append(check_permutation_invariance(FirstElementProbe(), probe_sets, rng=rng.child(2))
                       .model_copy(update={'name': 'permutation_invariance[order_sensitive_probe]'}))

    ground = rng.child(3).uniform(0.5, 1.5, size=(5, 1))
    sum_model = _scalar_model(AggregatorSpec(kind=AggregatorKind.SUM), rng.child(4))
    max_model = _scalar_model(AggregatorSpec(kind=AggregatorKind.MAX), rng.child(5))
    reports.append(check_modularity(predict_set_function_over_powerset(sum_model, ground), 5))
    reports.append(check_submodularity(predict_set_function_over_powerset(max_model, ground), 5))

    janossy_report = _janossy_check(cfg, rng.child(7))
    if janossy_report is not None:
        reports.append(janossy_report)

    batch = SetBatch.from_sets(sets[:4])
    reports.append(grad_check(model, batch, loss=cfg.train.loss))

    positive = [rng.child(6).uniform(0.5, 1.5, size=(m, 2)) for m in (1, 3, 6)]
    for kind in (MonotoneMapKind.IDENTITY, MonotoneMapKind.LN):
        reports.append(check_sum_isomorphism(MonotoneMapSpec(kind=kind), positive))
    return reports


@log_performance
def run_check(cfg: ExperimentConfig, inject_order_sensitive: bool = False) -> RunResult:
    reports = check_suite(cfg, inject_order_sensitive)
    out = _output_dir(cfg)
    path = save_json_file([r.model_dump(mode='json') for r in reports], out / 'check_report.json')
    failed = [r.name for r in reports if not r.passed]
    summary = {'checks': len(reports), 'failed': failed, 'passed': not failed,
               'witnesses': {r.name: r.witness for r in reports if not r.passed}}
    return _finish(cfg, 'check', [path], summary)


# 潜在维度扫描
def critical_point(rows: Sequence[Tuple[int, float]], tolerance: float = CRITICAL_POINT_TOLERANCE) -> int:
    """RMSE 落在最优值 (1 + tolerance) 倍以内的最小 N"""
    best = min(rmse for _, rmse in rows)
    return min(n for n, rmse in rows if rmse <= best * (1.0 + tolerance))


@log_performance
def run_latent_sweep(cfg: ExperimentConfig, dims: Optional[Sequence[int]] = None,
                     set_sizes: Optional[Sequence[int]] = None) -> RunResult:
    """
    每个潜在维度 N 训练一个模型并记录测试 RMSE

    给出 set_sizes 时对每个集合大小 M 重复扫描，并输出临界点 (M, N_critical)。
    """
    if cfg.task.is_classification:
        raise ConfigurationError("latent sweep requires a regression task", field_path='task.kind')
    dims = list(dims or cfg.latent_dims)
    sizes = list(set_sizes) if set_sizes else [None]
    sweep_rows, critical_rows = [], []
    for m in sizes:
        run_cfg = cfg
        if m is not None:
            run_cfg = cfg.model_copy(update={'task': cfg.task.model_copy(update={'set_size': m,
                                                                                  'set_size_range': None}),
                                             'dataset_path': None})
        splits = split_dataset(run_cfg, load_or_generate(run_cfg))
        rows = []
        for n in dims:
            model = build_model(run_cfg, latent=n)
            train(model, splits.train.batch, splits.val.batch, run_cfg.train)
            rmse = evaluate(model, splits.test.batch, run_cfg.train.loss).rmse
            logger.info(f"latent sweep M={m if m is not None else '-'} N={n}: rmse={rmse:.6g}")
            rows.append((n, rmse))
        sweep_rows.extend((n, rmse) if m is None else (m, n, rmse) for n, rmse in rows)
        if m is not None:
            critical_rows.append((m, critical_point(rows)))

    out = _output_dir(cfg)
    header = ('N', 'rmse') if set_sizes is None else ('M', 'N', 'rmse')
    files = [save_csv_file(sweep_rows, header, out / 'latent_sweep.csv')]
    if critical_rows:
        files.append(save_csv_file(critical_rows, ('M', 'N_critical'), out / 'critical_points.csv'))
    summary = {'rows': len(sweep_rows), 'critical_points': dict(critical_rows)}
    return _finish(cfg, 'latent-sweep', files, summary)


# 特例对比
@log_performance
def run_special_cases(cfg: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2)) -> RunResult:
    """固定 p ∈ {−1, 0, 1, 2, 3} 与最大池化，三个种子；写出逐种子与汇总 CSV"""
    if not cfg.task.power_mean_compatible:
        raise ConfigurationError(f"task {cfg.task.kind.value} has non-positive elements", field_path='task.kind')
    splits = split_dataset(cfg, load_or_generate(cfg))
    objectives = {}

    def objective_for_seed(p: Optional[float], seed: int) -> float:
        if seed not in objectives:
            objectives[seed] = fixed_p_objective(cfg, splits, seed_offset=seed)
        return objectives[seed](p)

    rows = special_cases_sweep(objective_for_seed, seeds=seeds)
    out = _output_dir(cfg)
    per_seed = [(r['label'], seed, v) for r in rows for seed, v in zip(seeds, r['values'])]
    summary_rows = [(r['label'], r['mean'], r['std']) for r in rows]
    files = [save_csv_file(per_seed, ('p', 'seed', 'objective'), out / 'special_cases.csv'),
             save_csv_file(summary_rows, ('p', 'mean', 'std'), out / 'special_cases_summary.csv')]
    best = min(rows, key=lambda r: r['mean'])
    summary = {'best': best['label'], 'best_mean': best['mean'],
               'table': {r['label']: [r['mean'], r['std']] for r in rows}}
    return _finish(cfg, 'special-cases', files, summary)
