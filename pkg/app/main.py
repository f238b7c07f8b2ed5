#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
命令行入口
数据生成、训练、p 搜索、性质检查、潜在维度扫描与特例对比

退出码: 0 成功，1 检查未通过，2 配置/用法/IO 错误，3 数值中止
"""

import functools
import json
import sys
from pathlib import Path
from typing import Callable, List, Optional

import click

# 添加项目根目录到Python路径
project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from app.core import experiment
from app.schemas import ExperimentConfig, SearchStrategyEnum
from app.utils.enhanced_config import load_experiment_config
from app.utils.error_handler import CheckFailure, ConfigurationError, handle_error
from app.utils.logger import get_logger, setup_logger

logger = get_logger('main')


def _parse_int_list(value: Optional[str], option: str) -> Optional[List[int]]:
    if value is None:
        return None
    try:
        items = [int(v) for v in value.split(',') if v.strip()]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated list of integers, got {value!r}",
                                 field_path=option) from None
    if not items or any(v < 1 for v in items):
        raise ConfigurationError(f"expected positive integers, got {value!r}", field_path=option)
    return items


def _initialize(config_path: Optional[str], overrides: List[str], log_level: Optional[str]) -> ExperimentConfig:
    """加载环境变量与配置，并把日志写入 <output_dir>/logs/run.log"""
    from dotenv import load_dotenv
    load_dotenv()

    setup_logger(log_level=log_level)
    cfg = load_experiment_config(config_path, overrides)
    setup_logger(log_path=str(Path(cfg.output_dir) / 'logs' / 'run.log'),
                 log_level=log_level or cfg.logging.level)
    return cfg


def experiment_command(func: Callable) -> Callable:
    """为子命令添加 --config / --set / --log-level，并把异常转换为退出码"""
    @click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                  help='JSON 或 YAML 实验配置')
    @click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                  help='点路径覆盖，可重复，例如 --set train.epochs=50')
    @click.option('--log-level', default=None,
                  type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
    @functools.wraps(func)
    def wrapper(config_path, overrides, log_level, **kwargs):
        try:
            cfg = _initialize(config_path, list(overrides), log_level)
            result = func(cfg, **kwargs)
        except Exception as e:
            info = handle_error(e, context={'command': func.__name__})
            click.echo(f"error: {info.message}", err=True)
            sys.exit(info.exit_code)
        click.echo(json.dumps(result.summary, sort_keys=True, ensure_ascii=False, default=str))
    return wrapper


@click.group()
def cli():
    """置换不变集合函数实验工具"""


@cli.command('gen-data')
@click.option('--out', type=click.Path(dir_okay=False), default=None, help='NDJSON 输出路径')
@click.option('--stats', is_flag=True, help='同时写出逐集合元素统计 CSV')
@experiment_command
def gen_data(cfg: ExperimentConfig, out: Optional[str], stats: bool):
    """生成合成数据集"""
    result = experiment.gen_data(cfg, out, stats=stats)
    click.echo(f"sets={result.summary['n_sets']} sha256={result.summary['sha256']}")
    return result


@cli.command()
@click.option('--resume', is_flag=True, help='从 output_dir/checkpoint.json 继续训练')
@experiment_command
def train(cfg: ExperimentConfig, resume: bool):
    """训练一个模型"""
    return experiment.run_train(cfg, resume=resume)


@cli.command('search-p')
@click.option('--strategy', type=click.Choice([s.value for s in SearchStrategyEnum]), default=None)
@experiment_command
def search_p(cfg: ExperimentConfig, strategy: Optional[str]):
    """搜索幂平均指数 p"""
    return experiment.run_search(cfg, SearchStrategyEnum(strategy) if strategy else None)


@cli.command()
@click.option('--inject-order-sensitive', is_flag=True, hidden=True,
              help='注册一个顺序敏感探针 (测试用)')
@experiment_command
def check(cfg: ExperimentConfig, inject_order_sensitive: bool):
    """运行全部性质检查；任一失败时退出码为 1"""
    result = experiment.run_check(cfg, inject_order_sensitive=inject_order_sensitive)
    if not result.summary['passed']:
        click.echo(json.dumps(result.summary, sort_keys=True), err=True)
        raise CheckFailure(f"failed checks: {', '.join(result.summary['failed'])}")
    return result


@cli.command('latent-sweep')
@click.option('--dims', default=None, help='潜在维度列表，例如 1,2,4,8,16')
@click.option('--set-sizes', default=None, help='集合大小列表；给出时输出临界点')
@experiment_command
def latent_sweep(cfg: ExperimentConfig, dims: Optional[str], set_sizes: Optional[str]):
    """按潜在维度扫描测试 RMSE"""
    return experiment.run_latent_sweep(cfg, _parse_int_list(dims, '--dims'),
                                       _parse_int_list(set_sizes, '--set-sizes'))


@cli.command('special-cases')
@experiment_command
def special_cases(cfg: ExperimentConfig):
    """固定 p 的特例对比 (p = −1, 0, 1, 2, 3 与最大池化)"""
    return experiment.run_special_cases(cfg)


def main():
    cli()


if __name__ == "__main__":
    main()
