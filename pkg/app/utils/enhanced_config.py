#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
实验配置管理器 - 配置文件加载、点路径覆盖和校验

主要功能:
1. JSON / YAML 配置文件加载 (按后缀选择)
2. --set key=value 点路径覆盖，优先级: 命令行 > 文件 > 默认值
3. 通过 pydantic 模型校验所有字段
"""

import copy
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml
from pydantic import ValidationError

from app.schemas import ExperimentConfig
from app.utils.error_handler import ConfigurationError
from app.utils.logger import get_logger

logger = get_logger(__name__)


class ExperimentConfigManager:
    """实验配置管理器"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None,
                 overrides: Iterable[str] = ()):
        self.config_path = Path(config_path) if config_path else None
        self.overrides = list(overrides)
        self.config_data: Dict[str, Any] = {}
        self._load_config()

    def _load_config(self):
        """加载配置文件并应用覆盖"""
        defaults = ExperimentConfig().model_dump(mode='json')
        raw_config: Dict[str, Any] = {}

        if self.config_path is not None:
            if not self.config_path.exists():
                raise ConfigurationError(f"配置文件不存在: {self.config_path}", field_path='config')
            with open(self.config_path, 'r', encoding='utf-8') as f:
                try:
                    if self.config_path.suffix.lower() == '.json':
                        raw_config = json.load(f)
                    else:
                        raw_config = yaml.safe_load(f) or {}
                except (json.JSONDecodeError, yaml.YAMLError) as e:
                    raise ConfigurationError(f"配置文件格式错误: {e}", field_path='config') from e
            if not isinstance(raw_config, dict):
                raise ConfigurationError("配置文件顶层必须是对象", field_path='config')

        config = self._deep_merge(defaults, raw_config)
        # task 更换种类时，默认 task 中的字段不应残留
        if 'task' in raw_config:
            config['task'] = copy.deepcopy(raw_config['task'])

        for item in self.overrides:
            key, value = self._parse_override(item)
            self._set_nested_value(config, key, value)
            logger.debug(f"应用配置覆盖: {key} = {value!r}")

        self.config_data = config
        logger.debug(f"配置加载完成: {self.config_path or '<defaults>'}")

    @staticmethod
    def _parse_override(item: str):
        if '=' not in item:
            raise ConfigurationError(f"覆盖项必须是 key=value 形式: {item!r}", field_path='--set')
        key, value = item.split('=', 1)
        key = key.strip()
        if not key:
            raise ConfigurationError(f"覆盖项缺少键名: {item!r}", field_path='--set')
        return key, ExperimentConfigManager._convert_value(value.strip())

    @staticmethod
    def _convert_value(value: str) -> Any:
        """转换覆盖值类型"""
        # 布尔值
        if value.lower() in ('true', 'false'):
            return value.lower() == 'true'
        if value.lower() in ('null', 'none'):
            return None

        # 数字
        try:
            if '.' in value or 'e' in value.lower():
                return float(value)
            return int(value)
        except ValueError:
            pass

        # JSON
        try:
            return json.loads(value)
        except (json.JSONDecodeError, ValueError):
            pass

        # 字符串
        return value

    def to_config(self) -> ExperimentConfig:
        """校验并返回实验配置"""
        try:
            return ExperimentConfig.model_validate(self.config_data)
        except ValidationError as e:
            first = e.errors()[0]
            field_path = '.'.join(str(part) for part in first.get('loc', ())) or 'config'
            raise ConfigurationError(first.get('msg', str(e)), field_path=field_path) from e

    def _set_nested_value(self, data: Dict[str, Any], key: str, value: Any):
        """设置嵌套字典值"""
        keys = key.split('.')
        current = data

        for k in keys[:-1]:
            if k not in current or not isinstance(current[k], dict):
                current[k] = {}
            current = current[k]

        current[keys[-1]] = value

    def _deep_merge(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        """深度合并字典"""
        result = copy.deepcopy(base)

        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = copy.deepcopy(value)

        return result


def load_experiment_config(config_path: Optional[Union[str, Path]] = None,
                           overrides: Iterable[str] = ()) -> ExperimentConfig:
    """加载实验配置"""
    return ExperimentConfigManager(config_path, overrides).to_config()
