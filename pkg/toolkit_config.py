#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
工具包配置管理
读取ToolkitSetup.ini，提供端点、快照、策略和重试参数
"""

import configparser
import hashlib
import io
import logging
import os
import random
from dataclasses import dataclass
from typing import Dict, List, Optional

from toolkit_errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_INI_PATH = "ToolkitSetup.ini"

POLICY_KINDS = ('baseline', 'rag', 'self_refine', 'ensemble')


@dataclass(frozen=True)
class RetryPolicy:
    """有界指数退避重试策略"""
    retries: int = 3
    backoff_base: float = 1.0
    backoff_cap: float = 30.0
    jitter: float = 0.1
    timeout: float = 60.0

    def delay(self, attempt: int, rng: Optional[random.Random] = None) -> float:
        """第attempt次重试前的等待秒数(attempt从0开始)"""
        base = min(self.backoff_cap, self.backoff_base * (2 ** attempt))
        if self.jitter <= 0:
            return base
        r = (rng or random).random()
        return min(self.backoff_cap, base * (1.0 + self.jitter * r))


class ConfigManager:
    def __init__(self, ini_path: Optional[str] = None):
        self.ini_path = ini_path
        self.config = configparser.ConfigParser(interpolation=None)
        self._create_default_config()

        path = ini_path or DEFAULT_INI_PATH
        if ini_path and not os.path.exists(ini_path):
            raise ConfigError(f"配置文件不存在: {ini_path}")
        if os.path.exists(path):
            try:
                self.config.read(path, encoding='utf-8')
                logger.info(f"配置文件加载成功: {path}")
            except configparser.Error as e:
                raise ConfigError(f"配置文件解析失败: {e}")
        else:
            logger.info("未找到配置文件，使用默认配置")

    @classmethod
    def from_string(cls, text: str) -> 'ConfigManager':
        manager = cls.__new__(cls)
        manager.ini_path = None
        manager.config = configparser.ConfigParser(interpolation=None)
        try:
            manager.config.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"配置文本解析失败: {e}")
        return manager

    def _create_default_config(self):
        """创建默认配置"""
        self.config['Toolkit'] = {
            'run_root': 'runs',
            'transcript_dir': 'transcripts',
            'mode': 'record',
            'log_file': 'hallucination_toolkit.log',
            'log_level': 'INFO',
            'version': '1.0.0'
        }
        self.config['Retry'] = {
            'retries': '3',
            'backoff_base': '1.0',
            'backoff_cap': '30.0',
            'jitter': '0.1',
            'timeout': '60'
        }
        self.config['Registry'] = {
            'pypi_url': 'https://pypi.org/simple/',
            'npm_url': 'https://replicate.npmjs.com/_all_docs',
            'snapshot_dir': 'snapshots',
            'fetch_retries': '3',
            'fetch_jitter': '0'
        }
        self.config['Embedding'] = {
            'kind': 'lexical',
            'endpoint': ''
        }

    def to_string(self) -> str:
        buf = io.StringIO()
        self.config.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_string().encode('utf-8')).hexdigest()

    def as_dict(self) -> Dict[str, Dict[str, str]]:
        return {s: dict(self.config[s]) for s in self.config.sections()}

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfigManager):
            return NotImplemented
        return self.as_dict() == other.as_dict()

    def apply_override(self, assignment: str):
        """应用命令行覆盖，格式为 Section.key=value"""
        if '=' not in assignment:
            raise ConfigError(f"覆盖项缺少'=': {assignment}")
        target, value = assignment.split('=', 1)
        if '.' not in target:
            raise ConfigError(f"覆盖项缺少节名: {assignment}")
        section, key = target.rsplit('.', 1)
        if not section or not key:
            raise ConfigError(f"覆盖项格式错误: {assignment}")
        if not self.config.has_section(section):
            self.config.add_section(section)
        self.config.set(section, key.strip(), value.strip())
        logger.debug(f"配置覆盖: [{section}] {key} = {value}")

    # ==================== 类型化读取 ====================

    def _get(self, section: str, key: str, fallback: str = '') -> str:
        return self.config.get(section, key, fallback=fallback)

    def _get_int(self, section: str, key: str, fallback: int) -> int:
        try:
            return self.config.getint(section, key, fallback=fallback)
        except ValueError:
            raise ConfigError(f"[{section}] {key} 不是整数: {self._get(section, key)}")

    def _get_float(self, section: str, key: str, fallback: float) -> float:
        try:
            return self.config.getfloat(section, key, fallback=fallback)
        except ValueError:
            raise ConfigError(f"[{section}] {key} 不是数字: {self._get(section, key)}")

    def _require_section(self, section: str):
        if not self.config.has_section(section):
            raise ConfigError(f"配置缺少节: [{section}]")

    def get_toolkit_settings(self) -> Dict:
        mode = self._get('Toolkit', 'mode', 'record')
        if mode not in ('live', 'record', 'replay'):
            raise ConfigError(f"未知运行模式: {mode}")
        return {
            'run_root': self._get('Toolkit', 'run_root', 'runs'),
            'transcript_dir': self._get('Toolkit', 'transcript_dir', 'transcripts'),
            'mode': mode,
            'log_file': self._get('Toolkit', 'log_file', 'hallucination_toolkit.log'),
            'log_level': self._get('Toolkit', 'log_level', 'INFO'),
            'version': self._get('Toolkit', 'version', '1.0.0')
        }

    def get_retry_policy(self, section: str = 'Retry') -> RetryPolicy:
        policy = RetryPolicy(
            retries=self._get_int(section, 'retries', 3),
            backoff_base=self._get_float(section, 'backoff_base', 1.0),
            backoff_cap=self._get_float(section, 'backoff_cap', 30.0),
            jitter=self._get_float(section, 'jitter', 0.1),
            timeout=self._get_float(section, 'timeout', 60.0)
        )
        if policy.retries < 0 or policy.backoff_base < 0 or policy.backoff_cap < 0:
            raise ConfigError("重试参数不能为负数")
        return policy

    def get_registry_settings(self) -> Dict:
        base = self.get_retry_policy()
        return {
            'pypi_url': self._get('Registry', 'pypi_url', 'https://pypi.org/simple/'),
            'npm_url': self._get('Registry', 'npm_url', ''),
            'snapshot_dir': self._get('Registry', 'snapshot_dir', 'snapshots'),
            'retry': RetryPolicy(
                retries=self._get_int('Registry', 'fetch_retries', base.retries),
                backoff_base=base.backoff_base,
                backoff_cap=base.backoff_cap,
                jitter=self._get_float('Registry', 'fetch_jitter', 0.0),
                timeout=base.timeout
            )
        }

    def _named_sections(self, prefix: str) -> List[str]:
        return sorted(s.split(':', 1)[1] for s in self.config.sections()
                      if s.startswith(prefix + ':'))

    def get_snapshot_ecosystems(self) -> List[str]:
        return self._named_sections('Snapshot')

    def get_snapshot_settings(self, ecosystem: str) -> Dict:
        section = f'Snapshot:{ecosystem}'
        self._require_section(section)
        return {
            'path': self._get(section, 'path'),
            'as_of': self._get(section, 'as_of')
        }

    def get_ledger_path(self) -> str:
        return self._get('Ledger', 'path')

    def get_dataset_path(self) -> str:
        return self._get('Dataset', 'path')

    def get_endpoint_names(self) -> List[str]:
        return self._named_sections('Endpoint')

    def get_endpoint_settings(self, name: str) -> Dict:
        section = f'Endpoint:{name}'
        self._require_section(section)
        supports = self._get(section, 'supports', '')
        settings = {
            'name': name,
            'base_url': self._get(section, 'base_url'),
            'model_id': self._get(section, 'model_id', name),
            'api_key_env': self._get(section, 'api_key_env', ''),
            'supports': frozenset(s.strip() for s in supports.split(',') if s.strip()),
            'max_parallel': self._get_int(section, 'max_parallel', 4),
            'timeout': self._get_float(section, 'timeout', self.get_retry_policy().timeout),
            'profile': self._get(section, 'profile', 'open')
        }
        if not settings['base_url']:
            raise ConfigError(f"[{section}] 缺少base_url")
        if settings['max_parallel'] < 1:
            raise ConfigError(f"[{section}] max_parallel必须 >= 1")
        return settings

    def get_policy_names(self) -> List[str]:
        return self._named_sections('Policy')

    def get_policy_settings(self, name: str) -> Dict:
        section = f'Policy:{name}'
        if not self.config.has_section(section):
            # 未配置的策略名按同名kind使用默认参数
            if name not in POLICY_KINDS:
                raise ConfigError(f"未知策略: {name} (没有 [{section}] 节，也不是内置策略类型)")
            return {'name': name, 'kind': name, 'k': 5, 'max_iterations': 5,
                    'store': '', 'judge_endpoint': ''}
        kind = self._get(section, 'kind', name)
        if kind not in POLICY_KINDS:
            raise ConfigError(f"[{section}] 未知策略类型: {kind}")
        return {
            'name': name,
            'kind': kind,
            'k': self._get_int(section, 'k', 5),
            'max_iterations': self._get_int(section, 'max_iterations', 5),
            'store': self._get(section, 'store'),
            'judge_endpoint': self._get(section, 'judge_endpoint')
        }

    def get_embedding_settings(self) -> Dict:
        kind = self._get('Embedding', 'kind', 'lexical')
        if kind not in ('lexical', 'remote'):
            raise ConfigError(f"未知嵌入类型: {kind}")
        return {'kind': kind, 'endpoint': self._get('Embedding', 'endpoint')}
