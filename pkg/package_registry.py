#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
包注册表模块
负责主列表的抓取、加载、规范化、成员查询以及删除包账本的计算
"""

import hashlib
import html
import json
import logging
import os
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

from http_client import HttpClient
from toolkit_config import ConfigManager, RetryPolicy
from toolkit_errors import (DateOrderError, EcosystemMismatch, EmptyName, FormatError,
                            IllegalName, UnknownEcosystem, UnreadableFile)

logger = logging.getLogger(__name__)

ECOSYSTEMS = ('pypi', 'npm', 'cran', 'cargo', 'rubygems', 'packagist',
              'cocoapods', 'nuget', 'go', 'maven')
FETCHABLE_ECOSYSTEMS = ('pypi', 'npm')
LANGUAGE_ECOSYSTEMS = {'python': 'pypi', 'javascript': 'npm'}

NORMALIZATION_CONVENTION = 'pypi:pep503-collapse;others:lowercase'

_TRIM_CHARS = ' \t\r\n"\'`'
_PYPI_LEGAL = re.compile(r'^[A-Za-z0-9](?:[A-Za-z0-9._-]*[A-Za-z0-9])?$')
_PYPI_SEPARATORS = re.compile(r'[-_.]+')
_NPM_LEGAL = re.compile(r'^(?:@[a-z0-9\-~][a-z0-9\-._~]*/)?[a-z0-9\-~][a-z0-9\-._~]*$')
_GENERIC_LEGAL = re.compile(r'^[a-z0-9@][a-z0-9._\-/@:+~]*$')
_HTML_ANCHOR = re.compile(r'<a\b[^>]*>([^<]*)</a>', re.IGNORECASE)


def parse_ecosystem(token: str) -> str:
    eco = (token or '').strip().lower()
    if eco not in ECOSYSTEMS:
        raise UnknownEcosystem(f"未知生态系统: {token}")
    return eco


def ecosystem_for_language(language: str) -> str:
    try:
        return LANGUAGE_ECOSYSTEMS[language]
    except KeyError:
        raise UnknownEcosystem(f"没有与语言 {language} 对应的生态系统")


@dataclass(frozen=True)
class PackageName:
    raw: str
    normalized: str
    ecosystem: str


def normalized_form(raw: str, ecosystem: str) -> str:
    text = raw.strip(_TRIM_CHARS)
    if not text:
        raise EmptyName(f"包名为空: {raw!r}")
    if ecosystem == 'pypi':
        if not _PYPI_LEGAL.match(text):
            raise IllegalName(f"非法的PyPI包名: {raw!r}")
        return _PYPI_SEPARATORS.sub('-', text).lower()
    lowered = text.lower()
    pattern = _NPM_LEGAL if ecosystem == 'npm' else _GENERIC_LEGAL
    if not pattern.match(lowered):
        raise IllegalName(f"非法的{ecosystem}包名: {raw!r}")
    return lowered


def normalize_name(raw: str, ecosystem: str) -> PackageName:
    """
    按生态系统规则规范化包名

    pypi: 小写，连续的 - _ . 折叠为单个 -
    其他: 仅小写
    """
    ecosystem = parse_ecosystem(ecosystem)
    return PackageName(raw=raw, normalized=normalized_form(raw, ecosystem), ecosystem=ecosystem)


@dataclass
class LoadReport:
    count: int = 0
    entries: int = 0
    duplicates: int = 0
    skipped: List[Tuple[int, str]] = field(default_factory=list)
    source_format: str = 'lines'

    @property
    def skip_count(self) -> int:
        return len(self.skipped)


@dataclass(frozen=True)
class RegistrySnapshot:
    ecosystem: str
    as_of: date
    names: FrozenSet[str]
    source_digest: str
    load_report: LoadReport = field(default_factory=LoadReport, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name: Union[PackageName, str]) -> bool:
        if isinstance(name, PackageName):
            return contains(self, name)
        return name in self.names


@dataclass(frozen=True)
class DeletedPackageLedger:
    ecosystem: str
    earlier: date
    later: date
    deleted: FrozenSet[str]


def _as_date(value: Union[date, str]) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value))
    except ValueError:
        raise FormatError(f"日期格式错误: {value}")


def _iter_entries(text: str) -> Tuple[str, Iterable[Tuple[int, str]]]:
    """返回(格式, (行号, 原始条目)序列)"""
    if _HTML_ANCHOR.search(text):
        def anchors():
            for m in _HTML_ANCHOR.finditer(text):
                yield text.count('\n', 0, m.start()) + 1, html.unescape(m.group(1))
        return 'simple-index-html', anchors()

    def lines():
        for number, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith('#'):
                continue
            yield number, stripped
    return 'lines', lines()


def snapshot_from_bytes(data: bytes, ecosystem: str, as_of: Union[date, str],
                        source: str = '<memory>') -> RegistrySnapshot:
    ecosystem = parse_ecosystem(ecosystem)
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as e:
        line = data[:e.start].count(b'\n') + 1
        raise FormatError(f"{source} 不是UTF-8编码", line=line)
    if '\x00' in text:
        raise FormatError(f"{source} 包含NUL字符", line=text[:text.index('\x00')].count('\n') + 1)

    report = LoadReport()
    source_format, entries = _iter_entries(text)
    report.source_format = source_format
    names = set()
    for number, raw in entries:
        report.entries += 1
        try:
            normalized = normalized_form(raw, ecosystem)
        except (EmptyName, IllegalName):
            report.skipped.append((number, raw))
            continue
        if normalized in names:
            report.duplicates += 1
        else:
            names.add(normalized)
    report.count = len(names)

    if report.skipped:
        logger.warning(f"{source}: 跳过{report.skip_count}个非法条目，"
                       f"首个位于第{report.skipped[0][0]}行: {report.skipped[0][1]!r}")
    logger.info(f"快照加载完成: {ecosystem} {report.count}个包名 (来源 {source})")
    return RegistrySnapshot(
        ecosystem=ecosystem,
        as_of=_as_date(as_of),
        names=frozenset(names),
        source_digest=hashlib.sha256(data).hexdigest(),
        load_report=report
    )


def load_snapshot(path: str, ecosystem: str, as_of: Union[date, str]) -> RegistrySnapshot:
    """从文件加载主列表快照，支持每行一个包名或PyPI simple索引HTML"""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise UnreadableFile(f"无法读取快照文件 {path}: {e}")
    return snapshot_from_bytes(data, ecosystem, as_of, source=path)


def contains(snapshot: RegistrySnapshot, name: PackageName) -> bool:
    if name.ecosystem != snapshot.ecosystem:
        raise EcosystemMismatch(f"包名生态系统 {name.ecosystem} 与快照 {snapshot.ecosystem} 不一致")
    return name.normalized in snapshot.names


def cross_contains(snapshot: RegistrySnapshot, name: PackageName) -> bool:
    """跨生态系统查询：用已规范化的字符串直接比对另一个生态系统的集合"""
    return name.normalized in snapshot.names


def diff_snapshots(earlier: RegistrySnapshot, later: RegistrySnapshot) -> DeletedPackageLedger:
    if earlier.ecosystem != later.ecosystem:
        raise EcosystemMismatch(f"快照生态系统不一致: {earlier.ecosystem} / {later.ecosystem}")
    if not earlier.as_of < later.as_of:
        raise DateOrderError(f"较早快照日期 {earlier.as_of} 必须早于 {later.as_of}")
    deleted = earlier.names - later.names
    logger.info(f"快照差异: {earlier.as_of} -> {later.as_of} 删除{len(deleted)}个包")
    return DeletedPackageLedger(ecosystem=earlier.ecosystem, earlier=earlier.as_of,
                                later=later.as_of, deleted=frozenset(deleted))


# ==================== 持久化 ====================

def snapshot_metadata(snapshot: RegistrySnapshot) -> Dict:
    report = snapshot.load_report
    return {
        'schema_version': 1,
        'ecosystem': snapshot.ecosystem,
        'as_of': snapshot.as_of.isoformat(),
        'count': len(snapshot.names),
        'digest': snapshot.source_digest,
        'skip_count': report.skip_count,
        'skipped_lines': [line for line, _ in report.skipped],
        'source_format': report.source_format,
        'normalization': NORMALIZATION_CONVENTION
    }


def save_snapshot_metadata(snapshot: RegistrySnapshot, path: str) -> str:
    meta_path = path + '.meta.json'
    with open(meta_path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(snapshot_metadata(snapshot), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write('\n')
    return meta_path


def save_ledger(ledger: DeletedPackageLedger, path: str):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"# ecosystem={ledger.ecosystem}\n")
        f.write(f"# earlier={ledger.earlier.isoformat()}\n")
        f.write(f"# later={ledger.later.isoformat()}\n")
        for name in sorted(ledger.deleted):
            f.write(name + '\n')
    logger.info(f"删除包账本已保存: {path} ({len(ledger.deleted)}个)")


def load_ledger(path: str) -> DeletedPackageLedger:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise UnreadableFile(f"无法读取账本 {path}: {e}")
    except UnicodeDecodeError:
        raise FormatError(f"{path} 不是UTF-8编码")

    header: Dict[str, str] = {}
    deleted = set()
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith('#'):
            body = stripped.lstrip('#').strip()
            if '=' in body:
                key, value = body.split('=', 1)
                header[key.strip()] = value.strip()
            continue
        deleted.add(stripped)
    for key in ('ecosystem', 'earlier', 'later'):
        if key not in header:
            raise FormatError(f"{path} 缺少头部字段 {key}")
    return DeletedPackageLedger(ecosystem=parse_ecosystem(header['ecosystem']),
                                earlier=_as_date(header['earlier']),
                                later=_as_date(header['later']),
                                deleted=frozenset(deleted))


# ==================== 网络抓取 ====================

def fetch_snapshot(endpoint: str, ecosystem: str, dest_path: str,
                   client: Optional[HttpClient] = None,
                   retry: Optional[RetryPolicy] = None) -> str:
    """
    抓取注册表索引并原样写入磁盘，附带元数据(抓取时间、字节数、摘要)，不做解析

    Returns:
        str: 索引文件路径
    """
    ecosystem = parse_ecosystem(ecosystem)
    if ecosystem not in FETCHABLE_ECOSYSTEMS:
        raise UnknownEcosystem(f"{ecosystem} 仅支持文件导入，不支持在线抓取")
    client = client or HttpClient(retry=retry)

    logger.info(f"开始抓取 {ecosystem} 索引: {endpoint}")
    response = client.get(endpoint)
    body = response.content

    directory = os.path.dirname(os.path.abspath(dest_path))
    os.makedirs(directory, exist_ok=True)
    with open(dest_path, 'wb') as f:
        f.write(body)

    meta = {
        'schema_version': 1,
        'ecosystem': ecosystem,
        'url': endpoint,
        'fetched_at': datetime.now(timezone.utc).isoformat(),
        'bytes': len(body),
        'digest': hashlib.sha256(body).hexdigest()
    }
    with open(dest_path + '.fetch.json', 'w', encoding='utf-8', newline='\n') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write('\n')
    logger.info(f"索引抓取完成: {dest_path} ({len(body)}字节)")
    return dest_path


class RegistryManager:
    """注册表管理器 - 按配置加载并缓存各生态系统快照"""

    def __init__(self, config_manager: ConfigManager):
        self.config_manager = config_manager
        self._snapshots: Dict[str, RegistrySnapshot] = {}

    def get_snapshot(self, ecosystem: str) -> RegistrySnapshot:
        ecosystem = parse_ecosystem(ecosystem)
        if ecosystem not in self._snapshots:
            settings = self.config_manager.get_snapshot_settings(ecosystem)
            self._snapshots[ecosystem] = load_snapshot(settings['path'], ecosystem, settings['as_of'])
        return self._snapshots[ecosystem]

    def get_other_snapshots(self, primary: str) -> Dict[str, RegistrySnapshot]:
        others = {}
        for ecosystem in self.config_manager.get_snapshot_ecosystems():
            if ecosystem != primary:
                others[ecosystem] = self.get_snapshot(ecosystem)
        return others

    def get_ledger(self) -> Optional[DeletedPackageLedger]:
        path = self.config_manager.get_ledger_path()
        return load_ledger(path) if path else None

    def snapshot_digests(self) -> Dict[str, str]:
        return {eco: snap.source_digest for eco, snap in sorted(self._snapshots.items())}
