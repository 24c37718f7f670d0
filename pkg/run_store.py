#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
运行存储
每个run_id一个目录：清单、按类型分文件的只追加记录、报告和绘图数据
"""

import csv
import io
import json
import logging
import os
import threading
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from toolkit_errors import FormatError, RunLocked

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
RECORD_KINDS = ('sample', 'mention', 'verdict', 'report', 'error')
LOCK_NAME = 'run.lock'
MANIFEST_NAME = 'manifest.json'
REPORT_DIR = 'reports'


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(',', ':'))


@dataclass
class RunManifest:
    run_id: str
    mode: str
    toolkit_version: str
    config_digest: str = ''
    dataset_digest: str = ''
    snapshot_digests: Dict[str, str] = field(default_factory=dict)
    endpoints: List[str] = field(default_factory=list)
    normalization: str = ''
    started_at: str = ''
    finished_at: str = ''
    commands: List[str] = field(default_factory=list)
    schema_version: int = RECORD_SCHEMA_VERSION

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunManifest':
        try:
            return cls(**data)
        except TypeError as e:
            raise FormatError(f"运行清单格式错误: {e}")


class RunStore:
    """运行目录，同一时间只允许一个写入进程(run.lock)"""

    def __init__(self, root: str, run_id: str):
        if not run_id or os.sep in run_id or run_id in ('.', '..'):
            raise ValueError(f"非法的run_id: {run_id!r}")
        self.root = root
        self.run_id = run_id
        self.path = os.path.join(root, run_id)
        self._lock = threading.Lock()
        os.makedirs(self.path, exist_ok=True)

    # ==================== 锁 ====================

    @contextmanager
    def lock(self):
        lock_path = os.path.join(self.path, LOCK_NAME)
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(f"运行目录已被占用: {self.path} (如确认无进程占用，可删除 {LOCK_NAME})")
        try:
            os.write(fd, str(os.getpid()).encode('ascii'))
            os.close(fd)
            yield self
        finally:
            try:
                os.remove(lock_path)
            except OSError as e:
                logger.error(f"释放运行锁失败: {e}")

    # ==================== 清单 ====================

    def manifest_path(self) -> str:
        return os.path.join(self.path, MANIFEST_NAME)

    def read_manifest(self) -> Optional[RunManifest]:
        path = self.manifest_path()
        if not os.path.exists(path):
            return None
        with open(path, 'r', encoding='utf-8') as f:
            return RunManifest.from_dict(json.load(f))

    def write_manifest(self, manifest: RunManifest):
        with open(self.manifest_path(), 'w', encoding='utf-8', newline='\n') as f:
            json.dump(manifest.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write('\n')

    def begin(self, manifest: RunManifest, command: str) -> RunManifest:
        """在写入任何结果之前登记清单，已有清单时追加命令记录"""
        existing = self.read_manifest()
        if existing is not None:
            for key in ('config_digest', 'dataset_digest', 'normalization'):
                value = getattr(manifest, key)
                if value and not getattr(existing, key):
                    setattr(existing, key, value)
            existing.snapshot_digests.update(manifest.snapshot_digests)
            existing.endpoints = sorted(set(existing.endpoints) | set(manifest.endpoints))
            manifest = existing
        if not manifest.started_at:
            manifest.started_at = _utc_now()
        manifest.finished_at = ''
        manifest.commands.append(command)
        self.write_manifest(manifest)
        return manifest

    def finish(self, manifest: RunManifest):
        manifest.finished_at = _utc_now()
        self.write_manifest(manifest)

    # ==================== 记录 ====================

    def _kind_path(self, kind: str) -> str:
        if kind not in RECORD_KINDS:
            raise ValueError(f"未知记录类型: {kind}")
        return os.path.join(self.path, f"{kind}s.jsonl")

    def append(self, kind: str, payload: Dict):
        self.append_many(kind, [payload])

    def append_many(self, kind: str, payloads: Iterable[Dict]):
        lines = [_dumps({'run_id': self.run_id, 'kind': kind, 'schema_version': RECORD_SCHEMA_VERSION,
                         'payload': p}) + '\n' for p in payloads]
        if not lines:
            return
        with self._lock:
            with open(self._kind_path(kind), 'a', encoding='utf-8', newline='\n') as f:
                f.writelines(lines)

    def read(self, kind: str) -> List[Dict]:
        path = self._kind_path(kind)
        if not os.path.exists(path):
            return []
        payloads = []
        with open(path, 'r', encoding='utf-8') as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise FormatError(f"{path} 记录损坏: {e}", line=number)
                if record.get('schema_version') != RECORD_SCHEMA_VERSION:
                    raise FormatError(f"{path} 记录版本不支持", line=number)
                payloads.append(record['payload'])
        return payloads

    def completed_pairs(self, model_id: Optional[str] = None) -> Set[Tuple[str, int]]:
        """已持久化样本的(prompt_id, trial)，可按模型过滤"""
        return {(s['prompt_id'], s['trial']) for s in self.read('sample')
                if model_id is None or s['model_id'] == model_id}

    def save_report_record(self, name: str, data: Dict) -> bool:
        """相同内容的报告记录只追加一次"""
        payload = {'name': name, 'data': data}
        encoded = _dumps(payload)
        if any(_dumps(p) == encoded for p in self.read('report')):
            return False
        self.append('report', payload)
        return True

    def latest_report(self, name: str) -> Optional[Dict]:
        found = None
        for payload in self.read('report'):
            if payload.get('name') == name:
                found = payload['data']
        return found

    def report_names(self) -> List[str]:
        return sorted({p['name'] for p in self.read('report')})


# ==================== 报告输出 ====================

def _cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)


class ReportEmitter:
    """把报告写成CSV表格、JSON和绘图序列文件，并维护reports/index.json"""

    def __init__(self, store: RunStore):
        self.store = store
        self.directory = os.path.join(store.path, REPORT_DIR)
        os.makedirs(self.directory, exist_ok=True)

    def _write(self, filename: str, text: str) -> str:
        path = os.path.join(self.directory, filename)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        self._index(filename)
        return path

    def _index(self, filename: str):
        index_path = os.path.join(self.directory, 'index.json')
        entries = {}
        if os.path.exists(index_path):
            with open(index_path, 'r', encoding='utf-8') as f:
                entries = {e['file']: e for e in json.load(f)['files']}
        kind = 'table' if filename.endswith('.csv') else 'json'
        if filename.startswith('plot_'):
            kind = 'series'
        entries[filename] = {'file': filename, 'kind': kind, 'schema_version': RECORD_SCHEMA_VERSION}
        with open(index_path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump({'run_id': self.store.run_id, 'schema_version': RECORD_SCHEMA_VERSION,
                       'files': [entries[k] for k in sorted(entries)]}, f, indent=2, sort_keys=True)
            f.write('\n')

    def write_table(self, name: str, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
        return self._write(f"{name}.csv", buf.getvalue())

    def write_json(self, name: str, data: Dict) -> str:
        text = json.dumps({'schema_version': RECORD_SCHEMA_VERSION, 'name': name, 'data': data},
                          ensure_ascii=False, indent=2, sort_keys=True) + '\n'
        return self._write(f"{name}.json", text)

    def write_series(self, name: str, x_label: str, y_label: str, points: Iterable[Tuple]) -> str:
        return self.write_table(f"plot_{name}", [x_label, y_label], points)

    def emit(self, name: str, data: Dict) -> List[str]:
        """按报告名写出JSON及对应的表格/绘图序列"""
        written = [self.write_json(name, data)]
        if name == 'rates':
            columns = ['model', 'total_hallucinated', 'total', 'total_rate', 'llm_generated_rate',
                       'stackoverflow_rate', 'install_command_rate', 'unique_hallucinations']
            written.append(self.write_table(name, columns, ([r[c] for c in columns] for r in data['rows'])))
        elif name.startswith('rate_by_'):
            columns = ['value', 'hallucinated', 'total', 'rate', 'unique_hallucinations',
                       'sample_dedup_hallucinated', 'sample_dedup_total']
            written.append(self.write_table(name, columns, ([r[c] for c in columns] for r in data['rows'])))
        elif name == 'persistence':
            written.append(self.write_series('repetition_histogram', 'repetitions', 'prompts',
                                             list(enumerate(data['histogram']))))
        elif name == 'verbosity':
            written.append(self.write_table(name, ['model', 'unique_packages', 'rate'],
                                            ([r['model'], r['unique_packages'], r['rate']] for r in data['rows'])))
            written.append(self.write_series('unique_vs_rate', 'unique_packages', 'rate',
                                             [(r['unique_packages'], r['rate']) for r in data['rows']]))
        elif name == 'distance':
            written.append(self.write_series('distance_histogram', 'bin', 'count',
                                             list(zip(data['bins'], data['counts']))))
        elif name == 'overlap':
            written.append(self.write_series('model_count_histogram', 'models', 'hallucinated_names',
                                             [(int(k), v) for k, v in data['hallucinated'].items()]))
        elif name == 'sweep':
            written.append(self.write_series(f"rate_vs_{data['axis']}", data['axis'], 'rate',
                                             [(r['value'], r['rate']) for r in data['rows']]))
        elif name == 'recency':
            written.append(self.write_table(name, ['model', 'recent_rate', 'all_time_rate', 'delta'],
                                            ([r['model'], r['recent_rate'], r['all_time_rate'], r['delta']]
                                             for r in data['rows'])))
        elif name == 'mitigation':
            written.append(self.write_table(name, ['policy', 'hallucinated', 'total', 'rate'],
                                            ([r['policy'], r['hallucinated'], r['total'], r['rate']]
                                             for r in data['rows'])))
            written.append(self.write_series('mitigation_comparison', 'policy', 'rate',
                                             [(r['policy'], r['rate']) for r in data['rows']]))
        logger.info(f"报告已输出: {name} ({len(written)}个文件)")
        return written
