#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
提示数据集模块
构建Stack Overflow数据集和LLM生成数据集，并按近期/历史进行时间划分
"""

import csv
import hashlib
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from llm_gateway import (ChatRequest, LLMGateway, ProviderEndpoint, language_label,
                         prompt_generation_profile, raise_replay_misses)
from toolkit_errors import FormatError, MissingColumn, MixedLanguage, UnreadableFile

logger = logging.getLogger(__name__)

DATASET_SCHEMA_VERSION = 1
LANGUAGES = ('python', 'javascript')
SOURCES = ('stackoverflow', 'llm_generated')
TEMPORAL = ('recent', 'all_time')

SO_COLUMNS = ('tag', 'question_title', 'question_body', 'score', 'year_bucket')
SO_TOP_N = 20
SO_MIN_TAG_QUESTIONS = 5000
_BUCKET_ALIASES = {'2023': 'recent', 'recent': 'recent',
                   'pre-2023': 'all_time', 'all_time': 'all_time', 'all-time': 'all_time'}

PROMPT_GEN_SYSTEM = ("You are a coding assistant that assists users in creating simple prompts that "
                     "will be used to generate {L} code. No code should be used in the response.")
PROMPT_GEN_USER = ("Your answer must begin with 'Generate {L} code that' and must not be longer than "
                   "one sentence.  Do not include extra text or formatting (i.e. do not start with "
                   "'Sure! Here's a prompt...'). Write a prompt that would generate {L} code to "
                   "accomplish the same tasks as the following package description: {desc}")


@dataclass(frozen=True)
class PromptRecord:
    prompt_id: str
    text: str
    language: str
    source: str
    temporal: str
    origin_ref: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("提示文本不能为空")
        if self.language not in LANGUAGES:
            raise ValueError(f"未知语言: {self.language}")
        if self.source not in SOURCES:
            raise ValueError(f"未知来源: {self.source}")
        if self.temporal not in TEMPORAL:
            raise ValueError(f"未知时间段: {self.temporal}")

    @property
    def unique_key(self) -> Tuple[str, str, str, str]:
        return self.source, self.temporal, self.origin_ref, self.text


def make_prompt_id(source: str, temporal: str, language: str, origin_ref: str, text: str) -> str:
    digest = hashlib.sha256('\x1f'.join((source, temporal, language, origin_ref, text)).encode('utf-8'))
    prefix = 'so' if source == 'stackoverflow' else 'llm'
    return f"{prefix}-{digest.hexdigest()[:16]}"


def compute_manifest(records: Iterable[PromptRecord]) -> Dict[str, int]:
    counts = Counter(f"{r.language}/{r.source}/{r.temporal}" for r in records)
    return dict(sorted(counts.items()))


@dataclass
class PromptDataset:
    records: List[PromptRecord] = field(default_factory=list)

    @property
    def manifest(self) -> Dict[str, int]:
        return compute_manifest(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def validate(self):
        seen = set()
        for record in self.records:
            if record.unique_key in seen:
                raise FormatError(f"数据集中存在重复提示: {record.prompt_id}")
            seen.add(record.unique_key)

    def slice(self, language: Optional[str] = None, source: Optional[str] = None,
              temporal: Optional[str] = None, limit: Optional[int] = None) -> 'PromptDataset':
        selected = [r for r in self.records
                    if (language is None or r.language == language)
                    and (source is None or r.source == source)
                    and (temporal is None or r.temporal == temporal)]
        if limit is not None:
            selected = selected[:limit]
        return PromptDataset(records=selected)

    def to_dict(self) -> Dict:
        return {'schema_version': DATASET_SCHEMA_VERSION, 'manifest': self.manifest,
                'records': [asdict(r) for r in self.records]}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, separators=(',', ':'))
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    def save(self, path: str):
        self.validate()
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write('\n')
        logger.info(f"数据集已保存: {path} ({len(self.records)}条)")

    @classmethod
    def load(cls, path: str) -> 'PromptDataset':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except OSError as e:
            raise UnreadableFile(f"无法读取数据集 {path}: {e}")
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise FormatError(f"数据集格式错误 {path}: {e}")
        if data.get('schema_version') != DATASET_SCHEMA_VERSION:
            raise FormatError(f"不支持的数据集版本: {data.get('schema_version')}")
        try:
            records = [PromptRecord(**r) for r in data['records']]
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"数据集记录格式错误: {e}")
        dataset = cls(records=records)
        if dataset.manifest != data.get('manifest'):
            raise FormatError("数据集清单与记录数量不一致")
        dataset.validate()
        return dataset


@dataclass
class IngestReport:
    accepted: int = 0
    rejected_tags: List[str] = field(default_factory=list)
    discarded: Dict[str, int] = field(default_factory=dict)
    errors: List[Dict] = field(default_factory=list)

    def discard(self, reason: str, detail: str = ''):
        self.discarded[reason] = self.discarded.get(reason, 0) + 1
        logger.info(f"丢弃({reason}): {detail}")


def _is_probably_english(text: str) -> bool:
    letters = [c for c in text if c.isalpha()]
    if not letters:
        return False
    ascii_letters = sum(1 for c in letters if c.isascii())
    return ascii_letters / len(letters) >= 0.8


class PromptDatasetBuilder:
    """数据集构建器，每次操作的丢弃明细记录在report中"""

    def __init__(self):
        self.report = IngestReport()

    def ingest_stackoverflow_dump(self, path: str, language: str) -> List[PromptRecord]:
        """
        读取预先抓取的Stack Overflow表格
        每个标签在每个时间段内按得分取前20个问题，问题数不超过5000的标签被拒绝
        """
        if language not in LANGUAGES:
            raise ValueError(f"未知语言: {language}")
        try:
            with open(path, 'r', encoding='utf-8', newline='') as f:
                reader = csv.DictReader(f)
                header = reader.fieldnames or []
                missing = [c for c in SO_COLUMNS if c not in header]
                if missing:
                    raise MissingColumn(f"{path} 缺少列: {', '.join(missing)}")
                rows = list(enumerate(reader, start=2))
        except OSError as e:
            raise UnreadableFile(f"无法读取 {path}: {e}")
        except UnicodeDecodeError:
            raise FormatError(f"{path} 不是UTF-8编码")
        except csv.Error as e:
            raise FormatError(f"{path} 表格格式错误: {e}")

        groups: Dict[Tuple[str, str], List[Tuple[int, str, str]]] = defaultdict(list)
        rejected = set()
        for line, row in rows:
            tag = (row.get('tag') or '').strip()
            title = (row.get('question_title') or '').strip()
            body = (row.get('question_body') or '').strip()
            if not tag or not title:
                raise FormatError("标签或标题为空", line=line)
            try:
                score = int((row.get('score') or '').strip())
            except ValueError:
                raise FormatError(f"得分不是整数: {row.get('score')!r}", line=line)
            bucket = _BUCKET_ALIASES.get((row.get('year_bucket') or '').strip().lower())
            if bucket is None:
                raise FormatError(f"未知时间段: {row.get('year_bucket')!r}", line=line)
            count_text = (row.get('tag_question_count') or '').strip()
            if count_text:
                try:
                    tag_count = int(count_text)
                except ValueError:
                    raise FormatError(f"标签问题数不是整数: {count_text!r}", line=line)
                if tag_count <= SO_MIN_TAG_QUESTIONS:
                    rejected.add(tag)
                    continue
            groups[(tag, bucket)].append((score, title, body))

        records = []
        seen = set()
        for tag, bucket in sorted(groups, key=lambda k: (k[0], TEMPORAL.index(k[1]))):
            ranked = sorted(groups[(tag, bucket)], key=lambda q: (-q[0], q[1], q[2]))
            for score, title, body in ranked[:SO_TOP_N]:
                text = f"{title}\n\n{body}" if body else title
                key = (tag, bucket, text)
                if key in seen:
                    self.report.discard('duplicate_question', title)
                    continue
                seen.add(key)
                records.append(PromptRecord(
                    prompt_id=make_prompt_id('stackoverflow', bucket, language, tag, text),
                    text=text, language=language, source='stackoverflow',
                    temporal=bucket, origin_ref=tag))

        self.report.rejected_tags = sorted(rejected)
        self.report.accepted += len(records)
        if rejected:
            logger.warning(f"拒绝{len(rejected)}个问题数不足{SO_MIN_TAG_QUESTIONS}的标签: {sorted(rejected)}")
        logger.info(f"Stack Overflow导入完成: {len(records)}条提示")
        return records

    @staticmethod
    def load_descriptions(path: str) -> List[Tuple[str, str]]:
        """读取 package,description 两列表格"""
        try:
            with open(path, 'r', encoding='utf-8', newline='') as f:
                reader = csv.DictReader(f)
                header = reader.fieldnames or []
                missing = [c for c in ('package', 'description') if c not in header]
                if missing:
                    raise MissingColumn(f"{path} 缺少列: {', '.join(missing)}")
                return [((row.get('package') or '').strip(), (row.get('description') or '').strip())
                        for row in reader]
        except OSError as e:
            raise UnreadableFile(f"无法读取 {path}: {e}")

    def build_llm_generated_prompts(self, descriptions: Sequence[Tuple[str, str]],
                                    endpoint: ProviderEndpoint, language: str,
                                    gateway: LLMGateway, temporal: str = 'all_time') -> List[PromptRecord]:
        """按包描述生成提示，只保留以 'Generate <语言> code that' 开头的响应"""
        label = language_label(language)
        stem = f"Generate {label} code that"
        params = prompt_generation_profile(endpoint)

        pending: List[Tuple[str, str]] = []
        for package, description in descriptions:
            if not package:
                self.report.discard('missing_package', description[:40])
            elif not description:
                self.report.discard('empty_description', package)
            elif not _is_probably_english(description):
                self.report.discard('non_english_description', package)
            else:
                pending.append((package, description))

        requests = [ChatRequest(messages=[
            {'role': 'system', 'content': PROMPT_GEN_SYSTEM.format(L=label)},
            {'role': 'user', 'content': PROMPT_GEN_USER.format(L=label, desc=description)},
        ], params=params) for _, description in pending]

        records = []
        items = gateway.complete_batch(endpoint, requests)
        raise_replay_misses(items)
        seen = set()
        for (package, _), item in zip(pending, items):
            if not item.ok:
                self.report.errors.append({'package': package, **item.error})
                continue
            text = item.result.text.strip().strip('"\'`').strip()
            if not text.startswith(stem):
                self.report.discard('missing_stem', package)
                continue
            key = (package, text)
            if key in seen:
                self.report.discard('duplicate_prompt', package)
                continue
            seen.add(key)
            records.append(PromptRecord(
                prompt_id=make_prompt_id('llm_generated', temporal, language, package, text),
                text=text, language=language, source='llm_generated',
                temporal=temporal, origin_ref=package))

        self.report.accepted += len(records)
        logger.info(f"LLM提示生成完成: {len(records)}/{len(descriptions)}条被接受")
        return records


def _overlap_key(record: PromptRecord):
    if record.source == 'stackoverflow':
        return record.origin_ref, record.text
    return record.origin_ref


def split_temporal(recent: List[PromptRecord], all_time: List[PromptRecord]) -> PromptDataset:
    """两个时间段同时出现的条目只从历史集合中删除"""
    combined = list(recent) + list(all_time)
    if combined:
        kinds = {(r.language, r.source) for r in combined}
        if len(kinds) > 1:
            raise MixedLanguage(f"时间划分的输入混有不同语言或来源: {sorted(kinds)}")

    recent_keys = {_overlap_key(r) for r in recent}
    kept = [r for r in all_time if _overlap_key(r) not in recent_keys]
    removed = len(all_time) - len(kept)
    if removed:
        logger.info(f"时间划分: 从历史集合移除{removed}条重叠记录")
    return PromptDataset(records=list(recent) + kept)


# 模块级函数，供命令行和测试直接调用
def ingest_stackoverflow_dump(path: str, language: str) -> List[PromptRecord]:
    return PromptDatasetBuilder().ingest_stackoverflow_dump(path, language)


def build_llm_generated_prompts(descriptions, endpoint, language, gateway,
                                temporal: str = 'all_time') -> List[PromptRecord]:
    return PromptDatasetBuilder().build_llm_generated_prompts(descriptions, endpoint, language,
                                                              gateway, temporal)
