#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
包名抽取模块
启发式1: 解析生成代码中的 pip install / npm install 命令
启发式2/3: 构造"代码需要哪些包"/"问题需要哪些包"的查询并解析模型返回的包列表
"""

import logging
import re
import shlex
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from llm_gateway import ChatRequest, language_label, package_prompt_profile
from package_registry import PackageName, normalized_form, ecosystem_for_language
from toolkit_errors import EmptyName, IllegalName, SampleMismatch

logger = logging.getLogger(__name__)

H1_INSTALL_COMMAND = 'h1_install_command'
H2_FROM_CODE = 'h2_from_code'
H3_FROM_PROMPT = 'h3_from_prompt'
HEURISTICS = (H1_INSTALL_COMMAND, H2_FROM_CODE, H3_FROM_PROMPT)


@dataclass(frozen=True)
class CodeSample:
    sample_id: str
    model_id: str
    prompt_id: str
    trial: int
    language: str
    body: str
    created_at: str = ''

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'CodeSample':
        # 样本记录中可能附带transcript_keys等额外字段
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass(frozen=True)
class PackageMention:
    name: PackageName
    heuristic: str
    sample_id: str
    model_id: str
    raw_span: str
    prompt_id: str = ''
    trial: int = 0

    @property
    def dedup_key(self) -> Tuple[str, str]:
        return self.name.normalized, self.heuristic

    def to_dict(self) -> Dict:
        return {'name': self.name.normalized, 'raw': self.name.raw, 'ecosystem': self.name.ecosystem,
                'heuristic': self.heuristic, 'sample_id': self.sample_id, 'model_id': self.model_id,
                'raw_span': self.raw_span, 'prompt_id': self.prompt_id, 'trial': self.trial}

    @classmethod
    def from_dict(cls, data: Dict) -> 'PackageMention':
        return cls(name=PackageName(raw=data['raw'], normalized=data['name'], ecosystem=data['ecosystem']),
                   heuristic=data['heuristic'], sample_id=data['sample_id'], model_id=data['model_id'],
                   raw_span=data['raw_span'], prompt_id=data.get('prompt_id', ''), trial=data.get('trial', 0))


@dataclass
class MentionSet:
    sample_id: str
    mentions: List[PackageMention] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mentions)

    def __iter__(self):
        return iter(self.mentions)

    def by_heuristic(self, heuristic: str) -> List[PackageMention]:
        return [m for m in self.mentions if m.heuristic == heuristic]

    def normalized_names(self) -> List[str]:
        return sorted({m.name.normalized for m in self.mentions})


# ==================== 启发式1: 安装命令 ====================

_HEAD_PREFIX = r'(?:^|(?<=[\s`"\'!$%(;&|]))'
_COMMAND_HEADS = {
    'python': re.compile(
        _HEAD_PREFIX
        + r'(?:pip(?:3(?:\.\d+)?)?|python(?:3(?:\.\d+)?)?\s+-m\s+pip|py\s+-m\s+pip)\s+install\b',
        re.MULTILINE),
    'javascript': re.compile(
        _HEAD_PREFIX + r'(?:npm\s+(?:install|i|add)|yarn\s+add|pnpm\s+(?:add|install|i))\b',
        re.MULTILINE),
}
_CLOSERS = {'`': '`', '"': '"', "'": "'", '(': ')'}
_CONTINUATION = re.compile(r'\\\r?\n')
_SEGMENT_END = re.compile(r'\n|&&|\|\||;|\||(?<=\s)#|(?<=\s)\d?>')

_PIP_VALUE_OPTIONS = {
    '-r', '--requirement', '-c', '--constraint', '-e', '--editable', '-i', '--index-url',
    '--extra-index-url', '-f', '--find-links', '-t', '--target', '--prefix', '--root',
    '--src', '--upgrade-strategy', '--platform', '--python-version', '--implementation',
    '--abi', '--progress-bar', '--log', '--cache-dir', '--trusted-host', '--proxy',
    '--timeout', '--retries', '--global-option', '--install-option', '--config-settings',
    '-C', '--report', '--only-binary', '--no-binary', '--exists-action', '--python',
}
_NPM_VALUE_OPTIONS = {
    '--registry', '--prefix', '-w', '--workspace', '--tag', '--cache', '--userconfig',
    '--otp', '--before', '--omit', '--include', '--install-strategy', '--cwd',
    '--network-timeout', '--modules-folder',
}
_FILE_SUFFIXES = ('.txt', '.whl', '.tar.gz', '.tgz', '.zip', '.egg', '.cfg', '.toml', '.in')
_PROSE_STOP_WORDS = {
    'and', 'then', 'or', 'to', 'in', 'with', 'for', 'if', 'the', 'a', 'an',
    'it', 'this', 'that', 'as', 'is', 'are', 'will', 'you', 'your',
}
# 这些词同时也是已注册的包名，只有跟在已抽取的名称之后且后面不是选项时才视为正文
_AMBIGUOUS_PROSE_WORDS = {
    'using', 'first', 'from', 'via', 'on', 'into', 'by', 'before', 'after',
    'which', 'inside', 'within', 'command', 'package', 'packages', 'library',
    'libraries', 'module', 'modules',
}
_TRAILING_STOP = '.:!?'
_SCOPED_NPM = re.compile(r'^@[^/@\s]+/[^/\s]+$')


def _segment_after(text: str, start: int, closer: Optional[str]) -> str:
    """取命令头之后直到行尾、命令分隔符、注释或闭合引号的参数段"""
    end = len(text)
    m = _SEGMENT_END.search(text, start)
    if m:
        end = m.start()
    if closer:
        close_at = text.find(closer, start)
        if close_at != -1:
            end = min(end, close_at)
    return text[start:end]


def _tokenize(segment: str) -> List[str]:
    try:
        tokens = shlex.split(segment, posix=True)
    except ValueError:
        return segment.split()
    if all(t in segment for t in tokens):
        return tokens
    return segment.split()


def _is_non_package(token: str, language: str) -> bool:
    lowered = token.lower()
    if '://' in token or lowered.startswith(('git+', 'hg+', 'svn+', 'bzr+', 'file:')):
        return True
    if token.startswith(('.', '~', '$', '%', '{', '<', '\\')):
        return True
    if lowered.endswith(_FILE_SUFFIXES):
        return True
    if language == 'javascript':
        if ':' in token:
            return True
        if '/' in token and not _SCOPED_NPM.match(_strip_requirement(token, language)):
            return True
    elif '/' in token or '\\' in token:
        return True
    return False


def _strip_requirement(token: str, language: str) -> str:
    if language == 'javascript':
        if token.startswith('@'):
            at = token.find('@', 1)
            return token if at == -1 else token[:at]
        return token.split('@', 1)[0]
    return re.split(r'[\[=<>!~;@]', token, maxsplit=1)[0]


def _names_from_tokens(tokens: List[str], language: str) -> List[Tuple[str, str]]:
    """返回(原始记号, 剥离后的名称)列表"""
    value_options = _PIP_VALUE_OPTIONS if language == 'python' else _NPM_VALUE_OPTIONS
    results = []
    skip_next = False
    for index, token in enumerate(tokens):
        if skip_next:
            skip_next = False
            continue
        if token.startswith('-'):
            if token in value_options:
                skip_next = True
            continue
        lowered = token.lower()
        if lowered in _PROSE_STOP_WORDS:
            break
        if lowered in _AMBIGUOUS_PROSE_WORDS and results:
            following = tokens[index + 1] if index + 1 < len(tokens) else ''
            if not following.startswith('-'):
                break
        stop_after = False
        candidate = token
        if candidate and candidate[-1] in _TRAILING_STOP and not candidate.lower().endswith(_FILE_SUFFIXES):
            candidate = candidate.rstrip(_TRAILING_STOP)
            stop_after = True
        candidate = candidate.rstrip(',')
        if candidate and not _is_non_package(candidate, language):
            name = _strip_requirement(candidate, language)
            if name:
                results.append((token, name))
        if stop_after:
            break
    return results


def extract_install_commands(sample: CodeSample) -> List[PackageMention]:
    """启发式1: 返回正文中所有安装命令的包名参数(围栏代码块内外都扫描)"""
    head = _COMMAND_HEADS.get(sample.language)
    if head is None:
        return []
    ecosystem = ecosystem_for_language(sample.language)
    body = sample.body
    text = _CONTINUATION.sub(lambda m: ' ' * len(m.group()), body)

    mentions = []
    for match in head.finditer(text):
        opener = text[match.start() - 1] if match.start() > 0 else ''
        segment = _segment_after(text, match.end(), _CLOSERS.get(opener))
        for raw_token, name in _names_from_tokens(_tokenize(segment), sample.language):
            try:
                normalized = normalized_form(name, ecosystem)
            except (EmptyName, IllegalName):
                logger.debug(f"样本{sample.sample_id}: 忽略非法安装参数 {raw_token!r}")
                continue
            mentions.append(PackageMention(
                name=PackageName(raw=name, normalized=normalized, ecosystem=ecosystem),
                heuristic=H1_INSTALL_COMMAND,
                sample_id=sample.sample_id,
                model_id=sample.model_id,
                raw_span=raw_token,
                prompt_id=sample.prompt_id,
                trial=sample.trial
            ))
    return mentions


# ==================== 启发式2/3: 包列表查询 ====================

H2_SYSTEM = ("You are a coding assistant that determines {L} packages necessary to execute code. "
             "Respond with only a list of {L} packages, separated by commas and no additional text "
             "or formatting. If there is no code provided, respond 'None', otherwise the response "
             "must begin with the name of a {L} package.")
H2_USER = "{L} packages are required to run this code: {code}"
H3_SYSTEM = ("You are a coding assistant that recommends {L} packages that would be helpful to solve "
             "given problems. Respond with only a list of {L} packages, separated by commas and no "
             "additional text or formatting. The response must begin with the name of a {L} package.")
H3_USER = "Which {L} packages would be useful in solving the following coding problem: {prompt}"


def build_package_query_from_code(sample: CodeSample, endpoint=None) -> ChatRequest:
    label = language_label(sample.language)
    messages = [
        {'role': 'system', 'content': H2_SYSTEM.format(L=label)},
        {'role': 'user', 'content': H2_USER.format(L=label, code=sample.body)},
    ]
    return ChatRequest(messages=messages, params=package_prompt_profile(endpoint))


def build_package_query_from_prompt(prompt, endpoint=None) -> ChatRequest:
    """prompt为PromptRecord，仅使用其text和language字段"""
    label = language_label(prompt.language)
    messages = [
        {'role': 'system', 'content': H3_SYSTEM.format(L=label)},
        {'role': 'user', 'content': H3_USER.format(L=label, prompt=prompt.text)},
    ]
    return ChatRequest(messages=messages, params=package_prompt_profile(endpoint))


@dataclass
class PackageListParse:
    names: List[PackageName] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)
    duplicates: int = 0

    def __iter__(self):
        return iter(self.names)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def normalized(self) -> List[str]:
        return [n.normalized for n in self.names]


_BULLET = re.compile(r'^(?:[-*•+]\s+|\d+[.)]\s+)+')
_ENTRY_TRIM = ' \t\r"\'`*'


def parse_package_list_response(response_text: str, ecosystem: str) -> PackageListParse:
    """按逗号和换行拆分模型返回的包列表，规范化并按首次出现去重"""
    result = PackageListParse()
    whole = (response_text or '').strip().strip(_ENTRY_TRIM).rstrip('.!').strip()
    if not whole or whole.lower() == 'none':
        return result

    seen = set()
    for line in response_text.split('\n'):
        if line.strip().startswith('```'):
            continue
        for entry in line.split(','):
            cleaned = _BULLET.sub('', entry.strip())
            cleaned = cleaned.strip(_ENTRY_TRIM).rstrip('.;:!?').strip(_ENTRY_TRIM)
            if not cleaned:
                continue
            try:
                normalized = normalized_form(cleaned, ecosystem)
            except (EmptyName, IllegalName):
                result.dropped.append(cleaned)
                continue
            if normalized in seen:
                result.duplicates += 1
                continue
            seen.add(normalized)
            result.names.append(PackageName(raw=cleaned, normalized=normalized, ecosystem=ecosystem))
    if result.dropped:
        logger.debug(f"包列表解析丢弃{len(result.dropped)}个条目: {result.dropped[:5]}")
    return result


def mentions_from_names(sample: CodeSample, names: Iterable[PackageName], heuristic: str) -> List[PackageMention]:
    if heuristic not in HEURISTICS:
        raise ValueError(f"未知启发式: {heuristic}")
    return [PackageMention(name=n, heuristic=heuristic, sample_id=sample.sample_id,
                           model_id=sample.model_id, raw_span=n.raw,
                           prompt_id=sample.prompt_id, trial=sample.trial)
            for n in names]


def merge_mentions(sample: CodeSample, h1: List[PackageMention], h2: List[PackageMention],
                   h3: List[PackageMention]) -> MentionSet:
    """合并三种启发式的提及，按(规范化名称, 启发式)去重"""
    merged = MentionSet(sample_id=sample.sample_id)
    seen = set()
    for group in (h1, h2, h3):
        for mention in group:
            if mention.sample_id != sample.sample_id:
                raise SampleMismatch(f"提及来自样本 {mention.sample_id}，期望 {sample.sample_id}")
            if mention.dedup_key in seen:
                continue
            seen.add(mention.dedup_key)
            merged.mentions.append(mention)
    return merged


def mention_counts(mention_set: MentionSet) -> Dict[str, int]:
    counts = {h: 0 for h in HEURISTICS}
    for m in mention_set.mentions:
        counts[m.heuristic] += 1
    return counts
