#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
生成前缓解策略
检索增强(RAG)、自我修正、二者的组合，以及按策略评估幻觉率
"""

import hashlib
import json
import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from generation_runner import VALIDITY_QUESTION, GenerationRunner
from hallucination_metrics import RateReport, Verdict, classify, hallucination_rate, parse_validity_answer
from llm_gateway import (ChatRequest, GenerationParams, LLMGateway, ProviderEndpoint, error_record,
                         language_label, package_prompt_profile, prompt_generation_profile,
                         raise_replay_misses)
from package_extraction import (H2_FROM_CODE, H2_SYSTEM, H2_USER, H3_FROM_PROMPT, H3_SYSTEM, H3_USER,
                                CodeSample, MentionSet)
from package_registry import RegistrySnapshot, normalized_form
from prompt_datasets import PromptRecord
from toolkit_config import POLICY_KINDS, ConfigManager
from toolkit_errors import EmptyName, EmptyStore, FormatError, IllegalName, ReplayMiss

logger = logging.getLogger(__name__)

KB_SCHEMA_VERSION = 1
MAX_REFINE_ITERATIONS = 5

STATEMENT_TEMPLATE = "Package {package} could answer questions about {topic}"
KB_QUESTION_SYSTEM = ("You are a helpful assistant that writes a list of five questions that a {L} "
                      "package could help answer. Respond with one question per line and no "
                      "additional text.")
KB_QUESTION_USER = "Package: {package}\nDescription: {description}"
RAG_SECTION_HEADER = "Relevant packages:"
EXCLUSION_INSTRUCTION = "Do not use the following packages, they do not exist: {names}."

_QUESTION_BULLET = re.compile(r'^(?:[-*•+]\s+|\d+[.)]\s+|Q\d+[:.]\s*)+')
_TOKEN = re.compile(r'[a-z0-9]+')


# ==================== 嵌入 ====================

class LexicalEmbedder:
    """词频向量嵌入：词元哈希到固定维度后做L2归一化，结果与运行环境无关"""

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError(f"嵌入维度必须 >= 1: {dimension}")
        self.dimension = dimension

    def describe(self) -> Dict:
        return {'kind': 'lexical', 'dimension': self.dimension}

    def _bucket(self, token: str) -> int:
        return int(hashlib.sha256(token.encode('utf-8')).hexdigest()[:8], 16) % self.dimension

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        matrix = np.zeros((len(texts), self.dimension), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in _TOKEN.findall(text.lower()):
                matrix[row, self._bucket(token)] += 1.0
        return _normalize_rows(matrix)


class RemoteEmbedder:
    """通过网关调用 /embeddings 端点"""

    def __init__(self, gateway: LLMGateway, endpoint: ProviderEndpoint, batch_size: int = 64):
        self.gateway = gateway
        self.endpoint = endpoint
        self.batch_size = batch_size

    def describe(self) -> Dict:
        return {'kind': 'remote', 'endpoint': self.endpoint.name, 'model_id': self.endpoint.model_id}

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        rows: List[List[float]] = []
        for start in range(0, len(texts), self.batch_size):
            rows.extend(self.gateway.embed(self.endpoint, list(texts[start:start + self.batch_size])))
        if not rows:
            return np.zeros((0, 0), dtype=np.float64)
        return _normalize_rows(np.asarray(rows, dtype=np.float64))


def _normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return matrix / norms


def embedder_from_config(config_manager: ConfigManager, gateway: LLMGateway):
    settings = config_manager.get_embedding_settings()
    if settings['kind'] == 'remote':
        return RemoteEmbedder(gateway, ProviderEndpoint.from_config(config_manager, settings['endpoint']))
    return LexicalEmbedder()


# ==================== 知识库 ====================

@dataclass(frozen=True)
class KnowledgeStatement:
    package: str
    topic: str
    text: str


class RetrievalStore:
    """知识陈述 + 嵌入矩阵，构建后不再修改，可在线程间共享"""

    def __init__(self, statements: Sequence[KnowledgeStatement], embeddings: np.ndarray, embedder):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if len(statements) and embeddings.shape[0] != len(statements):
            raise ValueError(f"嵌入数量{embeddings.shape[0]}与陈述数量{len(statements)}不一致")
        self.statements = list(statements)
        self.embeddings = _normalize_rows(embeddings) if len(statements) else embeddings
        self.embedder = embedder

    @property
    def dimension(self) -> int:
        return int(self.embeddings.shape[1]) if len(self.statements) else 0

    def __len__(self) -> int:
        return len(self.statements)

    def save(self, path: str):
        data = {
            'schema_version': KB_SCHEMA_VERSION,
            'embedder': self.embedder.describe(),
            'dimension': self.dimension,
            'statements': [dict(asdict(s), embedding=[float(x) for x in self.embeddings[i]])
                           for i, s in enumerate(self.statements)],
        }
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data, f, ensure_ascii=False, indent=1, sort_keys=True)
            f.write('\n')
        logger.info(f"知识库已保存: {path} ({len(self)}条陈述)")

    @classmethod
    def load(cls, path: str, embedder) -> 'RetrievalStore':
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        if data.get('schema_version') != KB_SCHEMA_VERSION:
            raise FormatError(f"知识库 {path} 版本不支持: {data.get('schema_version')}")
        if data.get('embedder') != embedder.describe():
            logger.warning(f"知识库嵌入方式 {data.get('embedder')} 与当前 {embedder.describe()} 不一致")
        rows = data.get('statements', [])
        statements = [KnowledgeStatement(package=r['package'], topic=r['topic'], text=r['text']) for r in rows]
        embeddings = np.asarray([r['embedding'] for r in rows], dtype=np.float64)
        if rows and embeddings.ndim != 2:
            raise FormatError(f"知识库 {path} 的嵌入维度不一致")
        return cls(statements, embeddings.reshape(len(rows), -1), embedder)


def _question_topics(text: str, limit: int) -> List[str]:
    topics = []
    for line in (text or '').split('\n'):
        topic = _QUESTION_BULLET.sub('', line.strip()).strip().rstrip('?.!').strip()
        if topic and topic.lower() != 'none':
            topics.append(topic)
        if len(topics) == limit:
            break
    return topics


def build_knowledge_base(packages: Sequence[Tuple[str, str]], endpoint: ProviderEndpoint,
                         gateway: LLMGateway, snapshot: RegistrySnapshot, embedder,
                         questions_per_package: int = 5, language: str = 'python') -> RetrievalStore:
    """
    为每个(包名, 描述)生成至多questions_per_package个问题，
    渲染为 "Package [x] could answer questions about [y]" 陈述，去除完全重复后嵌入
    """
    label = language_label(language)
    accepted: List[str] = []
    requests = []
    for raw, description in packages:
        try:
            name = normalized_form(raw, snapshot.ecosystem)
        except (EmptyName, IllegalName) as e:
            logger.warning(f"知识库: 跳过非法包名 {raw!r}: {e}")
            continue
        if name not in snapshot:
            logger.warning(f"知识库: {name} 不在 {snapshot.ecosystem} 主列表中，已跳过")
            continue
        accepted.append(name)
        requests.append(ChatRequest(
            messages=[{'role': 'system', 'content': KB_QUESTION_SYSTEM.format(L=label)},
                      {'role': 'user', 'content': KB_QUESTION_USER.format(package=name,
                                                                          description=description)}],
            params=prompt_generation_profile(endpoint)))

    statements: List[KnowledgeStatement] = []
    seen = set()
    failed = 0
    items = gateway.complete_batch(endpoint, requests)
    raise_replay_misses(items)
    for name, item in zip(accepted, items):
        if not item.ok:
            failed += 1
            continue
        for topic in _question_topics(item.result.text, questions_per_package):
            text = STATEMENT_TEMPLATE.format(package=name, topic=topic)
            if text in seen:
                continue
            seen.add(text)
            statements.append(KnowledgeStatement(package=name, topic=topic, text=text))

    embeddings = embedder.embed([s.text for s in statements]) if statements else np.zeros((0, 0))
    logger.info(f"知识库构建完成: {len(accepted)}个包, {len(statements)}条陈述, {failed}个包生成失败")
    return RetrievalStore(statements, embeddings, embedder)


def retrieve(store: RetrievalStore, query: str, k: int = 5) -> List[KnowledgeStatement]:
    """余弦相似度降序取前k条，相似度相同时按插入顺序"""
    if store is None or len(store) == 0:
        raise EmptyStore("知识库为空")
    if k <= 0:
        return []
    q = store.embedder.embed([query])[0]
    if q.shape[0] != store.dimension:
        raise FormatError(f"查询嵌入维度{q.shape[0]}与知识库维度{store.dimension}不一致")
    similarity = np.round(store.embeddings @ q, 12)
    order = np.lexsort((np.arange(len(store)), -similarity))
    return [store.statements[i] for i in order[:k]]


def rag_augment(prompt_text: str, store: Optional[RetrievalStore], k: int = 5) -> str:
    """在原提示之后追加检索到的陈述，原提示保持不变"""
    if k <= 0 or store is None or len(store) == 0:
        return prompt_text
    lines = [f"- {s.text}" for s in retrieve(store, prompt_text, k)]
    return f"{prompt_text}\n\n{RAG_SECTION_HEADER}\n" + '\n'.join(lines)


# ==================== 自我修正 ====================

@dataclass
class RefinementIteration:
    response: str
    mentions: List[str]
    flagged: List[str]
    instruction: str = ''


@dataclass
class RefinementTrace:
    prompt_id: str
    iterations: List[RefinementIteration] = field(default_factory=list)
    terminated_by: str = ''
    error: Optional[Dict] = None

    @property
    def final_response(self) -> Optional[str]:
        return self.iterations[-1].response if self.iterations else None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['final_response'] = self.final_response
        return data


class ValidityJudge:
    """用 "Is [name] a valid <语言> package?" 询问模型，同一名称只问一次"""

    def __init__(self, gateway: LLMGateway, endpoint: ProviderEndpoint, question: str = VALIDITY_QUESTION):
        self.gateway = gateway
        self.endpoint = endpoint
        self.question = question
        self.answers: Dict[Tuple[str, str], str] = {}
        self._lock = threading.Lock()
        self._pending: Dict[Tuple[str, str], threading.Lock] = {}

    def answer(self, name: str, language: str) -> str:
        key = (language, name)
        with self._lock:
            if key in self.answers:
                return self.answers[key]
            key_lock = self._pending.setdefault(key, threading.Lock())
        # 同一名称的并发询问只发出一次请求
        with key_lock:
            with self._lock:
                if key in self.answers:
                    return self.answers[key]
            request = ChatRequest(
                messages=[{'role': 'user',
                           'content': self.question.format(name=name, L=language_label(language))}],
                params=package_prompt_profile(self.endpoint))
            result = self.gateway.complete_request(self.endpoint, request)
            answer = parse_validity_answer(result.text)
            with self._lock:
                self.answers[key] = answer
                self._pending.pop(key, None)
        return answer

    def flagged(self, names: Iterable[str], language: str) -> List[str]:
        return [n for n in names if self.answer(n, language) == 'invalid']


def self_refine(prompt: PromptRecord, runner: GenerationRunner, trial: int = 0,
                trial_nonce: Optional[int] = None, judge: Optional[ValidityJudge] = None,
                max_iterations: int = MAX_REFINE_ITERATIONS, prompt_text: Optional[str] = None,
                code_params: Optional[GenerationParams] = None,
                package_params: Optional[GenerationParams] = None) -> Tuple[RefinementTrace, Optional[MentionSet]]:
    """
    生成 -> 抽取 -> 逐个询问有效性 -> 带排除指令重新生成，
    直到没有被标记的包或达到max_iterations；被标记过的名称在后续迭代中持续排除
    """
    if not 1 <= max_iterations <= MAX_REFINE_ITERATIONS:
        raise ValueError(f"max_iterations必须在[1, {MAX_REFINE_ITERATIONS}]内: {max_iterations}")
    judge = judge or ValidityJudge(runner.gateway, runner.endpoint)
    base_text = prompt.text if prompt_text is None else prompt_text
    trace = RefinementTrace(prompt_id=prompt.prompt_id)
    excluded: List[str] = []
    final: Optional[MentionSet] = None

    for _ in range(max_iterations):
        text = base_text
        if excluded:
            text = f"{base_text}\n\n{EXCLUSION_INSTRUCTION.format(names=', '.join(excluded))}"
        try:
            outcome = runner.generate_sample(prompt, trial, trial_nonce=trial_nonce, code_params=code_params,
                                             package_params=package_params, prompt_text=text)
            names = outcome.mentions.normalized_names()
            flagged = judge.flagged(names, prompt.language)
        except ReplayMiss:
            raise
        except Exception as e:
            logger.warning(f"自我修正中断 {prompt.prompt_id}: {e}")
            trace.terminated_by = 'error'
            trace.error = error_record(e)
            return trace, final

        final = outcome.mentions
        iteration = RefinementIteration(response=outcome.sample.body, mentions=names, flagged=flagged)
        trace.iterations.append(iteration)
        if not flagged:
            trace.terminated_by = 'clean'
            return trace, final
        excluded.extend(n for n in flagged if n not in excluded)
        iteration.instruction = EXCLUSION_INSTRUCTION.format(names=', '.join(excluded))

    trace.terminated_by = 'max_iterations'
    return trace, final


def ensemble(prompt: PromptRecord, store: Optional[RetrievalStore], runner: GenerationRunner,
             k: int = 5, **kwargs) -> Tuple[RefinementTrace, Optional[MentionSet]]:
    """先做检索增强，再对增强后的提示做自我修正"""
    return self_refine(prompt, runner, prompt_text=rag_augment(prompt.text, store, k), **kwargs)


# ==================== 策略评估 ====================

@dataclass
class MitigationPolicy:
    name: str
    kind: str
    k: int = 5
    max_iterations: int = MAX_REFINE_ITERATIONS
    store: Optional[RetrievalStore] = None
    judge: Optional[ProviderEndpoint] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"未知缓解策略类型: {self.kind}")

    @classmethod
    def from_config(cls, config_manager: ConfigManager, name: str, embedder=None,
                    store: Optional[RetrievalStore] = None) -> 'MitigationPolicy':
        s = config_manager.get_policy_settings(name)
        if store is None and s['store'] and s['kind'] in ('rag', 'ensemble'):
            store = RetrievalStore.load(s['store'], embedder or LexicalEmbedder())
        judge = ProviderEndpoint.from_config(config_manager, s['judge_endpoint']) if s['judge_endpoint'] else None
        return cls(name=name, kind=s['kind'], k=s['k'], max_iterations=s['max_iterations'],
                   store=store, judge=judge)


@dataclass
class MitigationEvaluation:
    reports: Dict[str, RateReport]
    pairs: Dict[str, List[str]]
    traces: Dict[str, List[RefinementTrace]]
    failed: Dict[str, int]

    @property
    def fair(self) -> bool:
        """所有策略消耗的(提示, 试次标识)完全一致"""
        consumed = list(self.pairs.values())
        return all(p == consumed[0] for p in consumed)

    def rows(self) -> List[Dict]:
        return [{'policy': name, 'hallucinated': r.hallucinated, 'total': r.total, 'rate': r.rate}
                for name, r in self.reports.items()]

    def to_dict(self) -> Dict:
        return {'rows': self.rows(), 'fair': self.fair, 'failed': dict(self.failed),
                'terminations': {name: _termination_counts(t) for name, t in self.traces.items() if t}}


def _termination_counts(traces: Sequence[RefinementTrace]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for trace in traces:
        counts[trace.terminated_by] = counts.get(trace.terminated_by, 0) + 1
    return dict(sorted(counts.items()))


def _run_policy(policy: MitigationPolicy, prompt: PromptRecord, trial: int, nonce: int,
                runner: GenerationRunner, judge: ValidityJudge) -> Tuple[Optional[MentionSet], Optional[RefinementTrace]]:
    if policy.kind == 'baseline':
        return runner.generate_sample(prompt, trial, trial_nonce=nonce).mentions, None
    if policy.kind == 'rag':
        text = rag_augment(prompt.text, policy.store, policy.k)
        return runner.generate_sample(prompt, trial, trial_nonce=nonce, prompt_text=text).mentions, None
    if policy.kind == 'self_refine':
        trace, mentions = self_refine(prompt, runner, trial, nonce, judge, policy.max_iterations)
    else:
        trace, mentions = ensemble(prompt, policy.store, runner, k=policy.k, trial=trial,
                                   trial_nonce=nonce, judge=judge, max_iterations=policy.max_iterations)
    if trace.terminated_by == 'error':
        return None, trace
    return mentions, trace


def evaluate_mitigation(prompts: Sequence[PromptRecord], runner: GenerationRunner,
                        policies: Sequence[MitigationPolicy], snapshot: RegistrySnapshot,
                        trials: int = 1, nonce_base: int = 0) -> MitigationEvaluation:
    """同一批提示和试次标识下依次运行每个策略，按主列表计算各策略的幻觉率"""
    jobs = [(p, t, nonce_base + t) for p in prompts for t in range(trials)]
    judges: Dict[str, ValidityJudge] = {}
    reports: Dict[str, RateReport] = {}
    pairs: Dict[str, List[str]] = {}
    traces: Dict[str, List[RefinementTrace]] = {}
    failed: Dict[str, int] = {}

    for policy in policies:
        judge_endpoint = policy.judge or runner.endpoint
        judge = judges.setdefault(judge_endpoint.name, ValidityJudge(runner.gateway, judge_endpoint))

        def run(job):
            prompt, trial, nonce = job
            try:
                return _run_policy(policy, prompt, trial, nonce, runner, judge), None
            except ReplayMiss:
                raise
            except Exception as e:
                logger.warning(f"策略 {policy.name} 在 {prompt.prompt_id} 上失败: {e}")
                return (None, None), error_record(e)

        with ThreadPoolExecutor(max_workers=runner.endpoint.max_parallel) as pool:
            results = list(pool.map(run, jobs))

        mentions = []
        pairs[policy.name] = []
        traces[policy.name] = []
        failed[policy.name] = 0
        for (prompt, _, nonce), ((mention_set, trace), error) in zip(jobs, results):
            # 样本ID包含端点、提示和试次标识
            consumed = mention_set.sample_id if mention_set is not None else \
                f"{runner.endpoint.name}/{prompt.prompt_id}/{nonce}"
            pairs[policy.name].append(consumed)
            if trace is not None:
                traces[policy.name].append(trace)
            if error is not None or mention_set is None:
                failed[policy.name] += 1
                continue
            mentions.extend(mention_set)
        report = hallucination_rate(classify(mentions, snapshot, enrich=False))
        report.scope.update({'policy': policy.name})
        reports[policy.name] = report
        logger.info(f"缓解策略 {policy.name}: 幻觉率 {report.rate} ({report.hallucinated}/{report.total})")

    evaluation = MitigationEvaluation(reports=reports, pairs=pairs, traces=traces, failed=failed)
    if not evaluation.fair:
        logger.error("缓解策略评估: 各策略消耗的(提示, 试次)不一致")
    return evaluation


# ==================== 微调数据 ====================

def build_finetune_pairs(samples: Sequence[CodeSample], verdicts: Sequence[Verdict],
                         prompts: Mapping[str, PromptRecord]) -> List[Dict]:
    """
    由生成结果构造对话格式的微调样本：(代码 -> 包列表) 与 (提示 -> 包列表)，
    剔除所有幻觉名称；剔除后为空的列表不输出
    """
    valid: Dict[Tuple[str, str], List[str]] = {}
    for v in verdicts:
        if v.is_hallucination or v.mention.heuristic not in (H2_FROM_CODE, H3_FROM_PROMPT):
            continue
        names = valid.setdefault((v.mention.sample_id, v.mention.heuristic), [])
        if v.mention.name.normalized not in names:
            names.append(v.mention.name.normalized)

    pairs = []
    for sample in samples:
        label = language_label(sample.language)
        code_names = valid.get((sample.sample_id, H2_FROM_CODE))
        if code_names:
            pairs.append({'messages': [
                {'role': 'system', 'content': H2_SYSTEM.format(L=label)},
                {'role': 'user', 'content': H2_USER.format(L=label, code=sample.body)},
                {'role': 'assistant', 'content': ', '.join(code_names)}]})
        prompt = prompts.get(sample.prompt_id)
        prompt_names = valid.get((sample.sample_id, H3_FROM_PROMPT))
        if prompt is not None and prompt_names:
            pairs.append({'messages': [
                {'role': 'system', 'content': H3_SYSTEM.format(L=label)},
                {'role': 'user', 'content': H3_USER.format(L=label, prompt=prompt.text)},
                {'role': 'assistant', 'content': ', '.join(prompt_names)}]})
    logger.info(f"微调样本: {len(samples)}个代码样本生成{len(pairs)}条对话")
    return pairs


def save_finetune_pairs(pairs: Sequence[Dict], path: str) -> str:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for pair in pairs:
            f.write(json.dumps(pair, ensure_ascii=False, sort_keys=True) + '\n')
    return path
