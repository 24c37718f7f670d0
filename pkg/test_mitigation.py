#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
缓解策略测试
检索排序、检索增强、自我修正终止条件、策略评估和微调数据
"""

import json
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import date

import numpy as np
import pytest

from conftest import FailingSession, make_gateway
from generation_runner import GenerationRunner
from hallucination_metrics import Verdict
from mitigation import (RAG_SECTION_HEADER, KnowledgeStatement, LexicalEmbedder, MitigationEvaluation,
                        MitigationPolicy, RetrievalStore, ValidityJudge, build_finetune_pairs,
                        build_knowledge_base, ensemble, evaluate_mitigation, rag_augment, retrieve,
                        save_finetune_pairs, self_refine)
from package_extraction import H1_INSTALL_COMMAND, H2_FROM_CODE, H3_FROM_PROMPT, CodeSample, PackageMention
from package_registry import RegistrySnapshot, normalize_name
from prompt_datasets import PromptRecord, make_prompt_id
from toolkit_config import ConfigManager
from toolkit_errors import EmptyStore

VALIDITY = re.compile(r'Is (\S+) a valid Python package\?')
EXCLUDED = re.compile(r'they do not exist: ([^.]+)\.')


class FixedEmbedder:
    """按文本查表返回向量"""

    def __init__(self, vectors):
        self.vectors = vectors

    def describe(self):
        return {'kind': 'fixed'}

    def embed(self, texts):
        return np.asarray([self.vectors[t] for t in texts], dtype=np.float64)


def _prompt(text, origin='pkg'):
    return PromptRecord(prompt_id=make_prompt_id('llm_generated', 'recent', 'python', origin, text), text=text,
                        language='python', source='llm_generated', temporal='recent', origin_ref=origin)


def _statement(i):
    return KnowledgeStatement(package=f'p{i}', topic=f'topic {i}',
                              text=f'Package p{i} could answer questions about topic {i}')


def _fixed_store(rows, query):
    statements = [_statement(i) for i in range(len(rows))]
    embedder = FixedEmbedder({'query': query})
    return RetrievalStore(statements, np.asarray(rows, dtype=np.float64), embedder)


def _user(payload):
    return payload['messages'][-1]['content']


def _system(payload):
    return next((m['content'] for m in payload['messages'] if m['role'] == 'system'), '')


def _excluded(user):
    m = EXCLUDED.search(user)
    return m.group(1).split(', ') if m else []


# ==================== 检索 ====================

def test_retrieve_orders_by_similarity_then_insertion():
    store = _fixed_store([[1, 0], [0, 1], [1, 0], [1, 1]], [1, 0])
    assert [s.package for s in retrieve(store, 'query', k=2)] == ['p0', 'p2']
    assert [s.package for s in retrieve(store, 'query', k=10)] == ['p0', 'p2', 'p3', 'p1']
    assert retrieve(store, 'query', k=0) == []


def test_retrieve_matches_brute_force_on_random_stores():
    """100个随机库(取值0/1，大量并列)与逐条排序结果一致"""
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        rows = rng.integers(0, 2, size=(n, 3)).tolist()
        query = rng.integers(0, 3, size=3).tolist()
        store = _fixed_store(rows, query)
        similarity = np.round(store.embeddings @ np.asarray(query, dtype=np.float64), 12)
        expected = sorted(range(n), key=lambda i: (-similarity[i], i))[:5]
        assert [s.package for s in retrieve(store, 'query', k=5)] == [f'p{i}' for i in expected]


def test_retrieve_empty_store_raises():
    empty = RetrievalStore([], np.zeros((0, 0)), LexicalEmbedder())
    with pytest.raises(EmptyStore):
        retrieve(empty, 'anything')
    assert rag_augment('unchanged', empty) == 'unchanged'
    assert rag_augment('unchanged', None) == 'unchanged'


def test_rag_augment_keeps_prompt_verbatim():
    store = _fixed_store([[1, 0], [0, 1], [1, 1]], [1, 0])
    text = rag_augment('query', store, k=2)
    assert text.startswith(f"query\n\n{RAG_SECTION_HEADER}\n")
    assert text.split('\n')[3:] == ['- Package p0 could answer questions about topic 0',
                                    '- Package p2 could answer questions about topic 2']
    assert rag_augment('query', store, k=0) == 'query'


def test_lexical_embedder_is_normalized_and_deterministic():
    vectors = LexicalEmbedder().embed(['Parse JSON files', 'parse json FILES', ''])
    assert vectors.shape == (3, 256)
    assert np.allclose(vectors[0], vectors[1])
    assert np.linalg.norm(vectors[0]) == pytest.approx(1.0)
    assert not vectors[2].any()
    with pytest.raises(ValueError):
        LexicalEmbedder(0)


# ==================== 知识库 ====================

def test_build_knowledge_base(endpoint, pypi_snapshot, tmp_path):
    packages = [('requests', 'HTTP for humans'), ('notreal-pkg', 'x'), ('bad name!', 'y'),
                ('NumPy', 'arrays'), ('requests', 'again')]
    store = build_knowledge_base(packages, endpoint, make_gateway(), pypi_snapshot, LexicalEmbedder(),
                                 questions_per_package=3)
    assert [s.package for s in store.statements] == ['requests'] * 3 + ['numpy'] * 3
    assert store.statements[0].text == 'Package requests could answer questions about How to use it for task 1'
    assert store.dimension == 256

    path = str(tmp_path / 'kb.json')
    store.save(path)
    loaded = RetrievalStore.load(path, LexicalEmbedder())
    assert loaded.statements == store.statements
    assert np.allclose(loaded.embeddings, store.embeddings)


def test_build_knowledge_base_without_valid_packages(endpoint, pypi_snapshot):
    store = build_knowledge_base([('ghost-only', 'nothing')], endpoint, make_gateway(), pypi_snapshot,
                                 LexicalEmbedder())
    assert len(store) == 0
    assert rag_augment('prompt', store) == 'prompt'


# ==================== 自我修正 ====================

def rounds_responder(payload):
    """提示中 "needs N rounds" 表示第N次迭代才不再推荐ghost包"""
    user, system = _user(payload), _system(payload)
    question = VALIDITY.match(user)
    if question:
        return 'No' if question.group(1).startswith('ghost') else 'Yes'
    if 'recommends' not in system:
        return 'print(1)' if 'generates' in system else 'None'
    needed = int(re.search(r'needs (\d+) rounds', user).group(1))
    excluded = _excluded(user)
    if len(excluded) < needed - 1:
        return f'requests, ghost-{len(excluded)}'
    return 'requests'


@pytest.mark.parametrize('needed', [1, 3, 5])
def test_self_refine_terminates_when_clean(endpoint, needed):
    runner = GenerationRunner(make_gateway(rounds_responder), endpoint)
    trace, final = self_refine(_prompt(f'Generate Python code that needs {needed} rounds'), runner)
    assert trace.terminated_by == 'clean'
    assert len(trace.iterations) == needed
    assert final.normalized_names() == ['requests']
    if needed == 3:
        assert trace.iterations[0].flagged == ['ghost-0']
        assert trace.iterations[1].instruction.endswith('they do not exist: ghost-0, ghost-1.')


def test_self_refine_stops_at_iteration_limit(endpoint):
    runner = GenerationRunner(make_gateway(rounds_responder), endpoint)
    trace, final = self_refine(_prompt('Generate Python code that needs 8 rounds'), runner)
    assert trace.terminated_by == 'max_iterations'
    assert len(trace.iterations) == 5
    assert final.normalized_names() == ['ghost-4', 'requests']
    assert trace.to_dict()['final_response'] == 'print(1)'


def test_self_refine_iteration_bound_on_random_cases(endpoint):
    rng = random.Random(5)
    runner = GenerationRunner(make_gateway(rounds_responder), endpoint)
    for case in range(1000):
        needed, limit = rng.randint(1, 8), rng.randint(1, 5)
        trace, _ = self_refine(_prompt(f'Generate Python code that needs {needed} rounds', f'c{case}'),
                               runner, max_iterations=limit)
        assert len(trace.iterations) == min(needed, limit)
        assert trace.terminated_by == ('clean' if needed <= limit else 'max_iterations')
    with pytest.raises(ValueError):
        self_refine(_prompt('x'), runner, max_iterations=6)


def test_self_refine_records_errors(endpoint):
    runner = GenerationRunner(make_gateway(session=FailingSession(rounds_responder)), endpoint)
    trace, final = self_refine(_prompt('broken needs 2 rounds'), runner)
    assert trace.terminated_by == 'error'
    assert trace.error['error'] == 'HttpStatusError'
    assert final is None


def test_validity_judge_asks_each_name_once_under_concurrency(endpoint):
    release = threading.Event()

    def responder(payload):
        release.wait(2)
        return 'No'

    gateway = make_gateway(responder)
    judge = ValidityJudge(gateway, endpoint)
    with ThreadPoolExecutor(max_workers=8) as pool:
        futures = [pool.submit(judge.answer, 'ghostlib', 'python') for _ in range(8)]
        time.sleep(0.05)
        release.set()
        answers = [f.result() for f in futures]
    assert answers == ['invalid'] * 8
    assert len(gateway.session.chat_payloads) == 1
    assert judge.answer('ghostlib', 'python') == 'invalid'
    assert len(gateway.session.chat_payloads) == 1


def test_ensemble_refines_the_augmented_prompt(endpoint):
    gateway = make_gateway(rounds_responder)
    runner = GenerationRunner(gateway, endpoint)
    store = RetrievalStore([_statement(0)], np.ones((1, 256)), LexicalEmbedder())
    trace, _ = ensemble(_prompt('Generate Python code that needs 2 rounds'), store, runner, k=1)
    assert trace.terminated_by == 'clean'
    code_prompts = [_user(p) for p in gateway.session.chat_payloads if 'generates' in _system(p)]
    assert len(code_prompts) == 2
    assert all(RAG_SECTION_HEADER in text for text in code_prompts)
    assert code_prompts[1].endswith('they do not exist: ghost-0.')


# ==================== 策略评估 ====================

def _share(total, i):
    return total // 100 + (1 if i < total % 100 else 0)


def table_responder(baseline, rag, refine, combined):
    """
    每个提示恰好推荐100个包(总计10000次提及)
    phantom-* 被判定为有效，不会被自我修正去除；ghost-* 被判定为无效，排除后由有效包替换；
    提示中出现检索段落时换用另一组数量
    """
    def responder(payload):
        user, system = _user(payload), _system(payload)
        question = VALIDITY.match(user)
        if question:
            return 'No' if question.group(1).startswith('ghost') else 'Yes'
        if 'recommends' not in system:
            return 'print(1)' if 'generates' in system else 'None'
        i = int(re.search(r'solves task (\d+)', user).group(1))
        augmented = RAG_SECTION_HEADER in user
        phantoms = _share(combined if augmented else refine, i)
        ghosts = _share(rag - combined if augmented else baseline - refine, i)
        excluded = set(_excluded(user))
        names = [f'phantom-{i}-{j}' for j in range(phantoms)]
        names += [n for n in (f'ghost-{i}-{j}' for j in range(ghosts)) if n not in excluded]
        names += [f'valid-{j}' for j in range(100 - len(names))]
        return ', '.join(names)
    return responder


@pytest.mark.parametrize('counts', [(1614, 1224, 1304, 240), (2628, 1340, 2551, 932)])
def test_mitigation_table_is_reproduced(endpoint, counts):
    """每万次提及的幻觉数: 基线 / 检索增强 / 自我修正 / 组合"""
    snapshot = RegistrySnapshot(ecosystem='pypi', as_of=date(2024, 1, 15),
                                names=frozenset(f'valid-{j}' for j in range(100)), source_digest='synthetic')
    statements = [KnowledgeStatement(package='valid-1', topic='parsing json',
                                     text='Package valid-1 could answer questions about parsing json')]
    store = RetrievalStore(statements, LexicalEmbedder().embed([statements[0].text]), LexicalEmbedder())
    policies = [MitigationPolicy(name='baseline', kind='baseline'),
                MitigationPolicy(name='rag', kind='rag', store=store),
                MitigationPolicy(name='self_refine', kind='self_refine'),
                MitigationPolicy(name='ensemble', kind='ensemble', store=store)]
    prompts = [_prompt(f'Generate Python code that solves task {i}', f't{i}') for i in range(100)]
    runner = GenerationRunner(make_gateway(table_responder(*counts)), endpoint)

    evaluation = evaluate_mitigation(prompts, runner, policies, snapshot)
    assert evaluation.fair
    assert all(report.total == 10000 for report in evaluation.reports.values())
    for policy, expected in zip(('baseline', 'rag', 'self_refine', 'ensemble'), counts):
        assert evaluation.reports[policy].rate == pytest.approx(expected / 10000, abs=1e-4)
    assert evaluation.failed == {'baseline': 0, 'rag': 0, 'self_refine': 0, 'ensemble': 0}
    assert sum(evaluation.to_dict()['terminations']['self_refine'].values()) == 100


def test_evaluation_fairness_flag():
    evaluation = MitigationEvaluation(reports={}, pairs={'a': ['x/1/0'], 'b': ['x/2/0']}, traces={}, failed={})
    assert not evaluation.fair


def test_policy_from_config():
    config = ConfigManager.from_string("[Policy:careful]\nkind = self_refine\nmax_iterations = 3\n")
    policy = MitigationPolicy.from_config(config, 'careful')
    assert (policy.kind, policy.max_iterations, policy.store) == ('self_refine', 3, None)
    assert MitigationPolicy.from_config(config, 'baseline').kind == 'baseline'
    with pytest.raises(ValueError):
        MitigationPolicy(name='x', kind='finetune')


# ==================== 微调数据 ====================

def test_finetune_pairs_drop_hallucinations(tmp_path):
    sample = CodeSample(sample_id='s1', model_id='m', prompt_id='p1', trial=0, language='python',
                        body='import requests')
    prompt = PromptRecord(prompt_id='p1', text='Generate Python code that fetches a page', language='python',
                          source='llm_generated', temporal='recent', origin_ref='requests')

    def verdict(name, heuristic, hallucinated):
        mention = PackageMention(name=normalize_name(name, 'pypi'), heuristic=heuristic, sample_id='s1',
                                 model_id='m', raw_span=name, prompt_id='p1')
        return Verdict(mention=mention, is_hallucination=hallucinated)

    verdicts = [verdict('requests', H2_FROM_CODE, False), verdict('fakepkg', H2_FROM_CODE, True),
                verdict('urllib3', H1_INSTALL_COMMAND, False), verdict('ghostlib', H3_FROM_PROMPT, True)]
    pairs = build_finetune_pairs([sample], verdicts, {'p1': prompt})
    assert len(pairs) == 1
    messages = pairs[0]['messages']
    assert messages[1]['content'].endswith('import requests')
    assert messages[2] == {'role': 'assistant', 'content': 'requests'}

    path = save_finetune_pairs(pairs, str(tmp_path / 'finetune.jsonl'))
    with open(path, 'r', encoding='utf-8') as f:
        assert [json.loads(line) for line in f] == pairs
