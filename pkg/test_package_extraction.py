#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
包名抽取测试
启发式1安装命令语料、包列表解析、启发式2/3查询构造和提及合并
"""

import json
import os

import pytest

from package_extraction import (H1_INSTALL_COMMAND, H2_FROM_CODE, H3_FROM_PROMPT, CodeSample,
                                PackageMention, build_package_query_from_code,
                                build_package_query_from_prompt, extract_install_commands,
                                mention_counts, mentions_from_names, merge_mentions,
                                parse_package_list_response)
from prompt_datasets import PromptRecord

CORPUS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'fixtures',
                           'install_command_corpus.json')


def _load_corpus():
    with open(CORPUS_PATH, 'r', encoding='utf-8') as f:
        return json.load(f)['cases']


def _sample(body: str, language: str = 'python', sample_id: str = 's1') -> CodeSample:
    return CodeSample(sample_id=sample_id, model_id='m', prompt_id='p1', trial=0,
                      language=language, body=body)


def test_corpus_is_large_enough():
    cases = _load_corpus()
    assert len(cases) >= 50
    assert len({c['id'] for c in cases}) == len(cases)


@pytest.mark.parametrize('case', _load_corpus(), ids=lambda c: c['id'])
def test_install_command_corpus(case):
    """语料中每个样本的抽取结果必须完全一致"""
    mentions = extract_install_commands(_sample(case['body'], case['language']))
    assert [m.name.normalized for m in mentions] == case['expected']
    assert all(m.heuristic == H1_INSTALL_COMMAND for m in mentions)


def test_install_mentions_carry_provenance():
    mentions = extract_install_commands(_sample("pip install Requests==2.0", sample_id='abc'))
    assert len(mentions) == 1
    m = mentions[0]
    assert m.name.raw == 'Requests'
    assert m.name.ecosystem == 'pypi'
    assert m.raw_span == 'Requests==2.0'
    assert (m.sample_id, m.model_id, m.prompt_id) == ('abc', 'm', 'p1')


def test_package_like_prose_words_only_end_the_list_after_a_name():
    """first、package等词本身可能是包名，只在已抽到名称后作为正文结束"""
    def names(body):
        return [m.name.normalized for m in extract_install_commands(_sample(body))]

    assert names("pip install package") == ['package']
    assert names("pip install requests using the terminal") == ['requests']
    assert names("pip install numpy via the mirror") == ['numpy']
    assert names("pip install module --pre") == ['module']
    assert names("pip install flask and then run it") == ['flask']


def test_extraction_ignores_unknown_language():
    sample = CodeSample(sample_id='s', model_id='m', prompt_id='p', trial=0, language='ruby',
                        body='pip install requests')
    assert extract_install_commands(sample) == []


# ==================== 包列表解析 ====================

def test_parse_package_list_comma_separated():
    parsed = parse_package_list_response("requests, numpy, Pandas", 'pypi')
    assert parsed.normalized == ['requests', 'numpy', 'pandas']


def test_parse_package_list_bullets_and_duplicates():
    text = "1. requests\n2. `numpy`\n- Requests\n* flask."
    parsed = parse_package_list_response(text, 'pypi')
    assert parsed.normalized == ['requests', 'numpy', 'flask']
    assert parsed.duplicates == 1


def test_parse_package_list_none_and_illegal_entries():
    assert len(parse_package_list_response("None", 'pypi')) == 0
    assert len(parse_package_list_response("  none. ", 'pypi')) == 0
    assert len(parse_package_list_response("", 'pypi')) == 0
    parsed = parse_package_list_response("requests, the http library, numpy", 'pypi')
    assert parsed.normalized == ['requests', 'numpy']
    assert parsed.dropped == ['the http library']


def test_parse_package_list_npm_scoped():
    parsed = parse_package_list_response("express, @angular/core, Lodash", 'npm')
    assert parsed.normalized == ['express', '@angular/core', 'lodash']


# ==================== 查询构造 ====================

def test_query_from_code_uses_package_profile():
    request = build_package_query_from_code(_sample("import numpy"))
    system, user = request.messages
    assert 'determines Python packages necessary to execute code' in system['content']
    assert user['content'] == "Python packages are required to run this code: import numpy"
    assert request.params.temperature == 0.01
    assert request.params.max_tokens == 64


def test_query_from_prompt_uses_prompt_text():
    prompt = PromptRecord(prompt_id='p', text='Generate JavaScript code that parses CSV',
                          language='javascript', source='llm_generated', temporal='recent',
                          origin_ref='csv')
    request = build_package_query_from_prompt(prompt)
    assert 'recommends JavaScript packages' in request.messages[0]['content']
    assert request.messages[1]['content'].endswith('following coding problem: Generate JavaScript code that parses CSV')


# ==================== 合并 ====================

def test_merge_mentions_dedups_per_heuristic():
    sample = _sample("pip install requests numpy")
    h1 = extract_install_commands(sample)
    h2 = mentions_from_names(sample, parse_package_list_response("Requests, flask", 'pypi'), H2_FROM_CODE)
    h3 = mentions_from_names(sample, parse_package_list_response("requests, requests", 'pypi'), H3_FROM_PROMPT)
    merged = merge_mentions(sample, h1, h2 + h2, h3)
    keys = [m.dedup_key for m in merged]
    assert keys == [('requests', H1_INSTALL_COMMAND), ('numpy', H1_INSTALL_COMMAND),
                    ('requests', H2_FROM_CODE), ('flask', H2_FROM_CODE),
                    ('requests', H3_FROM_PROMPT)]
    assert merged.normalized_names() == ['flask', 'numpy', 'requests']
    counts = mention_counts(merged)
    assert counts[H1_INSTALL_COMMAND] == 2
    assert counts[H3_FROM_PROMPT] == 1


def test_mentions_from_names_rejects_unknown_heuristic():
    with pytest.raises(ValueError):
        mentions_from_names(_sample('x'), [], 'h9')


def test_mention_round_trip():
    sample = _sample("pip install Flask_Login")
    mention = extract_install_commands(sample)[0]
    assert PackageMention.from_dict(mention.to_dict()) == mention
