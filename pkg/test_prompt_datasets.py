#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
提示数据集测试
Stack Overflow导入、LLM生成提示、时间划分和数据集持久化
"""

import csv

import pytest

from conftest import make_gateway
from prompt_datasets import (SO_COLUMNS, PromptDataset, PromptDatasetBuilder, PromptRecord,
                             make_prompt_id, split_temporal)
from toolkit_errors import FormatError, MissingColumn, MixedLanguage, UnreadableFile


def _write_dump(path, rows, extra_columns=()):
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(SO_COLUMNS) + list(extra_columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _row(tag, title, score, bucket, body='', count=''):
    return {'tag': tag, 'question_title': title, 'question_body': body, 'score': score,
            'year_bucket': bucket, 'tag_question_count': count}


def _record(text, temporal='all_time', source='llm_generated', origin='pkg', language='python'):
    return PromptRecord(prompt_id=make_prompt_id(source, temporal, language, origin, text), text=text,
                        language=language, source=source, temporal=temporal, origin_ref=origin)


# ==================== Stack Overflow ====================

def test_stackoverflow_top_twenty_per_tag_and_bucket(tmp_path):
    rows = [_row('pandas', f'question {i:02d}', i, '2023', count='90000') for i in range(25)]
    rows += [_row('pandas', 'old question', 5, 'pre-2023', count='90000')]
    path = tmp_path / 'dump.csv'
    _write_dump(path, rows, extra_columns=['tag_question_count'])

    builder = PromptDatasetBuilder()
    records = builder.ingest_stackoverflow_dump(str(path), 'python')
    recent = [r for r in records if r.temporal == 'recent']
    assert len(recent) == 20
    # 按得分降序
    assert recent[0].text == 'question 24'
    assert recent[-1].text == 'question 05'
    assert [r.text for r in records if r.temporal == 'all_time'] == ['old question']
    assert all(r.source == 'stackoverflow' and r.origin_ref == 'pandas' for r in records)


def test_stackoverflow_rejects_small_tags(tmp_path):
    rows = [_row('tiny', 'q1', 1, '2023', count='4000'), _row('big', 'q2', 1, '2023', count='6000')]
    path = tmp_path / 'dump.csv'
    _write_dump(path, rows, extra_columns=['tag_question_count'])
    builder = PromptDatasetBuilder()
    records = builder.ingest_stackoverflow_dump(str(path), 'python')
    assert [r.origin_ref for r in records] == ['big']
    assert builder.report.rejected_tags == ['tiny']


def test_stackoverflow_title_and_body_are_joined(tmp_path):
    path = tmp_path / 'dump.csv'
    _write_dump(path, [_row('flask', 'How to route?', 3, 'recent', body='I tried app.route')],
                extra_columns=['tag_question_count'])
    records = PromptDatasetBuilder().ingest_stackoverflow_dump(str(path), 'python')
    assert records[0].text == 'How to route?\n\nI tried app.route'


def test_stackoverflow_errors(tmp_path):
    missing = tmp_path / 'missing_columns.csv'
    missing.write_text("tag,question_title\npandas,q\n", encoding='utf-8')
    with pytest.raises(MissingColumn):
        PromptDatasetBuilder().ingest_stackoverflow_dump(str(missing), 'python')

    bad_score = tmp_path / 'bad_score.csv'
    _write_dump(bad_score, [_row('pandas', 'q', 'high', '2023')], extra_columns=['tag_question_count'])
    with pytest.raises(FormatError) as excinfo:
        PromptDatasetBuilder().ingest_stackoverflow_dump(str(bad_score), 'python')
    assert excinfo.value.line == 2

    with pytest.raises(UnreadableFile):
        PromptDatasetBuilder().ingest_stackoverflow_dump(str(tmp_path / 'none.csv'), 'python')


# ==================== LLM生成提示 ====================

def test_llm_generated_prompts_filter_and_discard(endpoint):
    def responder(payload):
        user = payload['messages'][-1]['content']
        if 'broken stem' in user:
            return 'Sure! Here is a prompt: write code'
        return '"Generate Python code that fetches web pages."'

    descriptions = [('requests', 'HTTP library for humans'),
                    ('badpkg', 'broken stem description'),
                    ('jieba', '中文分词组件'),
                    ('', 'no package name'),
                    ('emptydesc', '')]
    builder = PromptDatasetBuilder()
    records = builder.build_llm_generated_prompts(descriptions, endpoint, 'python', make_gateway(responder))
    assert [r.origin_ref for r in records] == ['requests']
    assert records[0].text == 'Generate Python code that fetches web pages.'
    assert records[0].source == 'llm_generated'
    assert builder.report.discarded == {'missing_stem': 1, 'non_english_description': 1,
                                        'missing_package': 1, 'empty_description': 1}


def test_llm_generated_prompt_request_uses_generation_profile(endpoint):
    gateway = make_gateway()
    PromptDatasetBuilder().build_llm_generated_prompts([('numpy', 'Array computing')], endpoint,
                                                       'python', gateway)
    payload = gateway.session.chat_payloads[0]
    assert (payload['temperature'], payload['top_p'], payload['max_tokens']) == (0.7, 0.9, 256)
    assert 'creating simple prompts' in payload['messages'][0]['content']
    assert payload['messages'][1]['content'].endswith('package description: Array computing')


def test_load_descriptions(tmp_path):
    path = tmp_path / 'desc.csv'
    path.write_text("package,description\nrequests, HTTP for humans \n", encoding='utf-8')
    assert PromptDatasetBuilder.load_descriptions(str(path)) == [('requests', 'HTTP for humans')]
    bad = tmp_path / 'bad.csv'
    bad.write_text("name,text\nx,y\n", encoding='utf-8')
    with pytest.raises(MissingColumn):
        PromptDatasetBuilder.load_descriptions(str(bad))


# ==================== 时间划分 ====================

def test_split_temporal_removes_overlap_from_all_time_only():
    recent = [_record('Generate Python code that A', 'recent', origin='alpha'),
              _record('Generate Python code that B', 'recent', origin='beta')]
    all_time = [_record('Generate Python code that A2', 'all_time', origin='alpha'),
                _record('Generate Python code that C', 'all_time', origin='gamma')]
    dataset = split_temporal(recent, all_time)
    assert [r.origin_ref for r in dataset] == ['alpha', 'beta', 'gamma']
    assert dataset.manifest == {'python/llm_generated/all_time': 1, 'python/llm_generated/recent': 2}


def test_split_temporal_stackoverflow_keeps_shared_tags():
    recent = [_record('q new', 'recent', source='stackoverflow', origin='pandas')]
    all_time = [_record('q old', 'all_time', source='stackoverflow', origin='pandas'),
                _record('q new', 'all_time', source='stackoverflow', origin='pandas')]
    dataset = split_temporal(recent, all_time)
    assert [(r.temporal, r.text) for r in dataset] == [('recent', 'q new'), ('all_time', 'q old')]


def test_split_temporal_rejects_mixed_languages():
    with pytest.raises(MixedLanguage):
        split_temporal([_record('x', 'recent')], [_record('y', language='javascript')])


# ==================== 持久化 ====================

def test_dataset_save_load_and_slice(tmp_path):
    records = [_record('Generate Python code that A', 'recent', origin='a'),
               _record('Generate Python code that B', origin='b'),
               _record('How do I?', 'recent', source='stackoverflow', origin='flask')]
    dataset = PromptDataset(records=records)
    path = str(tmp_path / 'prompts.json')
    dataset.save(path)
    loaded = PromptDataset.load(path)
    assert loaded.records == records
    assert loaded.digest() == dataset.digest()
    assert len(loaded.slice(temporal='recent')) == 2
    assert len(loaded.slice(source='stackoverflow')) == 1
    assert len(loaded.slice(limit=1)) == 1


def test_dataset_rejects_duplicates_and_bad_manifest(tmp_path):
    record = _record('Generate Python code that A')
    with pytest.raises(FormatError):
        PromptDataset(records=[record, record]).validate()
    path = tmp_path / 'prompts.json'
    PromptDataset(records=[record]).save(str(path))
    path.write_text(path.read_text(encoding='utf-8').replace('"python/llm_generated/all_time": 1',
                                                             '"python/llm_generated/all_time": 2'),
                    encoding='utf-8')
    with pytest.raises(FormatError):
        PromptDataset.load(str(path))


def test_prompt_record_validation():
    with pytest.raises(ValueError):
        PromptRecord(prompt_id='x', text='', language='python', source='llm_generated',
                     temporal='recent', origin_ref='a')
    with pytest.raises(ValueError):
        PromptRecord(prompt_id='x', text='t', language='go', source='llm_generated',
                     temporal='recent', origin_ref='a')
