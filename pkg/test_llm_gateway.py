#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
LLM网关测试
参数配置、转录键、录制/回放、批量请求、并发上限和桩端点
"""

import pytest

from conftest import FakeResponse, FakeSession, make_gateway
from llm_gateway import (ChatRequest, GenerationParams, LLMGateway, ProviderEndpoint, TranscriptStore,
                         build_code_generation_request, code_generation_profile, package_prompt_profile,
                         prompt_generation_profile, raise_replay_misses, transcript_key,
                         unsupported_params)
from toolkit_config import ConfigManager
from toolkit_errors import ConfigError, FormatError, ReplayMiss, UnsupportedParam

MESSAGES = [{'role': 'user', 'content': 'Is requests a valid Python package?'}]


def test_generation_profiles():
    open_ep = ProviderEndpoint(name='o', base_url='http://x.invalid', model_id='o', supports=frozenset({'top_k'}))
    closed_ep = ProviderEndpoint(name='c', base_url='http://x.invalid', model_id='c')
    code = code_generation_profile(open_ep)
    assert (code.temperature, code.top_p, code.top_k, code.max_tokens) == (0.7, 0.9, 20, 2048)
    assert code_generation_profile(closed_ep).top_k == 0
    package = package_prompt_profile(closed_ep)
    assert (package.temperature, package.max_tokens) == (0.01, 64)
    prompt = prompt_generation_profile()
    assert (prompt.temperature, prompt.top_p, prompt.max_tokens) == (0.7, 0.9, 256)


def test_generation_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(top_p=0)
    with pytest.raises(ValueError):
        GenerationParams(min_p=1.0)
    with pytest.raises(ValueError):
        GenerationParams(temperature=-0.1)
    assert GenerationParams().replace(top_k=5).top_k == 5


def test_unsupported_params_are_flagged(endpoint):
    closed = ProviderEndpoint(name='c', base_url='http://x.invalid', model_id='c')
    params = GenerationParams(top_k=20, min_p=0.05)
    assert unsupported_params(params, closed) == ['top_k', 'min_p']
    assert unsupported_params(params, endpoint) == []
    gateway = make_gateway()
    with pytest.raises(UnsupportedParam):
        gateway.complete(closed, MESSAGES, params)
    assert gateway.session.calls == []


def test_code_generation_request_system_message():
    request = build_code_generation_request('Generate Python code that reads a CSV file', 'python')
    assert request.messages[0]['content'].startswith('You are a coding assistant that generates Python code.')
    assert request.messages[1]['content'] == 'Generate Python code that reads a CSV file'


def test_transcript_key_depends_on_trial_nonce(endpoint):
    params = package_prompt_profile(endpoint)
    a = transcript_key(endpoint, MESSAGES, params, 0)
    assert a == transcript_key(endpoint, MESSAGES, params, 0)
    assert a != transcript_key(endpoint, MESSAGES, params, 1)
    assert a != transcript_key(endpoint, MESSAGES, params.replace(temperature=0.5), 0)


def test_payload_only_sends_supported_extensions(endpoint):
    closed = ProviderEndpoint(name='c', base_url='http://x.invalid', model_id='c')
    gateway = make_gateway()
    params = code_generation_profile(endpoint)
    assert gateway.build_payload(endpoint, MESSAGES, params)['top_k'] == 20
    assert 'top_k' not in gateway.build_payload(closed, MESSAGES, code_generation_profile(closed))


def test_record_then_replay_is_byte_identical(endpoint, tmp_path):
    recorder = make_gateway(mode='record', transcript_dir=str(tmp_path))
    first = recorder.complete(endpoint, MESSAGES, package_prompt_profile(endpoint))
    assert first.text == 'Yes'
    assert recorder.network_calls == 1
    assert len(TranscriptStore(str(tmp_path))) == 1

    # 已录制的请求不再访问网络
    again = recorder.complete(endpoint, MESSAGES, package_prompt_profile(endpoint))
    assert again.from_cache
    assert recorder.network_calls == 1

    replayer = LLMGateway(mode='replay', store=TranscriptStore(str(tmp_path)))
    replayed = replayer.complete(endpoint, MESSAGES, package_prompt_profile(endpoint))
    assert replayed.text == first.text
    assert replayed.transcript_key == first.transcript_key
    assert replayer.network_calls == 0
    with pytest.raises(ReplayMiss):
        replayer.complete(endpoint, MESSAGES, package_prompt_profile(endpoint), trial_nonce=3)


def test_live_mode_keeps_transcripts_in_memory(endpoint):
    gateway = make_gateway()
    result = gateway.complete(endpoint, MESSAGES, package_prompt_profile(endpoint))
    assert result.transcript_key in gateway.memory
    assert gateway.key_log == [result.transcript_key]


def test_malformed_response_raises_format_error(endpoint):
    session = FakeSession(queue=[FakeResponse(200, {'choices': []})])
    gateway = make_gateway(session=session)
    with pytest.raises(FormatError):
        gateway.complete(endpoint, MESSAGES, package_prompt_profile(endpoint))


def test_batch_isolates_failures_and_keeps_order(endpoint):
    def responder(payload):
        return payload['messages'][-1]['content'].upper()

    class Session(FakeSession):
        def request(self, method, url, headers=None, timeout=None, json=None, **kwargs):
            if 'broken' in json['messages'][-1]['content']:
                return FakeResponse(400, {'error': 'bad request'})
            return super().request(method, url, headers=headers, timeout=timeout, json=json)

    gateway = make_gateway(session=Session(responder))
    requests_ = [ChatRequest(messages=[{'role': 'user', 'content': text}], params=package_prompt_profile())
                 for text in ('one', 'broken', 'three')]
    items = gateway.complete_batch(endpoint, requests_)
    assert [i.index for i in items] == [0, 1, 2]
    assert items[0].result.text == 'ONE'
    assert not items[1].ok and items[1].error['error'] == 'HttpStatusError'
    assert items[2].result.text == 'THREE'


def test_batch_replay_miss_is_a_per_item_error(endpoint, tmp_path):
    def request(text):
        return ChatRequest(messages=[{'role': 'user', 'content': text}], params=package_prompt_profile())

    recorder = make_gateway(lambda payload: payload['messages'][-1]['content'].upper(), mode='record',
                            transcript_dir=str(tmp_path))
    assert all(item.ok for item in recorder.complete_batch(endpoint, [request('one'), request('three')]))

    replayer = LLMGateway(mode='replay', store=TranscriptStore(str(tmp_path)))
    items = replayer.complete_batch(endpoint, [request('one'), request('two'), request('three')])
    assert [item.ok for item in items] == [True, False, True]
    assert (items[0].result.text, items[2].result.text) == ('ONE', 'THREE')
    assert items[1].error['error'] == 'ReplayMiss' and items[1].replay_miss
    assert replayer.network_calls == 0
    with pytest.raises(ReplayMiss):
        raise_replay_misses(items)
    raise_replay_misses([items[0], items[2]])
    assert replayer.complete_batch(endpoint, []) == []


def test_max_parallel_is_enforced(stub_server):
    """并发请求数不超过端点的max_parallel"""
    stub_server.delay = 0.05
    endpoint = ProviderEndpoint(name='stub', base_url=stub_server.base_url + '/v1', model_id='stub',
                                max_parallel=2)
    gateway = LLMGateway(mode='live')
    requests_ = [ChatRequest(messages=[{'role': 'user', 'content': f'question {i}'}],
                             params=package_prompt_profile()) for i in range(8)]
    items = gateway.complete_batch(endpoint, requests_)
    assert all(item.ok for item in items)
    assert stub_server.peak_in_flight <= 2
    assert stub_server.request_count == 8


def test_retry_on_injected_failures(stub_server):
    stub_server.fail_queue = [500, 503]
    endpoint = ProviderEndpoint(name='stub', base_url=stub_server.base_url + '/v1', model_id='stub')
    config = ConfigManager.from_string("[Retry]\nretries = 3\nbackoff_base = 0.01\njitter = 0\n")
    gateway = LLMGateway(mode='live', retry=config.get_retry_policy())
    result = gateway.complete(endpoint, MESSAGES, package_prompt_profile())
    assert result.text == 'Yes'
    assert stub_server.request_count == 3


def test_embeddings_are_aligned(endpoint):
    gateway = make_gateway()
    vectors = gateway.embed(endpoint, ['a', 'bbb'])
    assert vectors == [[1.0, 1.0], [3.0, 1.0]]


def test_endpoint_from_config_reads_secret_reference_only():
    config = ConfigManager.from_string(
        "[Endpoint:hosted]\nbase_url = https://api.example.invalid/v1\nmodel_id = m1\n"
        "api_key_env = EXAMPLE_API_KEY\nsupports = top_k, min_p\nmax_parallel = 3\n")
    endpoint = ProviderEndpoint.from_config(config, 'hosted')
    assert endpoint.auth_ref == 'EXAMPLE_API_KEY'
    assert endpoint.supports == frozenset({'top_k', 'min_p'})
    assert endpoint.describe()['max_parallel'] == 3
    with pytest.raises(ConfigError):
        ProviderEndpoint.from_config(config, 'missing')


def test_authorization_header_from_environment(endpoint, monkeypatch):
    monkeypatch.setenv('STUB_KEY', 'secret-value')
    keyed = ProviderEndpoint(name='k', base_url='http://x.invalid/v1', model_id='k', auth_ref='STUB_KEY')
    gateway = make_gateway()
    gateway.complete(keyed, MESSAGES, package_prompt_profile())
    assert gateway.session.calls[0]['headers']['Authorization'] == 'Bearer secret-value'
    assert 'secret-value' not in str(gateway.memory)
