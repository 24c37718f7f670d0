#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
测试公共夹具
本地桩端点、脚本化HTTP会话、小型注册表快照
"""

import json
import threading
from typing import Callable, Dict, List, Optional

import pytest

from http_client import HttpClient
from llm_gateway import LLMGateway, ProviderEndpoint, TranscriptStore
from package_registry import snapshot_from_bytes
from stub_endpoint import DEMO_VALID, StubEndpointServer, demo_responder
from toolkit_config import RetryPolicy

PYPI_NAMES = ['requests', 'numpy', 'pandas', 'flask', 'django', 'scipy', 'matplotlib',
              'beautifulsoup4', 'sqlalchemy', 'pytest', 'pyyaml', 'click', 'python-dateutil']
NPM_NAMES = ['express', 'lodash', 'axios', 'react', 'moment', 'chalk', 'commander',
             'jest', 'mongoose', 'uuid', 'dotenv', '@angular/core', 'numpyx']


class FakeResponse:
    """模拟requests.Response的最小接口"""

    def __init__(self, status_code: int = 200, body=None, headers: Optional[Dict] = None):
        self.status_code = status_code
        self.headers = headers or {}
        if isinstance(body, (dict, list)):
            self._json = body
            self.content = json.dumps(body).encode('utf-8')
        else:
            self._json = None
            self.content = (body or '').encode('utf-8') if isinstance(body, str) else (body or b'')

    @property
    def text(self) -> str:
        return self.content.decode('utf-8')

    def json(self):
        if self._json is None:
            return json.loads(self.text)
        return self._json


class FakeSession:
    """
    脚本化会话：先依次返回queue中的响应/异常，之后把chat请求交给responder
    responder(payload) -> 回复文本
    """

    def __init__(self, responder: Optional[Callable[[Dict], str]] = None, queue: Optional[List] = None):
        self.responder = responder or demo_responder
        self.queue = list(queue or [])
        self.calls: List[Dict] = []
        self.lock = threading.Lock()

    def request(self, method, url, headers=None, timeout=None, json=None, **kwargs):
        with self.lock:
            self.calls.append({'method': method, 'url': url, 'headers': headers, 'json': json})
            scripted = self.queue.pop(0) if self.queue else None
        if isinstance(scripted, Exception):
            raise scripted
        if scripted is not None:
            return scripted
        if url.endswith('/embeddings'):
            texts = json['input']
            return FakeResponse(200, {'data': [{'index': i, 'embedding': [float(len(t)), 1.0]}
                                               for i, t in enumerate(texts)]})
        content = self.responder(json)
        return FakeResponse(200, {'choices': [{'finish_reason': 'stop',
                                               'message': {'role': 'assistant', 'content': content}}],
                                  'usage': {}})

    @property
    def chat_payloads(self) -> List[Dict]:
        return [c['json'] for c in self.calls if c['url'].endswith('/chat/completions')]


class FailingSession(FakeSession):
    """提示文本包含broken时返回400"""

    def request(self, method, url, headers=None, timeout=None, json=None, **kwargs):
        if json and 'broken' in json['messages'][-1]['content']:
            with self.lock:
                self.calls.append({'method': method, 'url': url, 'headers': headers, 'json': json})
            return FakeResponse(400, {'error': 'bad request'})
        return super().request(method, url, headers=headers, timeout=timeout, json=json)


def no_sleep(seconds: float):
    pass


def make_gateway(responder=None, mode: str = 'live', transcript_dir: Optional[str] = None,
                 session: Optional[FakeSession] = None) -> LLMGateway:
    """构造使用脚本化会话的网关，不访问网络"""
    session = session or FakeSession(responder)
    client = HttpClient(retry=RetryPolicy(retries=2, jitter=0), session=session, sleeper=no_sleep)
    store = TranscriptStore(transcript_dir) if transcript_dir else None
    gateway = LLMGateway(mode=mode, store=store, client=client)
    gateway.session = session
    return gateway


@pytest.fixture
def endpoint():
    return ProviderEndpoint(name='stub', base_url='http://stub.invalid/v1', model_id='stub-model',
                            supports=frozenset({'top_k', 'min_p'}), max_parallel=4)


@pytest.fixture
def pypi_snapshot():
    return snapshot_from_bytes('\n'.join(PYPI_NAMES).encode('utf-8'), 'pypi', '2024-01-15')


@pytest.fixture
def npm_snapshot():
    return snapshot_from_bytes('\n'.join(NPM_NAMES).encode('utf-8'), 'npm', '2024-01-15')


@pytest.fixture
def stub_server():
    """在临时端口启动Flask桩端点"""
    server = StubEndpointServer(responder=demo_responder,
                                registry_names={'pypi': DEMO_VALID['python'], 'npm': DEMO_VALID['javascript']})
    server.base_url = server.start()
    yield server
    server.stop()
