#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
对话补全网关
统一封装chat-completion端点：生成参数控制、每端点并发上限、
以及live/record/replay三种模式下的转录缓存
"""

import hashlib
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, FrozenSet, Iterator, List, Optional

from http_client import HttpClient
from toolkit_config import ConfigManager, RetryPolicy
from toolkit_errors import FormatError, ReplayMiss, ToolkitError, UnsupportedParam

logger = logging.getLogger(__name__)

TRANSCRIPT_SCHEMA_VERSION = 1
MODES = ('live', 'record', 'replay')
EXTENSION_PARAMS = ('top_k', 'min_p', 'repetition_penalty')

LANGUAGE_LABELS = {'python': 'Python', 'javascript': 'JavaScript'}

CODE_GENERATION_SYSTEM = ("You are a coding assistant that generates {L} code. Provide only the code "
                          "and add additional explanatory text only when absolutely necessary. If no "
                          "code is required to answer the question, simply reply 'None'.")


def language_label(language: str) -> str:
    try:
        return LANGUAGE_LABELS[language]
    except KeyError:
        raise ValueError(f"不支持的语言: {language}")


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0
    min_p: float = 0.0
    repetition_penalty: float = 1.0
    max_tokens: int = 2048

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature必须 >= 0: {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p必须在(0,1]内: {self.top_p}")
        if self.top_k < 0:
            raise ValueError(f"top_k必须 >= 0: {self.top_k}")
        if not 0 <= self.min_p < 1:
            raise ValueError(f"min_p必须在[0,1)内: {self.min_p}")
        if self.repetition_penalty <= 0:
            raise ValueError(f"repetition_penalty必须 > 0: {self.repetition_penalty}")
        if self.max_tokens <= 0:
            raise ValueError(f"max_tokens必须 > 0: {self.max_tokens}")

    def to_dict(self) -> Dict:
        return asdict(self)

    def replace(self, **changes) -> 'GenerationParams':
        values = self.to_dict()
        values.update(changes)
        return GenerationParams(**values)


@dataclass(frozen=True)
class ProviderEndpoint:
    name: str
    base_url: str
    model_id: str
    auth_ref: str = ''
    supports: FrozenSet[str] = frozenset()
    max_parallel: int = 4
    timeout: float = 60.0
    profile: str = 'open'

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError(f"max_parallel必须 >= 1: {self.max_parallel}")

    @classmethod
    def from_config(cls, config_manager: ConfigManager, name: str) -> 'ProviderEndpoint':
        s = config_manager.get_endpoint_settings(name)
        return cls(name=s['name'], base_url=s['base_url'], model_id=s['model_id'],
                   auth_ref=s['api_key_env'], supports=s['supports'],
                   max_parallel=s['max_parallel'], timeout=s['timeout'], profile=s['profile'])

    def describe(self) -> Dict:
        """可持久化的端点描述，只保留环境变量名，不含密钥"""
        return {'name': self.name, 'base_url': self.base_url, 'model_id': self.model_id,
                'auth_ref': self.auth_ref, 'supports': sorted(self.supports),
                'max_parallel': self.max_parallel, 'profile': self.profile}


@dataclass(frozen=True)
class ChatRequest:
    messages: List[Dict[str, str]]
    params: GenerationParams
    trial_nonce: int = 0

    def with_nonce(self, trial_nonce: int) -> 'ChatRequest':
        return ChatRequest(messages=self.messages, params=self.params, trial_nonce=trial_nonce)


# ==================== 参数配置 ====================

def code_generation_profile(endpoint: Optional[ProviderEndpoint] = None) -> GenerationParams:
    top_k = 20 if endpoint is not None and 'top_k' in endpoint.supports else 0
    return GenerationParams(temperature=0.7, top_p=0.9, top_k=top_k,
                            repetition_penalty=1.0, max_tokens=2048)


def package_prompt_profile(endpoint: Optional[ProviderEndpoint] = None) -> GenerationParams:
    return GenerationParams(temperature=0.01, max_tokens=64)


def prompt_generation_profile(endpoint: Optional[ProviderEndpoint] = None) -> GenerationParams:
    return GenerationParams(temperature=0.7, top_p=0.9, max_tokens=256)


def unsupported_params(params: GenerationParams, endpoint: ProviderEndpoint) -> List[str]:
    requested = []
    if params.top_k > 0:
        requested.append('top_k')
    if params.min_p > 0:
        requested.append('min_p')
    if params.repetition_penalty != 1.0:
        requested.append('repetition_penalty')
    return [p for p in requested if p not in endpoint.supports]


def build_code_generation_request(prompt_text: str, language: str,
                                  endpoint: Optional[ProviderEndpoint] = None) -> ChatRequest:
    messages = [
        {'role': 'system', 'content': CODE_GENERATION_SYSTEM.format(L=language_label(language))},
        {'role': 'user', 'content': prompt_text},
    ]
    return ChatRequest(messages=messages, params=code_generation_profile(endpoint))


# ==================== 转录缓存 ====================

def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(',', ':'))


def transcript_key(endpoint: ProviderEndpoint, messages: List[Dict], params: GenerationParams,
                   trial_nonce: int) -> str:
    material = {'kind': 'chat', 'endpoint': endpoint.name, 'model_id': endpoint.model_id,
                'params': params.to_dict(), 'messages': messages, 'trial_nonce': trial_nonce}
    return hashlib.sha256(_canonical(material).encode('utf-8')).hexdigest()


def embedding_key(endpoint: ProviderEndpoint, texts: List[str]) -> str:
    material = {'kind': 'embeddings', 'endpoint': endpoint.name, 'model_id': endpoint.model_id,
                'input': texts}
    return hashlib.sha256(_canonical(material).encode('utf-8')).hexdigest()


@dataclass
class Transcript:
    key: str
    request: Dict
    response: Dict
    latency: float
    recorded_at: str
    schema_version: int = TRANSCRIPT_SCHEMA_VERSION

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'Transcript':
        if data.get('schema_version') != TRANSCRIPT_SCHEMA_VERSION:
            raise FormatError(f"不支持的转录版本: {data.get('schema_version')}")
        try:
            return cls(key=data['key'], request=data['request'], response=data['response'],
                       latency=float(data['latency']), recorded_at=data['recorded_at'])
        except KeyError as e:
            raise FormatError(f"转录记录缺少字段: {e}")


class TranscriptStore:
    """内容寻址的转录目录，每条记录一个JSON文件，只追加"""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def path_for(self, key: str) -> str:
        return os.path.join(self.root, key[:2], f"{key}.json")

    def __contains__(self, key: str) -> bool:
        return os.path.exists(self.path_for(key))

    def get(self, key: str) -> Optional[Transcript]:
        path = self.path_for(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return Transcript.from_dict(json.load(f))
        except json.JSONDecodeError as e:
            raise FormatError(f"转录文件损坏 {path}: {e}")

    def put(self, transcript: Transcript):
        path = self.path_for(transcript.key)
        directory = os.path.dirname(path)
        os.makedirs(directory, exist_ok=True)
        # 相同key的内容相同，并发写入时最后写入者生效
        fd, tmp = tempfile.mkstemp(dir=directory, suffix='.tmp')
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(transcript.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write('\n')
        os.replace(tmp, path)

    def keys(self) -> Iterator[str]:
        if not os.path.isdir(self.root):
            return
        for prefix in sorted(os.listdir(self.root)):
            sub = os.path.join(self.root, prefix)
            if not os.path.isdir(sub):
                continue
            for name in sorted(os.listdir(sub)):
                if name.endswith('.json'):
                    yield name[:-5]

    def __len__(self) -> int:
        return sum(1 for _ in self.keys())


# ==================== 网关 ====================

@dataclass
class CompletionResult:
    text: str
    finish_reason: str
    transcript_key: str
    latency: float
    recorded_at: str
    from_cache: bool = False
    usage: Dict = field(default_factory=dict)


@dataclass
class BatchItem:
    index: int
    result: Optional[CompletionResult] = None
    error: Optional[Dict] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def replay_miss(self) -> bool:
        return self.error is not None and self.error.get('error') == 'ReplayMiss'


def error_record(exc: Exception) -> Dict:
    if isinstance(exc, ToolkitError):
        return exc.to_dict()
    return {'error': type(exc).__name__, 'message': str(exc)}


def raise_replay_misses(items: List[BatchItem]):
    """批量结果中存在回放缺失时抛出ReplayMiss"""
    missed = [item.index for item in items if item.replay_miss]
    if missed:
        raise ReplayMiss(f"回放缓存缺少{len(missed)}项批量请求: 第{missed[0]}项起")


class LLMGateway:
    """对话补全网关 - 线程安全，可被多个实验线程并发调用"""

    def __init__(self, mode: str = 'live', store: Optional[TranscriptStore] = None,
                 client: Optional[HttpClient] = None, retry: Optional[RetryPolicy] = None):
        if mode not in MODES:
            raise ValueError(f"未知模式: {mode}")
        if mode in ('record', 'replay') and store is None:
            raise ValueError(f"{mode}模式需要转录目录")
        self.mode = mode
        self.store = store
        self._client = client
        self._retry = retry
        self._lock = threading.Lock()
        self._semaphores: Dict[str, threading.BoundedSemaphore] = {}
        self.memory: Dict[str, Transcript] = {}
        self.key_log: List[str] = []
        self.network_calls = 0

    @property
    def client(self) -> HttpClient:
        if self.mode == 'replay':
            raise ReplayMiss("回放模式禁止网络访问")
        with self._lock:
            if self._client is None:
                self._client = HttpClient(retry=self._retry)
            return self._client

    def _semaphore(self, endpoint: ProviderEndpoint) -> threading.BoundedSemaphore:
        with self._lock:
            sem = self._semaphores.get(endpoint.name)
            if sem is None:
                sem = threading.BoundedSemaphore(endpoint.max_parallel)
                self._semaphores[endpoint.name] = sem
            return sem

    def _headers(self, endpoint: ProviderEndpoint) -> Dict[str, str]:
        headers = {'Content-Type': 'application/json'}
        if endpoint.auth_ref:
            secret = os.environ.get(endpoint.auth_ref)
            if secret:
                headers['Authorization'] = f"Bearer {secret}"
            else:
                logger.warning(f"端点 {endpoint.name}: 环境变量 {endpoint.auth_ref} 未设置")
        return headers

    def _lookup(self, key: str) -> Optional[Transcript]:
        self.key_log.append(key)
        if self.mode == 'live':
            return None
        cached = self.store.get(key)
        if cached is None and self.mode == 'replay':
            raise ReplayMiss(f"回放缓存中没有记录: {key}")
        return cached

    def _post(self, endpoint: ProviderEndpoint, path: str, key: str, payload: Dict) -> Transcript:
        url = endpoint.base_url.rstrip('/') + path
        with self._semaphore(endpoint):
            with self._lock:
                self.network_calls += 1
            started = time.perf_counter()
            response = self.client.post_json(url, payload, headers=self._headers(endpoint),
                                             timeout=endpoint.timeout)
            latency = time.perf_counter() - started
        try:
            body = response.json()
        except ValueError:
            raise FormatError(f"端点 {endpoint.name} 返回的不是JSON")
        transcript = Transcript(key=key, request=payload, response=body, latency=latency,
                                recorded_at=datetime.now(timezone.utc).isoformat())
        if self.mode == 'record':
            self.store.put(transcript)
        else:
            with self._lock:
                self.memory[key] = transcript
        return transcript

    def build_payload(self, endpoint: ProviderEndpoint, messages: List[Dict],
                      params: GenerationParams) -> Dict:
        payload = {
            'model': endpoint.model_id,
            'messages': messages,
            'temperature': params.temperature,
            'top_p': params.top_p,
            'max_tokens': params.max_tokens,
        }
        for name in EXTENSION_PARAMS:
            if name in endpoint.supports:
                payload[name] = getattr(params, name)
        return payload

    def complete(self, endpoint: ProviderEndpoint, messages: List[Dict],
                 params: GenerationParams, trial_nonce: int = 0) -> CompletionResult:
        rejected = unsupported_params(params, endpoint)
        if rejected:
            raise UnsupportedParam(f"端点 {endpoint.name} 不支持参数: {', '.join(rejected)}")

        key = transcript_key(endpoint, messages, params, trial_nonce)
        transcript = self._lookup(key)
        from_cache = transcript is not None
        if transcript is None:
            transcript = self._post(endpoint, '/chat/completions', key,
                                    self.build_payload(endpoint, messages, params))

        try:
            choice = transcript.response['choices'][0]
            text = choice['message']['content']
        except (KeyError, IndexError, TypeError):
            raise FormatError(f"端点 {endpoint.name} 的响应缺少choices[0].message.content")
        return CompletionResult(
            text=text if text is not None else '',
            finish_reason=choice.get('finish_reason') or '',
            transcript_key=key,
            latency=transcript.latency,
            recorded_at=transcript.recorded_at,
            from_cache=from_cache,
            usage=transcript.response.get('usage') or {}
        )

    def complete_request(self, endpoint: ProviderEndpoint, request: ChatRequest) -> CompletionResult:
        return self.complete(endpoint, request.messages, request.params, request.trial_nonce)

    def complete_batch(self, endpoint: ProviderEndpoint, requests: List[ChatRequest]) -> List[BatchItem]:
        """批量补全，结果与输入位置对齐，单项失败记录错误不影响其他项"""
        if not requests:
            return []

        def run(index: int, request: ChatRequest) -> BatchItem:
            try:
                return BatchItem(index=index, result=self.complete_request(endpoint, request))
            except Exception as e:
                logger.warning(f"批量请求第{index}项失败: {e}")
                return BatchItem(index=index, error=error_record(e))

        with ThreadPoolExecutor(max_workers=endpoint.max_parallel) as pool:
            futures = [pool.submit(run, i, r) for i, r in enumerate(requests)]
            return [f.result() for f in futures]

    def embed(self, endpoint: ProviderEndpoint, texts: List[str]) -> List[List[float]]:
        """调用 /embeddings 接口，返回与输入对齐的向量"""
        key = embedding_key(endpoint, texts)
        transcript = self._lookup(key)
        if transcript is None:
            payload = {'model': endpoint.model_id, 'input': texts}
            transcript = self._post(endpoint, '/embeddings', key, payload)
        try:
            rows = sorted(transcript.response['data'], key=lambda d: d.get('index', 0))
            vectors = [row['embedding'] for row in rows]
        except (KeyError, TypeError):
            raise FormatError(f"端点 {endpoint.name} 的嵌入响应格式错误")
        if len(vectors) != len(texts):
            raise FormatError(f"嵌入数量不匹配: 期望{len(texts)}, 实际{len(vectors)}")
        return vectors
