#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
本地桩端点服务
提供与chat-completion / embeddings / PyPI simple索引 / npm名称列表兼容的接口，
用于离线演示和测试，支持脚本化应答、故障注入和并发统计
"""

import argparse
import hashlib
import logging
import re
import threading
import time
from typing import Callable, Dict, List, Optional

from flask import Flask, Response, jsonify, request
from werkzeug.serving import make_server

logger = logging.getLogger(__name__)

Responder = Callable[[Dict], str]

DEMO_VALID = {
    'python': ['requests', 'numpy', 'pandas', 'flask', 'django', 'scipy', 'matplotlib',
               'beautifulsoup4', 'sqlalchemy', 'pytest', 'pyyaml', 'click'],
    'javascript': ['express', 'lodash', 'axios', 'react', 'moment', 'chalk', 'commander',
                   'jest', 'mongoose', 'uuid', 'dotenv', '@angular/core'],
}
DEMO_FICTIONAL = {
    'python': ['requests-helper', 'numpyx', 'flask-magicauth', 'pandas-turbo-io'],
    'javascript': ['express-autoroute', 'lodash-deepfix', 'axios-retryify', 'react-smartform'],
}


def _stable_index(text: str, modulo: int) -> int:
    return int(hashlib.sha256(text.encode('utf-8')).hexdigest(), 16) % modulo


def echo_responder(payload: Dict) -> str:
    """返回最后一条用户消息"""
    for message in reversed(payload.get('messages', [])):
        if message.get('role') == 'user':
            return message.get('content', '')
    return ''


def demo_responder(payload: Dict) -> str:
    """
    确定性演示应答器
    根据系统消息识别请求类型(代码生成/包列表/有效性判断/提示生成)，
    按内容哈希从有效包和虚构包中选取名称
    """
    messages = payload.get('messages', [])
    system = next((m['content'] for m in messages if m.get('role') == 'system'), '')
    user = next((m['content'] for m in reversed(messages) if m.get('role') == 'user'), '')
    language = 'javascript' if 'JavaScript' in system or 'JavaScript' in user else 'python'
    valid, fictional = DEMO_VALID[language], DEMO_FICTIONAL[language]

    excluded = set()
    m = re.search(r'they do not exist: (.+?)\.\s*$', user)
    if m:
        excluded = {n.strip() for n in m.group(1).split(',')}

    def pick(seed: str, count: int) -> List[str]:
        pool = valid + fictional
        start = _stable_index(seed, len(pool))
        names = [pool[(start + 3 * i) % len(pool)] for i in range(count)]
        return [n for n in names if n not in excluded] or [valid[_stable_index(seed, len(valid))]]

    question = re.match(r'Is (\S+) a valid (?:Python|JavaScript) package\?', user)
    if question:
        return 'Yes' if question.group(1) in valid else 'No'
    if 'generates' in system:
        names = pick(user, 2)
        installer = 'npm install' if language == 'javascript' else 'pip install'
        return (f"```bash\n{installer} {' '.join(names)}\n```\n"
                f"```\n# solution for: {user[:40]}\n```")
    if 'determines' in system or 'recommends' in system:
        if user.rstrip().endswith('None'):
            return 'None'
        return ', '.join(pick(system[:20] + user, 3))
    if 'creating simple prompts' in system:
        m = re.search(r'package description: (.+)$', user, re.S)
        topic = (m.group(1).strip() if m else 'a task').rstrip('.')
        label = 'JavaScript' if language == 'javascript' else 'Python'
        return f"Generate {label} code that demonstrates {topic[:60].lower()}."
    if 'list of five questions' in system or 'questions' in user.lower():
        return '\n'.join(f"{i}. How to use it for task {i}" for i in range(1, 6))
    return 'None'


def _lexical_vector(text: str, dimension: int = 16) -> List[float]:
    vector = [0.0] * dimension
    for token in re.findall(r'[a-z0-9]+', text.lower()):
        vector[_stable_index(token, dimension)] += 1.0
    return vector


class StubEndpointServer:
    """桩端点服务器"""

    def __init__(self, responder: Optional[Responder] = None,
                 registry_names: Optional[Dict[str, List[str]]] = None,
                 delay: float = 0.0):
        self.responder = responder or echo_responder
        self.registry_names = registry_names or {}
        self.delay = delay
        self.fail_queue: List[int] = []
        self.retry_after: Optional[str] = None
        self.lock = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0
        self.request_count = 0
        self.requests: List[Dict] = []
        self._server = None
        self._thread = None

        self.app = Flask(__name__)
        self.setup_routes()

    def _enter(self) -> Optional[int]:
        with self.lock:
            self.request_count += 1
            if self.fail_queue:
                return self.fail_queue.pop(0)
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            return None

    def _leave(self):
        with self.lock:
            self.in_flight -= 1

    def _failure(self, status: int) -> Response:
        response = jsonify({'status': 'error', 'message': f'injected failure {status}'})
        response.status_code = status
        if status == 429 and self.retry_after is not None:
            response.headers['Retry-After'] = self.retry_after
        return response

    def setup_routes(self):
        """设置路由"""
        @self.app.route('/v1/chat/completions', methods=['POST'])
        def chat_completions():
            failure = self._enter()
            if failure is not None:
                return self._failure(failure)
            try:
                payload = request.get_json(force=True)
                with self.lock:
                    self.requests.append(payload)
                if self.delay:
                    time.sleep(self.delay)
                content = self.responder(payload)
                return jsonify({
                    'id': 'stub-' + hashlib.sha256(repr(payload).encode('utf-8')).hexdigest()[:12],
                    'object': 'chat.completion',
                    'model': payload.get('model', 'stub'),
                    'choices': [{'index': 0, 'finish_reason': 'stop',
                                 'message': {'role': 'assistant', 'content': content}}],
                    'usage': {'prompt_tokens': 0, 'completion_tokens': len(content.split())}
                })
            finally:
                self._leave()

        @self.app.route('/v1/embeddings', methods=['POST'])
        def embeddings():
            failure = self._enter()
            if failure is not None:
                return self._failure(failure)
            try:
                payload = request.get_json(force=True)
                texts = payload.get('input', [])
                if isinstance(texts, str):
                    texts = [texts]
                return jsonify({
                    'object': 'list',
                    'data': [{'index': i, 'embedding': _lexical_vector(t)} for i, t in enumerate(texts)]
                })
            finally:
                self._leave()

        @self.app.route('/simple/')
        def simple_index():
            failure = self._enter()
            if failure is not None:
                return self._failure(failure)
            try:
                anchors = ''.join(f'    <a href="/simple/{n}/">{n}</a>\n'
                                  for n in self.registry_names.get('pypi', []))
                body = f"<!DOCTYPE html>\n<html>\n  <body>\n{anchors}  </body>\n</html>\n"
                return Response(body, mimetype='text/html')
            finally:
                self._leave()

        @self.app.route('/npm-names')
        def npm_names():
            failure = self._enter()
            if failure is not None:
                return self._failure(failure)
            try:
                body = ''.join(n + '\n' for n in self.registry_names.get('npm', []))
                return Response(body, mimetype='text/plain')
            finally:
                self._leave()

        @self.app.route('/api/stats')
        def stats():
            with self.lock:
                return jsonify({'status': 'success', 'request_count': self.request_count,
                                'peak_in_flight': self.peak_in_flight})

    def start(self, host: str = '127.0.0.1', port: int = 0) -> str:
        """在后台线程启动服务，返回基础URL"""
        self._server = make_server(host, port, self.app, threaded=True)
        self._thread = threading.Thread(target=self._server.serve_forever)
        self._thread.daemon = True
        self._thread.start()
        base_url = f"http://{host}:{self._server.server_port}"
        logger.info(f"桩端点已启动: {base_url}")
        return base_url

    def stop(self):
        if self._server is not None:
            self._server.shutdown()
            self._thread.join(timeout=5)
            self._server = None
            logger.info("桩端点已停止")

    def run(self, host: str = '127.0.0.1', port: int = 8765):
        """前台运行"""
        try:
            logger.info(f"桩端点前台运行: http://{host}:{port}/v1")
            self.app.run(host=host, port=port, threaded=True)
        except KeyboardInterrupt:
            logger.info("接收到中断信号，正在关闭...")


if __name__ == "__main__":
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler()]
    )
    parser = argparse.ArgumentParser(description='本地桩端点服务')
    parser.add_argument('--host', default='127.0.0.1')
    parser.add_argument('--port', type=int, default=8765)
    args = parser.parse_args()

    names = {'pypi': DEMO_VALID['python'], 'npm': DEMO_VALID['javascript']}
    StubEndpointServer(responder=demo_responder, registry_names=names).run(host=args.host, port=args.port)
