#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
带重试的HTTP客户端
注册表抓取、对话补全和嵌入接口共用同一套重试策略
"""

import logging
import random
import time
from typing import Callable, Dict, Optional

import requests

from toolkit_config import RetryPolicy
from toolkit_errors import HttpStatusError, NetworkError, RateLimited

logger = logging.getLogger(__name__)


def _retry_after_seconds(response: requests.Response) -> Optional[float]:
    value = response.headers.get('Retry-After')
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class HttpClient:
    """HTTP请求封装：连接错误和5xx按指数退避重试，429优先遵守Retry-After"""

    def __init__(self, retry: Optional[RetryPolicy] = None,
                 session: Optional[requests.Session] = None,
                 sleeper: Callable[[float], None] = time.sleep,
                 rng: Optional[random.Random] = None):
        self.retry = retry or RetryPolicy()
        self.session = session or requests.Session()
        self.sleeper = sleeper
        self.rng = rng or random.Random()

    def request(self, method: str, url: str, headers: Optional[Dict] = None,
                timeout: Optional[float] = None, **kwargs) -> requests.Response:
        timeout = timeout if timeout is not None else self.retry.timeout
        attempts = self.retry.retries + 1

        for attempt in range(attempts):
            last = attempt == attempts - 1
            try:
                response = self.session.request(method, url, headers=headers,
                                                timeout=timeout, **kwargs)
            except (requests.ConnectionError, requests.Timeout) as e:
                if last:
                    raise NetworkError(f"请求失败({attempts}次尝试): {url}: {e}")
                wait = self.retry.delay(attempt, self.rng)
                logger.warning(f"连接错误(第{attempt + 1}/{attempts}次): {e}，{wait:.2f}秒后重试")
                self.sleeper(wait)
                continue

            status = response.status_code
            if 200 <= status < 300:
                return response

            if status == 429:
                hint = _retry_after_seconds(response)
                if last:
                    raise RateLimited(f"服务器限流: {url}", retry_after=hint)
                wait = hint if hint is not None else self.retry.delay(attempt, self.rng)
                logger.warning(f"服务器限流(第{attempt + 1}/{attempts}次)，{wait:.2f}秒后重试")
                self.sleeper(wait)
                continue

            if status >= 500 and not last:
                wait = self.retry.delay(attempt, self.rng)
                logger.warning(f"HTTP {status}(第{attempt + 1}/{attempts}次)，{wait:.2f}秒后重试")
                self.sleeper(wait)
                continue

            raise HttpStatusError(f"HTTP {status}: {url}", status=status)

        raise NetworkError(f"请求失败: {url}")

    def get(self, url: str, **kwargs) -> requests.Response:
        return self.request('GET', url, **kwargs)

    def post_json(self, url: str, payload: Dict, **kwargs) -> requests.Response:
        return self.request('POST', url, json=payload, **kwargs)
