#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
工具包异常定义
所有模块抛出的错误都从ToolkitError派生，exit_code供命令行使用
"""

from typing import Optional


class ToolkitError(Exception):
    """工具包基础异常"""

    exit_code = 1

    def to_dict(self) -> dict:
        return {'error': type(self).__name__, 'message': str(self)}


class UsageError(ToolkitError):
    """命令行用法错误"""
    exit_code = 2


class ConfigError(ToolkitError):
    """配置文件错误"""
    exit_code = 3


# ==================== 注册表 ====================

class EmptyName(ToolkitError):
    """包名去除空白和引号后为空"""


class IllegalName(ToolkitError):
    """包名包含生态系统不允许的字符"""


class UnknownEcosystem(ToolkitError):
    """未知的生态系统标识"""


class UnreadableFile(ToolkitError):
    """文件不存在或无法读取"""


class FormatError(ToolkitError):
    """文件或响应格式错误"""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"第{line}行: {message}"
        super().__init__(message)
        self.line = line


class EcosystemMismatch(ToolkitError):
    """生态系统不一致"""


class DateOrderError(ToolkitError):
    """快照日期顺序错误"""


# ==================== 网络 ====================

class NetworkError(ToolkitError):
    """网络不可达，重试后仍失败"""


class HttpStatusError(ToolkitError):
    """服务器返回非成功状态码"""

    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


class RateLimited(ToolkitError):
    """服务器限流"""

    def __init__(self, message: str, retry_after: Optional[float] = None):
        super().__init__(message)
        self.retry_after = retry_after


class UnsupportedParam(ToolkitError):
    """端点不支持请求的生成参数"""


class ReplayMiss(ToolkitError):
    """回放模式下没有对应的记录"""


# ==================== 抽取 / 数据集 / 实验 ====================

class SampleMismatch(ToolkitError):
    """提及列表不属于同一个代码样本"""


class MissingColumn(ToolkitError):
    """数据表缺少必需列"""


class MixedLanguage(ToolkitError):
    """数据集中混有不同语言或来源"""


class EmptyIndex(ToolkitError):
    """编辑距离索引为空"""


class EmptyStore(ToolkitError):
    """检索库为空"""


class RunLocked(ToolkitError):
    """运行目录已被其他进程占用"""
