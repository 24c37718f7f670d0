#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
编辑距离最近邻索引(BK树)
利用Levenshtein距离的三角不等式剪枝，在主列表上精确查找最近的有效包名
"""

import logging
from typing import Dict, Iterable, List, Optional, Tuple

from rapidfuzz.distance import Levenshtein

from toolkit_errors import EmptyIndex

logger = logging.getLogger(__name__)


def levenshtein(a: str, b: str) -> int:
    """插入/删除/替换代价均为1的编辑距离"""
    return Levenshtein.distance(a, b)


class _Node:
    __slots__ = ('name', 'children')

    def __init__(self, name: str):
        self.name = name
        self.children: Dict[int, '_Node'] = {}


class MetricTreeIndex:
    """BK树索引，按名称排序后插入，构建结果与输入顺序无关"""

    def __init__(self, names: Iterable[str] = ()):
        self.root: Optional[_Node] = None
        self.size = 0
        for name in sorted(set(names)):
            self.add(name)

    @classmethod
    def from_snapshot(cls, snapshot) -> 'MetricTreeIndex':
        index = cls(snapshot.names)
        logger.info(f"BK树构建完成: {snapshot.ecosystem} {index.size}个节点")
        return index

    def __len__(self) -> int:
        return self.size

    def add(self, name: str):
        if self.root is None:
            self.root = _Node(name)
            self.size = 1
            return
        node = self.root
        while True:
            d = levenshtein(name, node.name)
            if d == 0:
                return
            child = node.children.get(d)
            if child is None:
                node.children[d] = _Node(name)
                self.size += 1
                return
            node = child

    def nearest(self, query: str) -> Tuple[str, int]:
        """返回(最近名称, 距离)，距离相同时取字典序最小的名称"""
        if self.root is None:
            raise EmptyIndex("编辑距离索引为空")
        best_name, best_d = None, None
        stack = [self.root]
        while stack:
            node = stack.pop()
            d = levenshtein(query, node.name)
            if best_d is None or d < best_d or (d == best_d and node.name < best_name):
                best_name, best_d = node.name, d
            # 距离相等的候选也需要访问以保证并列时的字典序
            candidates = [(abs(k - d), child) for k, child in node.children.items()
                          if abs(k - d) <= best_d]
            candidates.sort(key=lambda c: -c[0])
            stack.extend(child for _, child in candidates)
        return best_name, best_d

    def within(self, query: str, max_distance: int) -> List[Tuple[str, int]]:
        """返回距离不超过max_distance的所有名称，按(距离, 名称)排序"""
        results = []
        if self.root is None:
            return results
        stack = [self.root]
        while stack:
            node = stack.pop()
            d = levenshtein(query, node.name)
            if d <= max_distance:
                results.append((node.name, d))
            stack.extend(child for k, child in node.children.items() if abs(k - d) <= max_distance)
        return sorted(results, key=lambda r: (r[1], r[0]))


def nearest_valid(name: str, index: MetricTreeIndex) -> Tuple[str, int]:
    return index.nearest(name)


def brute_force_nearest(name: str, names: Iterable[str]) -> Tuple[str, int]:
    """线性扫描，作为BK树结果的对照"""
    best_name, best_d = None, None
    for candidate in names:
        d = levenshtein(name, candidate)
        if best_d is None or d < best_d or (d == best_d and candidate < best_name):
            best_name, best_d = candidate, d
    if best_name is None:
        raise EmptyIndex("名称集合为空")
    return best_name, best_d
