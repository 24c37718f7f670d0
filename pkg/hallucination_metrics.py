#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
幻觉指标计算
对判定结果(Verdict)做纯函数统计：幻觉率、持久性、冗长度、自检、
编辑距离分布、跨模型重叠、已删除包归因、跨语言混淆、近期对比
"""

import logging
import re
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from levenshtein_index import MetricTreeIndex
from package_extraction import HEURISTICS, PackageMention
from package_registry import (ECOSYSTEMS, DeletedPackageLedger, RegistrySnapshot,
                              contains, cross_contains)
from toolkit_errors import EcosystemMismatch

logger = logging.getLogger(__name__)

ECOSYSTEM_LANGUAGES = {'pypi': 'python', 'npm': 'javascript'}
SCOPE_AXES = ('model', 'language', 'source', 'temporal', 'heuristic')
DISTANCE_BINS = ('1-2', '3-5', '6-9', '10+')


@dataclass(frozen=True)
class Verdict:
    mention: PackageMention
    is_hallucination: bool
    nearest_valid: Optional[Tuple[str, int]] = None
    cross_ecosystem_hits: frozenset = frozenset()
    was_deleted: bool = False
    language: str = ''
    source: str = ''
    temporal: str = ''

    def scope_value(self, axis: str) -> str:
        if axis == 'model':
            return self.mention.model_id
        if axis == 'heuristic':
            return self.mention.heuristic
        return getattr(self, axis)

    def to_dict(self) -> Dict:
        data = self.mention.to_dict()
        data.update({
            'is_hallucination': self.is_hallucination,
            'nearest_valid': list(self.nearest_valid) if self.nearest_valid else None,
            'cross_ecosystem_hits': sorted(self.cross_ecosystem_hits),
            'was_deleted': self.was_deleted,
            'language': self.language,
            'source': self.source,
            'temporal': self.temporal,
        })
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'Verdict':
        mention = PackageMention.from_dict(data)
        nearest = data.get('nearest_valid')
        return cls(mention=mention, is_hallucination=data['is_hallucination'],
                   nearest_valid=(nearest[0], int(nearest[1])) if nearest else None,
                   cross_ecosystem_hits=frozenset(data.get('cross_ecosystem_hits', [])),
                   was_deleted=data.get('was_deleted', False), language=data.get('language', ''),
                   source=data.get('source', ''), temporal=data.get('temporal', ''))


# ==================== 分类 ====================

def classify(mentions: Iterable[PackageMention], primary: RegistrySnapshot,
             others: Optional[Mapping[str, RegistrySnapshot]] = None,
             ledger: Optional[DeletedPackageLedger] = None,
             index: Optional[MetricTreeIndex] = None,
             prompt_lookup: Optional[Mapping] = None,
             enrich: bool = True) -> List[Verdict]:
    """
    按主列表判定每个提及是否为幻觉，并补充最近有效名称、跨生态命中和已删除标记

    Args:
        prompt_lookup: prompt_id -> PromptRecord，用于填充来源和时间段
        enrich: False时跳过最近邻计算
    """
    others = dict(others or {})
    if primary.ecosystem in others:
        raise EcosystemMismatch(f"其他快照中不能包含主生态系统 {primary.ecosystem}")
    if ledger is not None and ledger.ecosystem != primary.ecosystem:
        raise EcosystemMismatch(f"账本生态系统 {ledger.ecosystem} 与主快照 {primary.ecosystem} 不一致")

    language = ECOSYSTEM_LANGUAGES.get(primary.ecosystem, '')
    prompt_lookup = prompt_lookup or {}
    nearest_cache: Dict[str, Tuple[str, int]] = {}
    verdicts = []
    for mention in mentions:
        hallucinated = not contains(primary, mention.name)
        nearest = None
        hits = frozenset()
        deleted = False
        if hallucinated:
            normalized = mention.name.normalized
            if enrich and len(primary) > 0:
                if normalized not in nearest_cache:
                    if index is None:
                        index = MetricTreeIndex.from_snapshot(primary)
                    nearest_cache[normalized] = index.nearest(normalized)
                nearest = nearest_cache[normalized]
            hits = frozenset(eco for eco, snap in others.items() if cross_contains(snap, mention.name))
            deleted = ledger is not None and normalized in ledger.deleted
        record = prompt_lookup.get(mention.prompt_id)
        verdicts.append(Verdict(
            mention=mention, is_hallucination=hallucinated, nearest_valid=nearest,
            cross_ecosystem_hits=hits, was_deleted=deleted, language=language,
            source=getattr(record, 'source', ''), temporal=getattr(record, 'temporal', '')))
    return verdicts


# ==================== 幻觉率 ====================

@dataclass
class RateReport:
    scope: Dict[str, str]
    hallucinated: int
    total: int
    rate: Optional[float]
    unique_hallucinations: int = 0
    unique_hallucinations_raw: int = 0
    sample_dedup_hallucinated: int = 0
    sample_dedup_total: int = 0

    @classmethod
    def from_counts(cls, hallucinated: int, total: int, scope: Optional[Dict] = None) -> 'RateReport':
        if hallucinated < 0 or total < 0 or hallucinated > total:
            raise ValueError(f"计数不合法: {hallucinated}/{total}")
        return cls(scope=dict(scope or {}), hallucinated=hallucinated, total=total,
                   rate=(hallucinated / total) if total else None)

    @property
    def percent(self) -> Optional[float]:
        return None if self.rate is None else self.rate * 100.0

    @property
    def sample_dedup_rate(self) -> Optional[float]:
        if not self.sample_dedup_total:
            return None
        return self.sample_dedup_hallucinated / self.sample_dedup_total

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['sample_dedup_rate'] = self.sample_dedup_rate
        return data


def _matches(verdict: Verdict, filters: Mapping[str, object]) -> bool:
    for axis, wanted in filters.items():
        if wanted is None:
            continue
        if axis not in SCOPE_AXES:
            raise ValueError(f"未知的统计维度: {axis}")
        value = verdict.scope_value(axis)
        if isinstance(wanted, (list, tuple, set, frozenset)):
            if value not in wanted:
                return False
        elif value != wanted:
            return False
    return True


def hallucination_rate(verdicts: Iterable[Verdict], **filters) -> RateReport:
    """幻觉率 = 幻觉提及数 / 推荐包提及总数"""
    scoped = [v for v in verdicts if _matches(v, filters)]
    hallucinated = [v for v in scoped if v.is_hallucination]
    report = RateReport.from_counts(len(hallucinated), len(scoped),
                                    {k: str(v) for k, v in filters.items() if v is not None})
    report.unique_hallucinations = len({v.mention.name.normalized for v in hallucinated})
    report.unique_hallucinations_raw = len({v.mention.name.raw for v in hallucinated})
    pairs = {(v.mention.sample_id, v.mention.name.normalized): v.is_hallucination for v in scoped}
    report.sample_dedup_total = len(pairs)
    report.sample_dedup_hallucinated = sum(1 for h in pairs.values() if h)
    return report


def rate_breakdown(verdicts: Sequence[Verdict], by: str, **filters) -> Dict[str, RateReport]:
    if by not in SCOPE_AXES:
        raise ValueError(f"未知的统计维度: {by}")
    groups: Dict[str, List[Verdict]] = defaultdict(list)
    for v in verdicts:
        if _matches(v, filters):
            groups[v.scope_value(by)].append(v)
    reports = {}
    for value in sorted(groups):
        reports[value] = hallucination_rate(groups[value], **{by: value})
        reports[value].scope.update({k: str(x) for k, x in filters.items() if x is not None})
    return reports


def model_table(verdicts: Sequence[Verdict]) -> List[Dict]:
    """每个模型一行: 总体 / LLM生成数据集 / Stack Overflow数据集 / 安装命令启发式"""
    rows = []
    by_model = rate_breakdown(verdicts, 'model')
    for model, overall in by_model.items():
        llm = hallucination_rate(verdicts, model=model, source='llm_generated')
        so = hallucination_rate(verdicts, model=model, source='stackoverflow')
        h1 = hallucination_rate(verdicts, model=model, heuristic=HEURISTICS[0])
        rows.append({
            'model': model,
            'total_hallucinated': overall.hallucinated, 'total': overall.total, 'total_rate': overall.rate,
            'llm_generated_rate': llm.rate, 'stackoverflow_rate': so.rate, 'install_command_rate': h1.rate,
            'unique_hallucinations': overall.unique_hallucinations,
        })
    return rows


# ==================== 持久性 ====================

@dataclass
class PersistenceReport:
    trials: int
    counts: Dict[str, int]
    histogram: List[int]
    fraction_all: Optional[float]
    fraction_none: Optional[float]
    fraction_repeated: Optional[float]
    failed: int = 0

    @classmethod
    def from_counts(cls, counts: Mapping[str, int], trials: int, failed: int = 0) -> 'PersistenceReport':
        histogram = [0] * (trials + 1)
        for prompt_id, k in counts.items():
            if not 0 <= k <= trials:
                raise ValueError(f"提示 {prompt_id} 的重复次数 {k} 超出 [0, {trials}]")
            histogram[k] += 1
        n = len(counts)

        def share(x: int) -> Optional[float]:
            return x / n if n else None

        return cls(trials=trials, counts=dict(sorted(counts.items())), histogram=histogram,
                   fraction_all=share(histogram[trials]), fraction_none=share(histogram[0]),
                   fraction_repeated=share(sum(histogram[2:])), failed=failed)

    def to_dict(self) -> Dict:
        return asdict(self)


# ==================== 冗长度 ====================

def pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    if len(xs) < 2 or len(xs) != len(ys):
        return None
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if np.std(x) == 0 or np.std(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


@dataclass
class VerbosityReport:
    rows: List[Dict]
    correlation: Optional[float]

    def to_dict(self) -> Dict:
        return asdict(self)


def verbosity_report(verdicts: Sequence[Verdict]) -> VerbosityReport:
    names: Dict[str, set] = defaultdict(set)
    for v in verdicts:
        names[v.mention.model_id].add(v.mention.name.normalized)
    rates = rate_breakdown(verdicts, 'model')
    rows = [{'model': model, 'unique_packages': len(names[model]), 'rate': rates[model].rate}
            for model in sorted(names)]
    usable = [r for r in rows if r['rate'] is not None]
    correlation = pearson([r['unique_packages'] for r in usable], [r['rate'] for r in usable])
    return VerbosityReport(rows=rows, correlation=correlation)


# ==================== 自检 ====================

_VALID_WORDS = {'yes', 'valid', 'true'}
_INVALID_WORDS = {'no', 'invalid', 'not', 'false'}


def parse_validity_answer(text: str) -> str:
    """首个单词匹配 yes/valid/true 为有效，no/invalid/not/false 为无效，否则无法解析"""
    m = re.search(r'[A-Za-z]+', text or '')
    if not m:
        return 'unparseable'
    word = m.group(0).lower()
    if word in _VALID_WORDS:
        return 'valid'
    if word in _INVALID_WORDS:
        return 'invalid'
    return 'unparseable'


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


@dataclass
class DetectionReport:
    """以"幻觉"为正类的混淆矩阵"""
    tp: int
    fp: int
    fn: int
    tn: int
    unparseable: int = 0
    failed: int = 0

    @classmethod
    def from_outcomes(cls, outcomes: Iterable[Tuple[bool, str]], failed: int = 0) -> 'DetectionReport':
        tp = fp = fn = tn = unparseable = 0
        for is_hallucination, answer in outcomes:
            if answer == 'unparseable':
                unparseable += 1
            elif answer == 'invalid':
                if is_hallucination:
                    tp += 1
                else:
                    fp += 1
            elif is_hallucination:
                fn += 1
            else:
                tn += 1
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, unparseable=unparseable, failed=failed)

    @property
    def accuracy(self) -> Optional[float]:
        return _ratio(self.tp + self.tn, self.tp + self.fp + self.fn + self.tn)

    @property
    def precision(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def valid_precision(self) -> Optional[float]:
        return _ratio(self.tn, self.tn + self.fn)

    @property
    def valid_recall(self) -> Optional[float]:
        return _ratio(self.tn, self.tn + self.fp)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data.update(accuracy=self.accuracy, precision=self.precision, recall=self.recall,
                    valid_precision=self.valid_precision, valid_recall=self.valid_recall)
        return data


def sample_detection_names(verdicts: Sequence[Verdict], model: str, mode: str, n: int,
                           seed: int = 0) -> Tuple[List[str], List[str]]:
    """
    为自检实验抽取数量相同的有效名称和幻觉名称

    mode: same 取该模型自己的判定，other 取其他模型的判定
    """
    if mode not in ('same', 'other'):
        raise ValueError(f"未知抽样模式: {mode}")
    pool = [v for v in verdicts if (v.mention.model_id == model) == (mode == 'same')]
    valid = sorted({v.mention.name.normalized for v in pool if not v.is_hallucination})
    hallucinated = sorted({v.mention.name.normalized for v in pool if v.is_hallucination})
    m = min(n, len(valid), len(hallucinated))
    rng = np.random.default_rng(seed)
    pick_valid = sorted(rng.choice(valid, size=m, replace=False).tolist()) if m else []
    pick_hall = sorted(rng.choice(hallucinated, size=m, replace=False).tolist()) if m else []
    return pick_valid, pick_hall


# ==================== 编辑距离分布 ====================

@dataclass
class DistanceHistogram:
    counts: List[int]
    total: int
    proportions: List[Optional[float]]
    bins: Tuple[str, ...] = DISTANCE_BINS

    @staticmethod
    def bin_of(distance: int) -> int:
        if distance < 1:
            raise ValueError(f"幻觉的最近距离必须 >= 1: {distance}")
        if distance <= 2:
            return 0
        if distance <= 5:
            return 1
        if distance <= 9:
            return 2
        return 3

    @classmethod
    def from_counts(cls, counts: Sequence[int]) -> 'DistanceHistogram':
        counts = list(counts)
        total = sum(counts)
        proportions = [c / total if total else None for c in counts]
        return cls(counts=counts, total=total, proportions=proportions)

    @classmethod
    def from_distances(cls, distances: Iterable[int]) -> 'DistanceHistogram':
        counts = [0, 0, 0, 0]
        for d in distances:
            counts[cls.bin_of(d)] += 1
        return cls.from_counts(counts)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['bins'] = list(self.bins)
        return data


def distance_histogram(verdicts: Iterable[Verdict]) -> DistanceHistogram:
    """对去重后的幻觉名称按最近有效名称距离分箱"""
    distances: Dict[str, int] = {}
    for v in verdicts:
        if v.is_hallucination and v.nearest_valid is not None:
            distances.setdefault(v.mention.name.normalized, v.nearest_valid[1])
    return DistanceHistogram.from_distances(distances[name] for name in sorted(distances))


# ==================== 跨模型重叠 ====================

@dataclass
class OverlapReport:
    hallucinated: Dict[int, int]
    valid: Dict[int, int]
    models: int

    @staticmethod
    def _single_share(histogram: Dict[int, int]) -> Optional[float]:
        total = sum(histogram.values())
        return histogram.get(1, 0) / total if total else None

    @property
    def hallucinated_single_model_share(self) -> Optional[float]:
        return self._single_share(self.hallucinated)

    @property
    def valid_single_model_share(self) -> Optional[float]:
        return self._single_share(self.valid)

    def to_dict(self) -> Dict:
        return {'models': self.models,
                'hallucinated': {str(k): v for k, v in sorted(self.hallucinated.items())},
                'valid': {str(k): v for k, v in sorted(self.valid.items())},
                'hallucinated_single_model_share': self.hallucinated_single_model_share,
                'valid_single_model_share': self.valid_single_model_share}


def cross_model_overlap(verdicts: Iterable[Verdict]) -> OverlapReport:
    """每个不同名称被多少个模型生成，有效名称和幻觉名称分开统计"""
    models_by_name: Dict[Tuple[bool, str], set] = defaultdict(set)
    models = set()
    for v in verdicts:
        models.add(v.mention.model_id)
        models_by_name[(v.is_hallucination, v.mention.name.normalized)].add(v.mention.model_id)
    hallucinated: Counter = Counter()
    valid: Counter = Counter()
    for (is_hallucination, _), generating in models_by_name.items():
        (hallucinated if is_hallucination else valid)[len(generating)] += 1
    return OverlapReport(hallucinated=dict(sorted(hallucinated.items())),
                         valid=dict(sorted(valid.items())), models=len(models))


# ==================== 已删除包 / 跨语言 ====================

def hallucinated_names(verdicts: Iterable[Verdict]) -> List[str]:
    return sorted({v.mention.name.normalized for v in verdicts if v.is_hallucination})


def deleted_attribution(names: Iterable[str], ledger: DeletedPackageLedger) -> Tuple[int, Optional[float]]:
    unique = set(names)
    hits = len(unique & ledger.deleted)
    return hits, (hits / len(unique) if unique else None)


@dataclass
class CrossLanguageReport:
    total: int
    counts: Dict[str, int]
    shares: Dict[str, Optional[float]]

    def to_dict(self) -> Dict:
        return asdict(self)


def cross_language_report(names: Iterable[str], others: Mapping[str, RegistrySnapshot]) -> CrossLanguageReport:
    unique = set(names)
    ordered = [eco for eco in ECOSYSTEMS if eco in others]
    counts = {eco: len(unique & others[eco].names) for eco in ordered}
    shares = {eco: (c / len(unique) if unique else None) for eco, c in counts.items()}
    return CrossLanguageReport(total=len(unique), counts=counts, shares=shares)


# ==================== 近期对比 / 语言相关性 ====================

def recency_comparison(verdicts: Sequence[Verdict]) -> Dict:
    rows = []
    for model in sorted({v.mention.model_id for v in verdicts}):
        recent = hallucination_rate(verdicts, model=model, temporal='recent').rate
        all_time = hallucination_rate(verdicts, model=model, temporal='all_time').rate
        delta = recent - all_time if recent is not None and all_time is not None else None
        rows.append({'model': model, 'recent_rate': recent, 'all_time_rate': all_time, 'delta': delta})
    deltas = [r['delta'] for r in rows if r['delta'] is not None]
    return {'rows': rows, 'average_delta': (sum(deltas) / len(deltas)) if deltas else None}


def language_correlation(verdicts: Sequence[Verdict]) -> Dict:
    rows = []
    for model in sorted({v.mention.model_id for v in verdicts}):
        py = hallucination_rate(verdicts, model=model, language='python').rate
        js = hallucination_rate(verdicts, model=model, language='javascript').rate
        rows.append({'model': model, 'python_rate': py, 'javascript_rate': js})
    paired = [r for r in rows if r['python_rate'] is not None and r['javascript_rate'] is not None]
    return {'rows': rows,
            'correlation': pearson([r['python_rate'] for r in paired], [r['javascript_rate'] for r in paired])}
