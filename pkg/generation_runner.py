#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
生成实验编排
驱动端点完成代码生成和三种启发式抽取，并实现持久性、自检和参数扫描实验
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from hallucination_metrics import (DetectionReport, PersistenceReport, RateReport, Verdict, classify,
                                   hallucination_rate, parse_validity_answer)
from llm_gateway import (ChatRequest, GenerationParams, LLMGateway, ProviderEndpoint,
                         build_code_generation_request, code_generation_profile,
                         error_record, language_label, package_prompt_profile, raise_replay_misses)
from package_extraction import (H2_FROM_CODE, H3_FROM_PROMPT, CodeSample, MentionSet, PackageMention,
                                build_package_query_from_code, build_package_query_from_prompt,
                                extract_install_commands, mentions_from_names, merge_mentions,
                                parse_package_list_response)
from package_registry import RegistrySnapshot, ecosystem_for_language
from prompt_datasets import PromptRecord
from run_store import RunStore
from toolkit_errors import ReplayMiss, UnsupportedParam

logger = logging.getLogger(__name__)

PERSISTENCE_NONCE_BASE = 1000
SWEEP_AXES = ('temperature', 'top_p', 'top_k', 'min_p')
VALIDITY_QUESTION = "Is {name} a valid {L} package?"


@dataclass
class SampleOutcome:
    prompt: PromptRecord
    trial: int
    sample: Optional[CodeSample] = None
    mentions: Optional[MentionSet] = None
    transcript_keys: List[str] = field(default_factory=list)
    error: Optional[Dict] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _replace_prompt_text(prompt: PromptRecord, text: str) -> PromptRecord:
    return PromptRecord(prompt_id=prompt.prompt_id, text=text, language=prompt.language,
                        source=prompt.source, temporal=prompt.temporal, origin_ref=prompt.origin_ref)


class GenerationRunner:
    """生成运行器：每个(提示, 试次)一次代码生成 + 启发式1抽取 + 启发式2/3各一次查询"""

    def __init__(self, gateway: LLMGateway, endpoint: ProviderEndpoint,
                 store: Optional[RunStore] = None):
        self.gateway = gateway
        self.endpoint = endpoint
        self.store = store

    def generate_sample(self, prompt: PromptRecord, trial: int, trial_nonce: Optional[int] = None,
                        code_params: Optional[GenerationParams] = None,
                        package_params: Optional[GenerationParams] = None,
                        prompt_text: Optional[str] = None) -> SampleOutcome:
        """
        单个样本的完整流程

        Args:
            trial_nonce: 转录缓存键中的试次标识，默认等于trial
            prompt_text: 实际发送的提示文本(缓解策略会改写)，默认使用原提示
        """
        nonce = trial if trial_nonce is None else trial_nonce
        effective = prompt if prompt_text is None else _replace_prompt_text(prompt, prompt_text)
        ecosystem = ecosystem_for_language(prompt.language)
        outcome = SampleOutcome(prompt=prompt, trial=trial)

        code_request = build_code_generation_request(effective.text, prompt.language, self.endpoint)
        if code_params is not None:
            code_request = ChatRequest(messages=code_request.messages, params=code_params)
        generated = self.gateway.complete_request(self.endpoint, code_request.with_nonce(nonce))
        outcome.transcript_keys.append(generated.transcript_key)

        sample = CodeSample(
            sample_id=f"{self.endpoint.name}/{prompt.prompt_id}/{nonce}",
            model_id=self.endpoint.model_id, prompt_id=prompt.prompt_id, trial=trial,
            language=prompt.language, body=generated.text, created_at=generated.recorded_at)

        h1 = extract_install_commands(sample)
        queries = [(H2_FROM_CODE, build_package_query_from_code(sample, self.endpoint)),
                   (H3_FROM_PROMPT, build_package_query_from_prompt(effective, self.endpoint))]
        found: Dict[str, List[PackageMention]] = {}
        for heuristic, request in queries:
            if package_params is not None:
                request = ChatRequest(messages=request.messages, params=package_params)
            answer = self.gateway.complete_request(self.endpoint, request.with_nonce(nonce))
            outcome.transcript_keys.append(answer.transcript_key)
            parsed = parse_package_list_response(answer.text, ecosystem)
            found[heuristic] = mentions_from_names(sample, parsed.names, heuristic)

        outcome.sample = sample
        outcome.mentions = merge_mentions(sample, h1, found[H2_FROM_CODE], found[H3_FROM_PROMPT])
        return outcome

    def _safe_generate(self, prompt: PromptRecord, trial: int, **kwargs) -> SampleOutcome:
        try:
            return self.generate_sample(prompt, trial, **kwargs)
        except ReplayMiss:
            raise
        except Exception as e:
            logger.warning(f"生成失败 {prompt.prompt_id} 试次{trial}: {e}")
            return SampleOutcome(prompt=prompt, trial=trial, error=error_record(e))

    def run_generation(self, prompts: Sequence[PromptRecord], trials: int = 1,
                       code_params: Optional[GenerationParams] = None,
                       package_params: Optional[GenerationParams] = None,
                       nonce_base: int = 0, persist: bool = True) -> List[SampleOutcome]:
        """
        对每个提示×试次运行完整流程；已持久化的(提示, 试次)会被跳过，
        结果按输入顺序写入运行存储
        """
        if trials < 1:
            raise ValueError(f"trials必须 >= 1: {trials}")
        done = set()
        if self.store is not None and persist:
            done = self.store.completed_pairs(self.endpoint.model_id)
        jobs = [(p, t) for p in prompts for t in range(trials) if (p.prompt_id, t) not in done]
        if done:
            logger.info(f"续跑: 跳过{len(prompts) * trials - len(jobs)}个已完成样本")

        outcomes: List[SampleOutcome] = []
        with ThreadPoolExecutor(max_workers=self.endpoint.max_parallel) as pool:
            futures = [pool.submit(self._safe_generate, p, t, trial_nonce=nonce_base + t,
                                   code_params=code_params, package_params=package_params)
                       for p, t in jobs]
            for future in futures:
                outcome = future.result()
                outcomes.append(outcome)
                if persist and self.store is not None:
                    self._persist(outcome)

        failed = sum(1 for o in outcomes if not o.ok)
        logger.info(f"生成完成: {len(outcomes) - failed}个样本成功, {failed}个失败")
        return outcomes

    def _persist(self, outcome: SampleOutcome):
        if not outcome.ok:
            self.store.append('error', {'prompt_id': outcome.prompt.prompt_id, 'trial': outcome.trial,
                                        **outcome.error})
            return
        sample = outcome.sample.to_dict()
        sample['transcript_keys'] = outcome.transcript_keys
        self.store.append('sample', sample)
        self.store.append_many('mention', [m.to_dict() for m in outcome.mentions])

    # ==================== 持久性 ====================

    def persistence_experiment(self, items: Sequence[Tuple[PromptRecord, str]], trials: int = 10,
                               code_params: Optional[GenerationParams] = None) -> PersistenceReport:
        """每个提示重新生成trials次，统计原幻觉名称(规范化后)再次出现的次数"""
        counts: Dict[str, int] = {}
        failed = 0
        for prompt, name in items:
            outcomes = self.run_generation([prompt], trials=trials, code_params=code_params,
                                           nonce_base=PERSISTENCE_NONCE_BASE, persist=False)
            if any(not o.ok for o in outcomes):
                failed += 1
                logger.warning(f"持久性实验: 提示 {prompt.prompt_id} 存在失败试次，已排除")
                continue
            counts[prompt.prompt_id] = sum(1 for o in outcomes if name in o.mentions.normalized_names())
        return PersistenceReport.from_counts(counts, trials, failed=failed)

    # ==================== 自检 ====================

    def self_detection_experiment(self, valid_names: Sequence[str], hallucinated_names: Sequence[str],
                                  language: str, judge: Optional[ProviderEndpoint] = None) -> DetectionReport:
        """逐个询问 "Is [name] a valid <语言> package?"，以幻觉为正类计算指标"""
        endpoint = judge or self.endpoint
        label = language_label(language)
        labelled = [(n, False) for n in valid_names] + [(n, True) for n in hallucinated_names]
        requests = [ChatRequest(messages=[{'role': 'user',
                                           'content': VALIDITY_QUESTION.format(name=n, L=label)}],
                                params=package_prompt_profile(endpoint))
                    for n, _ in labelled]
        outcomes = []
        failed = 0
        items = self.gateway.complete_batch(endpoint, requests)
        raise_replay_misses(items)
        for (name, truth), item in zip(labelled, items):
            if not item.ok:
                failed += 1
                continue
            outcomes.append((truth, parse_validity_answer(item.result.text)))
        report = DetectionReport.from_outcomes(outcomes, failed=failed)
        logger.info(f"自检实验完成: 精确率{report.precision}, 召回率{report.recall}")
        return report

    # ==================== 参数扫描 ====================

    def parameter_sweep(self, prompts: Sequence[PromptRecord], axis: str, values: Iterable,
                        snapshot: RegistrySnapshot, trials: int = 1) -> Dict[str, RateReport]:
        """同一批提示和试次标识下，对单个解码参数取不同值并计算幻觉率"""
        if axis not in SWEEP_AXES:
            raise ValueError(f"未知扫描参数: {axis}")
        if axis in ('top_k', 'min_p') and axis not in self.endpoint.supports:
            raise UnsupportedParam(f"端点 {self.endpoint.name} 不支持参数 {axis}")

        reports: Dict[str, RateReport] = {}
        for value in values:
            value = int(value) if axis == 'top_k' else float(value)
            code_params = code_generation_profile(self.endpoint).replace(**{axis: value})
            package_params = package_prompt_profile(self.endpoint).replace(**{axis: value})
            outcomes = self.run_generation(prompts, trials=trials, code_params=code_params,
                                           package_params=package_params, persist=False)
            mentions = [m for o in outcomes if o.ok for m in o.mentions]
            verdicts = classify(mentions, snapshot, enrich=False)
            report = hallucination_rate(verdicts)
            report.scope.update({'axis': axis, 'value': repr(value)})
            reports[repr(value)] = report
            logger.info(f"参数扫描 {axis}={value}: 幻觉率 {report.rate}")
        return reports


def select_persistence_items(verdicts: Sequence[Verdict], prompts: Mapping[str, PromptRecord],
                             model: str, n: int, seed: int = 0) -> List[Tuple[PromptRecord, str]]:
    """从产生过幻觉的提示中随机抽取n个，每个提示配对其字典序最小的幻觉名称"""
    first: Dict[str, str] = {}
    for v in verdicts:
        prompt_id = v.mention.prompt_id
        if not v.is_hallucination or v.mention.model_id != model or prompt_id not in prompts:
            continue
        name = v.mention.name.normalized
        if prompt_id not in first or name < first[prompt_id]:
            first[prompt_id] = name
    candidates = sorted(first)
    m = min(n, len(candidates))
    rng = np.random.default_rng(seed)
    picked = sorted(rng.choice(candidates, size=m, replace=False).tolist()) if m else []
    return [(prompts[prompt_id], first[prompt_id]) for prompt_id in picked]
