#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
包幻觉检测工具包 - 命令行入口
registry / dataset / run / analyze / mitigate / report 六组子命令，
每个子命令对应一个模块操作，结果写入运行目录
"""

import argparse
import json
import logging
import os
import sys
from collections import OrderedDict
from contextlib import contextmanager
from typing import Dict, List, Optional

from generation_runner import SWEEP_AXES, GenerationRunner, select_persistence_items
from hallucination_metrics import (SCOPE_AXES, Verdict, classify, cross_language_report, cross_model_overlap,
                                   deleted_attribution, distance_histogram, hallucinated_names,
                                   language_correlation, model_table, rate_breakdown, recency_comparison,
                                   sample_detection_names, verbosity_report)
from llm_gateway import LLMGateway, ProviderEndpoint, TranscriptStore
from mitigation import (MitigationPolicy, RetrievalStore, build_finetune_pairs, build_knowledge_base,
                        embedder_from_config, evaluate_mitigation, save_finetune_pairs)
from package_extraction import CodeSample, PackageMention
from package_registry import (ECOSYSTEMS, NORMALIZATION_CONVENTION, RegistryManager, diff_snapshots,
                              ecosystem_for_language, fetch_snapshot, load_snapshot, parse_ecosystem,
                              save_ledger, save_snapshot_metadata, snapshot_metadata)
from prompt_datasets import (LANGUAGES, SOURCES, TEMPORAL, PromptDataset, PromptDatasetBuilder,
                             split_temporal)
from run_store import ReportEmitter, RunManifest, RunStore
from toolkit_config import POLICY_KINDS, ConfigManager
from toolkit_errors import ConfigError, ReplayMiss, ToolkitError, UsageError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class ToolkitArgumentParser(argparse.ArgumentParser):
    """参数错误抛出UsageError而不是直接退出"""

    def error(self, message):
        raise UsageError(message)


def _dump(data) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True)


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(',') if item.strip()]


class HallucinationToolkit:
    """命令行编排：加载配置，构造网关/注册表/运行存储，并分派子命令"""

    def __init__(self, args: argparse.Namespace, argv: List[str]):
        self.args = args
        self.argv = argv
        self.config = ConfigManager(args.config)
        for assignment in args.set or []:
            self.config.apply_override(assignment)
        if args.replay:
            self.config.apply_override('Toolkit.mode=replay')
        elif args.mode:
            self.config.apply_override(f'Toolkit.mode={args.mode}')
        self.settings = self.config.get_toolkit_settings()
        self.mode = self.settings['mode']
        self.registry = RegistryManager(self.config)
        self._gateway: Optional[LLMGateway] = None
        self._dataset: Optional[PromptDataset] = None

    # ==================== 公共组件 ====================

    @property
    def gateway(self) -> LLMGateway:
        if self._gateway is None:
            store = None
            if self.mode in ('record', 'replay'):
                store = TranscriptStore(self.settings['transcript_dir'])
            self._gateway = LLMGateway(mode=self.mode, store=store, retry=self.config.get_retry_policy())
        return self._gateway

    def endpoint(self, name: str) -> ProviderEndpoint:
        return ProviderEndpoint.from_config(self.config, name)

    def run_store(self) -> RunStore:
        return RunStore(self.settings['run_root'], self.args.run)

    def dataset(self, required: bool = True) -> Optional[PromptDataset]:
        if self._dataset is None:
            path = getattr(self.args, 'dataset', None) or self.config.get_dataset_path()
            if not path:
                if required:
                    raise UsageError("缺少数据集: 使用 --dataset 或在配置 [Dataset] 中设置 path")
                return None
            self._dataset = PromptDataset.load(path)
        return self._dataset

    def prompt_lookup(self) -> Dict:
        dataset = self.dataset(required=False)
        return {r.prompt_id: r for r in dataset} if dataset is not None else {}

    def prompt_slice(self) -> PromptDataset:
        a = self.args
        return self.dataset().slice(language=a.language, source=a.source, temporal=a.temporal, limit=a.limit)

    def verdicts(self, store: RunStore) -> List[Verdict]:
        return [Verdict.from_dict(p) for p in store.read('verdict')]

    @contextmanager
    def writing(self, store: RunStore, endpoints=()):
        """持有运行锁，执行前登记清单，成功后写入结束时间"""
        with store.lock():
            dataset = self.dataset(required=False)
            manifest = RunManifest(
                run_id=store.run_id, mode=self.mode, toolkit_version=self.settings['version'],
                config_digest=self.config.digest(),
                dataset_digest=dataset.digest() if dataset is not None else '',
                endpoints=list(endpoints), normalization=NORMALIZATION_CONVENTION)
            manifest = store.begin(manifest, ' '.join(self.argv))
            yield manifest
            manifest.snapshot_digests.update(self.registry.snapshot_digests())
            store.finish(manifest)

    def save_report(self, store: RunStore, name: str, data: Dict) -> Dict:
        store.save_report_record(name, data)
        return {'run_id': store.run_id, 'report': name, 'data': data}

    def emit(self, payload: Dict):
        print(_dump(payload))

    # ==================== registry ====================

    def cmd_registry_fetch(self):
        if self.mode == 'replay':
            raise ReplayMiss("回放模式禁止网络访问")
        ecosystem = parse_ecosystem(self.args.ecosystem)
        settings = self.config.get_registry_settings()
        url = self.args.url or settings.get(f'{ecosystem}_url', '')
        if not url:
            raise UsageError(f"{ecosystem} 没有配置索引地址，请使用 --url")
        path = fetch_snapshot(url, ecosystem, self.args.out, retry=settings['retry'])
        with open(path + '.fetch.json', 'r', encoding='utf-8') as f:
            self.emit(json.load(f))

    def cmd_registry_load(self):
        snapshot = load_snapshot(self.args.path, self.args.ecosystem, self.args.as_of)
        save_snapshot_metadata(snapshot, self.args.path)
        self.emit(snapshot_metadata(snapshot))

    def _as_of(self, path: str, given: Optional[str]) -> str:
        if given:
            return given
        meta_path = path + '.meta.json'
        if os.path.exists(meta_path):
            with open(meta_path, 'r', encoding='utf-8') as f:
                return json.load(f)['as_of']
        raise UsageError(f"缺少 {path} 的快照日期: 使用日期参数或先执行 registry load")

    def cmd_registry_diff(self):
        a = self.args
        earlier = load_snapshot(a.earlier, a.ecosystem, self._as_of(a.earlier, a.earlier_date))
        later = load_snapshot(a.later, a.ecosystem, self._as_of(a.later, a.later_date))
        ledger = diff_snapshots(earlier, later)
        save_ledger(ledger, a.out)
        self.emit({'ecosystem': ledger.ecosystem, 'earlier': ledger.earlier.isoformat(),
                   'later': ledger.later.isoformat(), 'deleted': len(ledger.deleted), 'path': a.out})

    # ==================== dataset ====================

    def cmd_dataset_ingest(self):
        builder = PromptDatasetBuilder()
        dataset = PromptDataset(records=builder.ingest_stackoverflow_dump(self.args.dump, self.args.language))
        dataset.save(self.args.out)
        self.emit({'manifest': dataset.manifest, 'rejected_tags': builder.report.rejected_tags,
                   'discarded': builder.report.discarded})

    def cmd_dataset_generate(self):
        a = self.args
        builder = PromptDatasetBuilder()
        descriptions = builder.load_descriptions(a.descriptions)
        records = builder.build_llm_generated_prompts(descriptions, self.endpoint(a.endpoint), a.language,
                                                      self.gateway, temporal=a.temporal)
        dataset = PromptDataset(records=records)
        dataset.save(a.out)
        self.emit({'manifest': dataset.manifest, 'discarded': builder.report.discarded,
                   'errors': builder.report.errors})

    def cmd_dataset_split(self):
        groups: Dict = OrderedDict()
        for path in self.args.inputs:
            for record in PromptDataset.load(path):
                groups.setdefault((record.language, record.source), []).append(record)
        records = []
        for key in sorted(groups):
            group = groups[key]
            split = split_temporal([r for r in group if r.temporal == 'recent'],
                                   [r for r in group if r.temporal == 'all_time'])
            records.extend(split.records)
        dataset = PromptDataset(records=records)
        dataset.save(self.args.out)
        self.emit({'manifest': dataset.manifest, 'digest': dataset.digest()})

    # ==================== run ====================

    def cmd_run_generate(self):
        a = self.args
        prompts = self.prompt_slice().records
        endpoints = [self.endpoint(name) for name in a.endpoint]
        store = self.run_store()
        summary = {}
        with self.writing(store, endpoints=[e.name for e in endpoints]):
            for endpoint in endpoints:
                runner = GenerationRunner(self.gateway, endpoint, store=store)
                outcomes = runner.run_generation(prompts, trials=a.trials)
                summary[endpoint.name] = {'samples': sum(1 for o in outcomes if o.ok),
                                          'failed': sum(1 for o in outcomes if not o.ok)}
        self.emit({'run_id': store.run_id, 'generated': summary})

    def cmd_run_classify(self):
        store = self.run_store()
        with self.writing(store):
            done = {(v['sample_id'], v['heuristic'], v['name']) for v in store.read('verdict')}
            pending = [PackageMention.from_dict(p) for p in store.read('mention')]
            pending = [m for m in pending if (m.sample_id, m.heuristic, m.name.normalized) not in done]
            lookup = self.prompt_lookup()
            ledger = self.registry.get_ledger()
            written = 0
            for ecosystem in ECOSYSTEMS:
                group = [m for m in pending if m.name.ecosystem == ecosystem]
                if not group:
                    continue
                verdicts = classify(group, self.registry.get_snapshot(ecosystem),
                                    others=self.registry.get_other_snapshots(ecosystem),
                                    ledger=ledger if ledger is not None and ledger.ecosystem == ecosystem else None,
                                    prompt_lookup=lookup, enrich=not self.args.no_enrich)
                store.append_many('verdict', [v.to_dict() for v in verdicts])
                written += len(verdicts)
        self.emit({'run_id': store.run_id, 'classified': written, 'skipped': len(done)})

    # ==================== analyze ====================

    def _filters(self) -> Dict:
        return {axis: getattr(self.args, axis, None) for axis in SCOPE_AXES}

    def cmd_analyze_rate(self):
        store = self.run_store()
        verdicts = self.verdicts(store)
        if self.args.by:
            filters = {k: v for k, v in self._filters().items() if k != self.args.by}
            rows = []
            for value, report in rate_breakdown(verdicts, self.args.by, **filters).items():
                row = report.to_dict()
                row.pop('scope')
                rows.append(dict(value=value, **row))
            payload = self.save_report(store, f'rate_by_{self.args.by}', {'by': self.args.by, 'rows': rows})
        else:
            payload = self.save_report(store, 'rates', {'rows': model_table(verdicts)})
        self.emit(payload)

    def cmd_analyze_persistence(self):
        a = self.args
        endpoint = self.endpoint(a.endpoint)
        store = self.run_store()
        items = select_persistence_items(self.verdicts(store), self.prompt_lookup(), endpoint.model_id,
                                         a.sample, seed=a.seed)
        with self.writing(store, endpoints=[endpoint.name]):
            report = GenerationRunner(self.gateway, endpoint).persistence_experiment(items, trials=a.trials)
            data = dict(report.to_dict(), model=endpoint.model_id)
            self.emit(self.save_report(store, 'persistence', data))

    def cmd_analyze_verbosity(self):
        store = self.run_store()
        self.emit(self.save_report(store, 'verbosity', verbosity_report(self.verdicts(store)).to_dict()))

    def cmd_analyze_detect(self):
        a = self.args
        endpoint = self.endpoint(a.endpoint)
        judge = self.endpoint(a.judge) if a.judge else None
        store = self.run_store()
        verdicts = [v for v in self.verdicts(store) if v.language == a.language]
        valid, hallucinated = sample_detection_names(verdicts, endpoint.model_id, a.detect_mode, a.n, seed=a.seed)
        with self.writing(store, endpoints=[endpoint.name] + ([judge.name] if judge else [])):
            runner = GenerationRunner(self.gateway, endpoint)
            report = runner.self_detection_experiment(valid, hallucinated, a.language, judge=judge)
            data = dict(report.to_dict(), model=endpoint.model_id, mode=a.detect_mode, language=a.language)
            self.emit(self.save_report(store, f'detect_{a.detect_mode}', data))

    def cmd_analyze_distance(self):
        store = self.run_store()
        verdicts = [v for v in self.verdicts(store) if not self.args.language or v.language == self.args.language]
        self.emit(self.save_report(store, 'distance', distance_histogram(verdicts).to_dict()))

    def cmd_analyze_overlap(self):
        store = self.run_store()
        self.emit(self.save_report(store, 'overlap', cross_model_overlap(self.verdicts(store)).to_dict()))

    def cmd_analyze_deleted(self):
        store = self.run_store()
        ledger = self.registry.get_ledger()
        if ledger is None:
            raise ConfigError("未配置删除包账本: 在配置 [Ledger] 中设置 path")
        names = hallucinated_names(v for v in self.verdicts(store) if v.mention.name.ecosystem == ledger.ecosystem)
        hits, share = deleted_attribution(names, ledger)
        data = {'ecosystem': ledger.ecosystem, 'ledger_size': len(ledger.deleted),
                'hallucinated': len(names), 'hits': hits, 'share': share}
        self.emit(self.save_report(store, 'deleted', data))

    def cmd_analyze_crosslang(self):
        store = self.run_store()
        ecosystem = ecosystem_for_language(self.args.language)
        names = hallucinated_names(v for v in self.verdicts(store) if v.mention.name.ecosystem == ecosystem)
        report = cross_language_report(names, self.registry.get_other_snapshots(ecosystem))
        self.emit(self.save_report(store, f'crosslang_{ecosystem}', dict(report.to_dict(), primary=ecosystem)))

    def cmd_analyze_sweep(self):
        a = self.args
        endpoint = self.endpoint(a.endpoint)
        store = self.run_store()
        prompts = self.prompt_slice().records
        snapshot = self.registry.get_snapshot(ecosystem_for_language(a.language))
        with self.writing(store, endpoints=[endpoint.name]):
            reports = GenerationRunner(self.gateway, endpoint).parameter_sweep(
                prompts, a.axis, _csv_list(a.values), snapshot, trials=a.trials)
            rows = [{'value': value, 'hallucinated': r.hallucinated, 'total': r.total, 'rate': r.rate}
                    for value, r in reports.items()]
            data = {'axis': a.axis, 'model': endpoint.model_id, 'rows': rows}
            self.emit(self.save_report(store, 'sweep', data))

    def cmd_analyze_recency(self):
        store = self.run_store()
        self.emit(self.save_report(store, 'recency', recency_comparison(self.verdicts(store))))

    def cmd_analyze_langcorr(self):
        store = self.run_store()
        self.emit(self.save_report(store, 'language_correlation', language_correlation(self.verdicts(store))))

    # ==================== mitigate ====================

    def cmd_mitigate_build_kb(self):
        a = self.args
        endpoint = self.endpoint(a.endpoint)
        packages = PromptDatasetBuilder.load_descriptions(a.packages)
        snapshot = self.registry.get_snapshot(ecosystem_for_language(a.language))
        kb = build_knowledge_base(packages, endpoint, self.gateway, snapshot,
                                  embedder_from_config(self.config, self.gateway),
                                  questions_per_package=a.questions, language=a.language)
        kb.save(a.out)
        self.emit({'statements': len(kb), 'dimension': kb.dimension, 'path': a.out})

    def cmd_mitigate_eval(self):
        a = self.args
        endpoint = self.endpoint(a.endpoint)
        embedder = embedder_from_config(self.config, self.gateway)
        kb = RetrievalStore.load(a.kb, embedder) if a.kb else None
        policies = [MitigationPolicy.from_config(self.config, name, embedder=embedder, store=kb)
                    for name in _csv_list(a.policies)]
        prompts = self.prompt_slice().records
        snapshot = self.registry.get_snapshot(ecosystem_for_language(a.language))
        store = self.run_store()
        with self.writing(store, endpoints=[endpoint.name] + [p.judge.name for p in policies if p.judge]):
            evaluation = evaluate_mitigation(prompts, GenerationRunner(self.gateway, endpoint), policies,
                                             snapshot, trials=a.trials)
            data = dict(evaluation.to_dict(), model=endpoint.model_id)
            self.emit(self.save_report(store, 'mitigation', data))

    def cmd_mitigate_export_finetune(self):
        store = self.run_store()
        samples = [CodeSample.from_dict(s) for s in store.read('sample')]
        pairs = build_finetune_pairs(samples, self.verdicts(store), self.prompt_lookup())
        save_finetune_pairs(pairs, self.args.out)
        self.emit({'run_id': store.run_id, 'pairs': len(pairs), 'path': self.args.out})

    # ==================== report ====================

    def cmd_report_emit(self):
        store = self.run_store()
        emitter = ReportEmitter(store)
        names = [self.args.name] if self.args.name else store.report_names()
        written = []
        for name in names:
            data = store.latest_report(name)
            if data is None:
                raise UsageError(f"运行 {store.run_id} 中没有报告: {name}")
            written.extend(os.path.basename(p) for p in emitter.emit(name, data))
        self.emit({'run_id': store.run_id, 'files': sorted(set(written))})

    def execute(self):
        logger.debug(f"执行命令: {' '.join(self.argv)} (模式 {self.mode})")
        self.args.handler(self)


# ==================== 参数定义 ====================

def build_parser() -> ToolkitArgumentParser:
    parser = ToolkitArgumentParser(prog='hallucination_toolkit', description='包幻觉检测工具包')
    parser.add_argument('--config', help='配置文件路径 (默认 ToolkitSetup.ini)')
    parser.add_argument('--replay', action='store_true', help='回放模式，禁止一切网络访问')
    parser.add_argument('--mode', choices=('live', 'record', 'replay'), help='覆盖配置中的运行模式')
    parser.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help='覆盖配置项')
    parser.add_argument('--verbose', action='store_true', help='输出调试日志')

    run_parent = ToolkitArgumentParser(add_help=False)
    run_parent.add_argument('--run', required=True, help='运行ID')
    dataset_parent = ToolkitArgumentParser(add_help=False)
    dataset_parent.add_argument('--dataset', help='数据集文件 (默认取配置 [Dataset] path)')
    slice_parent = ToolkitArgumentParser(add_help=False, parents=[dataset_parent])
    slice_parent.add_argument('--language', choices=LANGUAGES, default='python')
    slice_parent.add_argument('--source', choices=SOURCES)
    slice_parent.add_argument('--temporal', choices=TEMPORAL)
    slice_parent.add_argument('--limit', type=int)

    groups = parser.add_subparsers(dest='group', required=True)

    registry = groups.add_parser('registry', help='注册表快照').add_subparsers(dest='command', required=True)
    p = registry.add_parser('fetch', help='抓取注册表索引')
    p.add_argument('--ecosystem', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--url')
    p.set_defaults(handler=HallucinationToolkit.cmd_registry_fetch)
    p = registry.add_parser('load', help='加载快照并写出元数据')
    p.add_argument('--ecosystem', required=True)
    p.add_argument('--path', required=True)
    p.add_argument('--as-of', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_registry_load)
    p = registry.add_parser('diff', help='计算已删除包账本')
    p.add_argument('--ecosystem', default='pypi')
    p.add_argument('--earlier', required=True)
    p.add_argument('--later', required=True)
    p.add_argument('--earlier-date')
    p.add_argument('--later-date')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_registry_diff)

    dataset = groups.add_parser('dataset', help='提示数据集').add_subparsers(dest='command', required=True)
    p = dataset.add_parser('ingest', help='导入Stack Overflow表格')
    p.add_argument('--dump', required=True)
    p.add_argument('--language', choices=LANGUAGES, required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_dataset_ingest)
    p = dataset.add_parser('generate', help='由包描述生成提示')
    p.add_argument('--descriptions', required=True)
    p.add_argument('--endpoint', required=True)
    p.add_argument('--language', choices=LANGUAGES, required=True)
    p.add_argument('--temporal', choices=TEMPORAL, default='all_time')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_dataset_generate)
    p = dataset.add_parser('split', help='合并数据集并做时间划分')
    p.add_argument('--inputs', nargs='+', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_dataset_split)

    run = groups.add_parser('run', help='生成与判定').add_subparsers(dest='command', required=True)
    p = run.add_parser('generate', parents=[run_parent, slice_parent], help='生成代码样本并抽取包名')
    p.add_argument('--endpoint', action='append', required=True)
    p.add_argument('--trials', type=int, default=1)
    p.set_defaults(handler=HallucinationToolkit.cmd_run_generate)
    p = run.add_parser('classify', parents=[run_parent, dataset_parent], help='按主列表判定幻觉')
    p.add_argument('--no-enrich', action='store_true', help='跳过最近有效名称计算')
    p.set_defaults(handler=HallucinationToolkit.cmd_run_classify)

    analyze = groups.add_parser('analyze', help='指标分析').add_subparsers(dest='command', required=True)
    p = analyze.add_parser('rate', parents=[run_parent], help='幻觉率')
    p.add_argument('--by', choices=SCOPE_AXES)
    for axis in SCOPE_AXES:
        p.add_argument(f'--{axis}')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_rate)
    p = analyze.add_parser('persistence', parents=[run_parent, dataset_parent], help='幻觉持久性')
    p.add_argument('--endpoint', required=True)
    p.add_argument('--sample', type=int, default=500)
    p.add_argument('--trials', type=int, default=10)
    p.add_argument('--seed', type=int, default=0)
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_persistence)
    p = analyze.add_parser('verbosity', parents=[run_parent], help='唯一包数与幻觉率')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_verbosity)
    p = analyze.add_parser('detect', parents=[run_parent], help='模型自检')
    p.add_argument('--endpoint', required=True)
    p.add_argument('--judge')
    p.add_argument('--mode', dest='detect_mode', choices=('same', 'other'), default='same')
    p.add_argument('--n', type=int, default=100)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--language', choices=LANGUAGES, default='python')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_detect)
    p = analyze.add_parser('distance', parents=[run_parent], help='编辑距离分布')
    p.add_argument('--language', choices=LANGUAGES)
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_distance)
    p = analyze.add_parser('overlap', parents=[run_parent], help='跨模型重叠')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_overlap)
    p = analyze.add_parser('deleted', parents=[run_parent], help='已删除包归因')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_deleted)
    p = analyze.add_parser('crosslang', parents=[run_parent], help='跨语言命中')
    p.add_argument('--language', choices=LANGUAGES, default='python')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_crosslang)
    p = analyze.add_parser('sweep', parents=[run_parent, slice_parent], help='解码参数扫描')
    p.add_argument('--endpoint', required=True)
    p.add_argument('--axis', choices=SWEEP_AXES, required=True)
    p.add_argument('--values', required=True, help='逗号分隔的取值')
    p.add_argument('--trials', type=int, default=1)
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_sweep)
    p = analyze.add_parser('recency', parents=[run_parent], help='近期与历史对比')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_recency)
    p = analyze.add_parser('langcorr', parents=[run_parent], help='Python与JavaScript幻觉率相关性')
    p.set_defaults(handler=HallucinationToolkit.cmd_analyze_langcorr)

    mitigate = groups.add_parser('mitigate', help='缓解策略').add_subparsers(dest='command', required=True)
    p = mitigate.add_parser('build-kb', help='构建检索知识库')
    p.add_argument('--packages', required=True, help='package,description 表格')
    p.add_argument('--endpoint', required=True)
    p.add_argument('--language', choices=LANGUAGES, default='python')
    p.add_argument('--questions', type=int, default=5)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_mitigate_build_kb)
    p = mitigate.add_parser('eval', parents=[run_parent, slice_parent], help='评估缓解策略')
    p.add_argument('--endpoint', required=True)
    p.add_argument('--policies', default=','.join(POLICY_KINDS))
    p.add_argument('--kb', help='知识库文件，覆盖策略配置中的store')
    p.add_argument('--trials', type=int, default=1)
    p.set_defaults(handler=HallucinationToolkit.cmd_mitigate_eval)
    p = mitigate.add_parser('export-finetune', parents=[run_parent, dataset_parent], help='导出微调数据')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=HallucinationToolkit.cmd_mitigate_export_finetune)

    report = groups.add_parser('report', help='报告输出').add_subparsers(dest='command', required=True)
    p = report.add_parser('emit', parents=[run_parent], help='写出表格和绘图数据')
    p.add_argument('--name')
    p.set_defaults(handler=HallucinationToolkit.cmd_report_emit)
    return parser


def configure_logging(config_path: Optional[str], verbose: bool):
    """与入口脚本一致的日志配置：UTF-8文件 + 控制台"""
    try:
        settings = ConfigManager(config_path).get_toolkit_settings()
    except ToolkitError:
        settings = {'log_file': 'hallucination_toolkit.log', 'log_level': 'INFO'}
    level = logging.DEBUG if verbose else getattr(logging, settings['log_level'].upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(settings['log_file'], encoding='utf-8'),
            logging.StreamHandler()
        ]
    )


def main(argv: Optional[List[str]] = None) -> int:
    """命令行主函数，返回退出码"""
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            logging.getLogger().setLevel(logging.DEBUG)
        HallucinationToolkit(args, argv).execute()
        return 0
    except ToolkitError as e:
        logger.error(f"命令失败: {e}")
        print(json.dumps(e.to_dict(), ensure_ascii=False), file=sys.stderr)
        return e.exit_code
    except (ValueError, OSError) as e:
        logger.error(f"命令失败: {e}")
        print(json.dumps({'error': type(e).__name__, 'message': str(e)}, ensure_ascii=False), file=sys.stderr)
        return 1


if __name__ == "__main__":
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    pre.add_argument('--verbose', action='store_true')
    known, _ = pre.parse_known_args()
    configure_logging(known.config, known.verbose)
    sys.exit(main())
