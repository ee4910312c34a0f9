# experiment.py
# 实验编排：数据准备、模型对比（含显著性检验与复现模式）、特征消融、维度 m 扫描
import logging
import os
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lodfm.baselines import BprMfRecommender, ItemKnnRecommender, PopRankRecommender, Recommender
from lodfm.bpr_training import LodFmRecommender, TrainReport, negative_pool, sample_pairs
from lodfm.config import ExperimentConfig
from lodfm.errors import ConfigError
from lodfm.evaluation import MetricReport, evaluate_recommender, pairwise_auc, significance_against
from lodfm.feature_builder import ExampleBuilder, build_feature_index
from lodfm.feature_structure import TRAIN, InteractionDataset, ItemKnowledge, format_feature_sets
from lodfm.fm_model import FmHyperparams, load_checkpoint
from lodfm.lod_information import load_knowledge
from lodfm.ratings_data import SPLIT_STRATEGY, DatasetStats, binarize_and_stats, load_item_mapping, load_ratings, split_train_test

logger = logging.getLogger(__name__)

# MovieLens-1M 上的参考结果，复现模式下只记录差值，不作为通过条件
REFERENCE_METRICS = ("MRR", "MAP", "nDCG@1", "P@1", "R@1", "nDCG@5", "P@5", "R@5", "nDCG@10", "P@10", "R@10")
REFERENCE_RESULTS = {
    model: dict(zip(REFERENCE_METRICS, values))
    for model, values in {
        "poprank": (0.4080, 0.1115, 0.2459, 0.2459, 0.0064, 0.2809, 0.2240, 0.0305, 0.3664, 0.2104, 0.0580),
        "knn": (0.5756, 0.2037, 0.4086, 0.4086, 0.0132, 0.4049, 0.3538, 0.0553, 0.4753, 0.3179, 0.0978),
        "bprmf": (0.5906, 0.2018, 0.4269, 0.4269, 0.0258, 0.4176, 0.3393, 0.0977, 0.5000, 0.2883, 0.1602),
        "lodfm": (0.6218, 0.2318, 0.4685, 0.4685, 0.0268, 0.4537, 0.3829, 0.1052, 0.5231, 0.3256, 0.1730),
    }.items()
}


class PreparedData:
    def __init__(self, dataset: InteractionDataset, stats: DatasetStats, mapping: Mapping[str, str]):
        self.dataset = dataset
        self.stats = stats
        self.mapping = dict(mapping)

    def __repr__(self) -> str:
        return f"PreparedData({self.dataset})"


class ExperimentResult:
    """一次实验的全部输出：按列排列的 MetricReport，外加显著性、复现差值和扫描序列"""

    def __init__(self, kind: str, reports: Mapping[str, MetricReport], meta: Dict):
        self.kind = kind
        self.columns: List[str] = list(reports)
        self.reports: Dict[str, MetricReport] = dict(reports)
        self.meta = meta
        self.baseline: Optional[str] = None
        self.significance: Dict[str, Dict[str, Optional[float]]] = {}
        self.replication: Optional[Dict] = None
        self.series: List[Dict] = []
        self.train_reports: Dict[str, Dict] = {}

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "meta": self.meta,
            "columns": self.columns,
            "baseline": self.baseline,
            "means": {col: self.reports[col].means for col in self.columns},
            "significance": self.significance,
            "replication": self.replication,
            "series": self.series,
            "training": self.train_reports,
            "reports": {col: self.reports[col].to_dict() for col in self.columns},
        }

    def __repr__(self) -> str:
        return f"ExperimentResult(kind={self.kind}, columns={self.columns})"


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """读取评分与映射、二值化、按用户分层切分"""
    records = load_ratings(config.ratings_path)
    mapping = load_item_mapping(config.mapping_path)
    dataset, stats = binarize_and_stats(records, mapping)
    split = split_train_test(dataset, config.split_seed, config.test_fraction)
    return PreparedData(split, stats, mapping)


def load_features(
    config: ExperimentConfig,
    dataset: InteractionDataset,
    sets: Iterable[str],
) -> Tuple[Dict[str, ItemKnowledge], Dict[str, str]]:
    """读取所需特征集合的背景知识；返回 (知识, 缓存指纹)。未获取到知识的物品以空条目补齐"""
    sets = frozenset(sets)
    fingerprints: Dict[str, str] = {}
    stored: Dict[str, ItemKnowledge] = {}
    if sets:
        stored, fingerprints["knowledge"] = load_knowledge(config.knowledge_path, sets)
    knowledge = {}
    missing = 0
    for item in dataset.items:
        if item in stored:
            knowledge[item] = stored[item]
        else:
            missing += 1
            knowledge[item] = ItemKnowledge(item_id=item)
    if sets and missing:
        logger.warning(f"{missing} 个物品没有背景知识，只使用 user/item one-hot 特征")
    return knowledge, fingerprints


def make_builder(
    dataset: InteractionDataset,
    knowledge: Mapping[str, ItemKnowledge],
    sets: Iterable[str],
) -> ExampleBuilder:
    index = build_feature_index(knowledge, dataset.users, dataset.items, sets)
    return ExampleBuilder(index, knowledge)


def make_recommender(
    name: str,
    config: ExperimentConfig,
    builder: Optional[ExampleBuilder] = None,
    hp: Optional[FmHyperparams] = None,
) -> Recommender:
    if name == "poprank":
        return PopRankRecommender()
    if name == "knn":
        return ItemKnnRecommender(config.knn_k)
    if name == "bprmf":
        return BprMfRecommender(config.mf)
    if name == "lodfm":
        if builder is None:
            raise ConfigError("lodfm 模型需要特征拼装器")
        return LodFmRecommender(builder, hp or config.fm)
    raise ConfigError(f"未知的模型: {name}")


def _meta(config: ExperimentConfig, data: PreparedData, fingerprints: Mapping[str, str]) -> Dict:
    return {
        "config_fingerprint": config.fingerprint(),
        "cache_fingerprints": dict(fingerprints),
        "split": {"strategy": SPLIT_STRATEGY, "seed": config.split_seed, "test_fraction": config.test_fraction},
        "candidates": config.candidates,
        "features": format_feature_sets(config.feature_sets),
        "dataset": data.stats.to_dict(),
    }


def _fit_and_evaluate(
    column: str,
    recommender: Recommender,
    config: ExperimentConfig,
    data: PreparedData,
    fingerprints: Mapping[str, str],
    on_report: Optional[Callable[[str, MetricReport], None]],
) -> MetricReport:
    logger.info(f"[{column}] 开始训练")
    recommender.fit(data.dataset)
    report = evaluate_recommender(
        recommender,
        data.dataset,
        config.n_values,
        config.candidates,
        model_id=column,
        config_fingerprint=config.fingerprint(),
    )
    report.extras["cache_fingerprints"] = dict(fingerprints)
    if on_report is not None:
        on_report(column, report)
    return report


def _train_report(recommender: Recommender) -> Optional[Dict]:
    report: Optional[TrainReport] = getattr(recommender, "report", None)
    return report.to_dict() if report is not None else None


def replication_deltas(reports: Mapping[str, MetricReport]) -> Dict:
    """与参考结果的差值（只比较报告中存在的指标），以及 LODFM 是否在 MRR/MAP/nDCG@10 上不低于 BPRMF"""
    deltas = {}
    for model, reference in REFERENCE_RESULTS.items():
        if model not in reports:
            continue
        deltas[model] = {
            metric: reports[model].means[metric] - value
            for metric, value in reference.items()
            if metric in reports[model].means
        }
    result: Dict = {"reference": REFERENCE_RESULTS, "deltas": deltas}
    if "lodfm" in reports and "bprmf" in reports:
        result["lodfm_ge_bprmf"] = {
            metric: reports["lodfm"].means[metric] >= reports["bprmf"].means[metric]
            for metric in ("MRR", "MAP", "nDCG@10")
            if metric in reports["lodfm"].means
        }
    for model, values in deltas.items():
        shown = ", ".join(f"{k} {v:+.4f}" for k, v in values.items())
        logger.info(f"[复现模式] {model} 相对参考结果: {shown}")
    return result


def run_comparison(
    config: ExperimentConfig,
    data: Optional[PreparedData] = None,
    on_report: Optional[Callable[[str, MetricReport], None]] = None,
) -> ExperimentResult:
    """
    在同一切分、同一候选协议下训练并评测每个选定模型；
    on_report 在每个模型完成后调用，用于逐个持久化结果。
    """
    data = data or prepare_data(config)
    sets = config.feature_sets if "lodfm" in config.models else frozenset()
    knowledge, fingerprints = load_features(config, data.dataset, sets)
    builder = make_builder(data.dataset, knowledge, config.feature_sets) if "lodfm" in config.models else None

    reports: Dict[str, MetricReport] = {}
    train_reports: Dict[str, Dict] = {}
    for name in config.models:
        recommender = make_recommender(name, config, builder)
        reports[name] = _fit_and_evaluate(name, recommender, config, data, fingerprints, on_report)
        trained = _train_report(recommender)
        if trained is not None:
            train_reports[name] = trained

    result = ExperimentResult("comparison", reports, _meta(config, data, fingerprints))
    result.train_reports = train_reports
    baseline = config.significance_baseline
    if baseline and baseline in reports and len(reports) > 1:
        result.baseline = baseline
        result.significance = significance_against(reports, baseline, config.resamples, config.significance_seed)
    elif baseline and len(reports) > 1:
        logger.warning(f"显著性基线 {baseline} 不在本次对比的模型中，跳过显著性检验")
    if config.replication:
        result.replication = replication_deltas(reports)
    return result


def run_ablation(
    config: ExperimentConfig,
    data: Optional[PreparedData] = None,
    on_report: Optional[Callable[[str, MetricReport], None]] = None,
) -> ExperimentResult:
    """固定 m 与种子，对每个特征集合组合各训练一个 FM"""
    if not config.ablation_sets:
        raise ConfigError("消融实验至少需要一个特征集合")
    data = data or prepare_data(config)
    required: FrozenSet[str] = frozenset().union(*config.ablation_sets)
    # 先确认全部所需缓存存在，再开始训练
    knowledge, fingerprints = load_features(config, data.dataset, required)
    hp = config.fm.replace(m=config.ablation_m)

    reports: Dict[str, MetricReport] = {}
    train_reports: Dict[str, Dict] = {}
    for sets in config.ablation_sets:
        column = format_feature_sets(sets)
        if column in reports:
            logger.warning(f"特征集合 {column} 重复，跳过")
            continue
        builder = make_builder(data.dataset, knowledge, sets)
        recommender = LodFmRecommender(builder, hp)
        reports[column] = _fit_and_evaluate(column, recommender, config, data, fingerprints, on_report)
        train_reports[column] = recommender.report.to_dict()  # type: ignore[union-attr]

    result = ExperimentResult("ablation", reports, _meta(config, data, fingerprints))
    result.meta["m"] = config.ablation_m
    result.train_reports = train_reports
    return result


def dedupe_m_values(m_values: Sequence[int]) -> List[int]:
    seen: List[int] = []
    for m in m_values:
        m = int(m)
        if m < 1:
            raise ConfigError(f"m 必须为正整数: {m}")
        if m in seen:
            logger.warning(f"m={m} 重复出现，已去重")
            continue
        seen.append(m)
    return seen


def training_auc(recommender: Recommender, dataset: InteractionDataset, seed: int, negatives: str) -> float:
    """训练分区上的成对 AUC，负样本按固定种子抽取，作为拟合程度的度量"""
    pairs = sample_pairs(
        dataset.positives_in(TRAIN),
        negative_pool(dataset, TRAIN, negatives),
        np.random.default_rng([seed, 3]),
    )
    return pairwise_auc(lambda user, item: float(recommender.score_items(user, [item])[0]), pairs)


def run_dim_sweep(
    config: ExperimentConfig,
    m_values: Optional[Sequence[int]] = None,
    data: Optional[PreparedData] = None,
    on_report: Optional[Callable[[str, MetricReport], None]] = None,
) -> ExperimentResult:
    """固定特征与种子，对每个 m 训练一个 FM，输出逐 m 指标与可直接画图的序列"""
    m_values = dedupe_m_values(config.sweep_m if m_values is None else m_values)
    if not m_values:
        raise ConfigError("m 列表不能为空")
    data = data or prepare_data(config)
    knowledge, fingerprints = load_features(config, data.dataset, config.feature_sets)
    builder = make_builder(data.dataset, knowledge, config.feature_sets)

    reports: Dict[str, MetricReport] = {}
    series: List[Dict] = []
    train_reports: Dict[str, Dict] = {}
    for m in m_values:
        column = f"m={m}"
        recommender = LodFmRecommender(builder, config.fm.replace(m=m))
        report = _fit_and_evaluate(column, recommender, config, data, fingerprints, on_report)
        reports[column] = report
        train_reports[column] = recommender.report.to_dict()  # type: ignore[union-attr]
        row: Dict = {"m": m, **report.means}
        row["train_auc"] = training_auc(recommender, data.dataset, config.fm.seed, config.fm.negatives)
        series.append(row)

    result = ExperimentResult("sweep", reports, _meta(config, data, fingerprints))
    result.series = series
    result.train_reports = train_reports
    return result


def run_training(config: ExperimentConfig, data: Optional[PreparedData] = None) -> Tuple[LodFmRecommender, PreparedData]:
    """只训练 LOD FM（train 子命令），不做评测"""
    data = data or prepare_data(config)
    knowledge, _ = load_features(config, data.dataset, config.feature_sets)
    recommender = LodFmRecommender(make_builder(data.dataset, knowledge, config.feature_sets), config.fm)
    recommender.fit(data.dataset)
    return recommender, data


def run_evaluation(
    config: ExperimentConfig,
    model: str,
    checkpoint: Optional[str] = None,
    data: Optional[PreparedData] = None,
) -> ExperimentResult:
    """
    评测单个模型。lodfm 给出 checkpoint 时直接加载（校验特征索引指纹），否则现场训练；
    基线模型总是现场训练。
    """
    data = data or prepare_data(config)
    sets = config.feature_sets if model == "lodfm" else frozenset()
    knowledge, fingerprints = load_features(config, data.dataset, sets)
    builder = make_builder(data.dataset, knowledge, config.feature_sets) if model == "lodfm" else None
    recommender = make_recommender(model, config, builder)
    if checkpoint and isinstance(recommender, LodFmRecommender):
        recommender.use_model(load_checkpoint(checkpoint, recommender.builder.index))
        report = evaluate_recommender(
            recommender, data.dataset, config.n_values, config.candidates,
            model_id=model, config_fingerprint=config.fingerprint(),
        )
        report.extras["cache_fingerprints"] = dict(fingerprints)
        report.extras["checkpoint"] = os.path.basename(checkpoint)
    else:
        report = _fit_and_evaluate(model, recommender, config, data, fingerprints, None)
    return ExperimentResult("evaluation", {model: report}, _meta(config, data, fingerprints))