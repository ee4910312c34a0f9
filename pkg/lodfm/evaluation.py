# evaluation.py
# Top-N 推荐评价指标（P@N, R@N, nDCG@N, MRR, MAP）与 bootstrap 配对 t 检验
import hashlib
import json
import logging
import math
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from lodfm.errors import ConfigError, DegenerateInputError, DimensionError, StructuralError
from lodfm.feature_structure import TEST, TRAIN, VALIDATION, InteractionDataset

logger = logging.getLogger(__name__)

DEFAULT_N_VALUES = (1, 5, 10)
CANDIDATE_PROTOCOLS = ("all", "test-only")
SIGNIFICANCE_LEVEL = 0.01
DEFAULT_RESAMPLES = 10000


class RankedList:
    """单个用户的推荐列表：物品按分数降序，relevance[k] 表示第 k+1 位是否为测试集正反馈"""

    def __init__(self, user: str, items: Sequence[str], relevance: Sequence[bool], n_relevant: Optional[int] = None):
        if len(items) != len(relevance):
            raise StructuralError("items 与 relevance 长度不一致")
        if len(set(items)) != len(items):
            raise StructuralError(f"用户 {user} 的推荐列表中存在重复物品")
        self.user = user
        self.items = list(items)
        self.relevance = [bool(r) for r in relevance]
        hits = sum(self.relevance)
        # n_relevant 为该用户全部相关物品数，可能多于列表中出现的数量
        self.n_relevant = hits if n_relevant is None else int(n_relevant)
        if self.n_relevant < hits:
            raise StructuralError(f"n_relevant={self.n_relevant} 小于列表中的相关物品数 {hits}")

    def hits_at(self, n: int) -> int:
        return sum(self.relevance[:n])

    def __len__(self) -> int:
        return len(self.items)

    def __repr__(self) -> str:
        return f"RankedList(user={self.user}, length={len(self.items)}, relevant={self.n_relevant})"


def _check_n(n: int) -> None:
    if n < 1:
        raise ConfigError(f"n 必须 >= 1: {n}")


def precision_at_n(ranked: RankedList, n: int) -> float:
    """列表不足 n 个时分母仍为 n"""
    _check_n(n)
    return ranked.hits_at(n) / n


def recall_at_n(ranked: RankedList, n: int) -> Optional[float]:
    """没有相关物品的用户返回 None（不计入平均）"""
    _check_n(n)
    if ranked.n_relevant == 0:
        return None
    return ranked.hits_at(n) / ranked.n_relevant


def ndcg_at_n(ranked: RankedList, n: int) -> Optional[float]:
    """二值相关性：(2^r − 1) / log2(1 + k)，按理想排序的 IDCG 归一化"""
    _check_n(n)
    if ranked.n_relevant == 0:
        return None
    dcg = sum(1.0 / math.log2(1 + k) for k, rel in enumerate(ranked.relevance[:n], start=1) if rel)
    idcg = sum(1.0 / math.log2(1 + k) for k in range(1, min(n, ranked.n_relevant) + 1))
    return dcg / idcg


def reciprocal_rank(ranked: RankedList) -> Optional[float]:
    """1 / 第一个相关物品的位置；无相关物品或列表中从未出现相关物品时返回 None"""
    if ranked.n_relevant == 0:
        return None
    for k, rel in enumerate(ranked.relevance, start=1):
        if rel:
            return 1.0 / k
    return None


def average_precision(ranked: RankedList) -> Optional[float]:
    """AP = Σ_n P@n · like(n) / |I|，|I| 为用户的相关物品数"""
    if ranked.n_relevant == 0:
        return None
    hits = 0
    total = 0.0
    for k, rel in enumerate(ranked.relevance, start=1):
        if rel:
            hits += 1
            total += hits / k
    return total / ranked.n_relevant


def _mean(values: Iterable[Optional[float]]) -> float:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else 0.0


def mrr(lists: Iterable[RankedList]) -> float:
    """对计入的用户取 1/rank 的平均"""
    return _mean(reciprocal_rank(r) for r in lists)


def mean_average_precision(lists: Iterable[RankedList]) -> float:
    return _mean(average_precision(r) for r in lists)


def bootstrap_paired_ttest(
    a: Sequence[float],
    b: Sequence[float],
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> float:
    """
    bootstrap 配对 t 检验（双侧）。
    先算观测差值的配对 t 统计量；再把差值减去均值（构造零假设），有放回重采样 resamples 次，
    p = 重采样 |t*| >= 观测 |t| 的比例。差值方差为 0 时视为退化，p 记为 1；
    所有值都相同的重采样没有定义 t*，不计入分母。
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"配对样本长度不一致: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise DegenerateInputError("配对样本至少需要 2 个")
    if resamples < 1000:
        raise ConfigError(f"resamples 至少为 1000: {resamples}")

    diffs = a - b
    if np.std(diffs, ddof=1) == 0:
        logger.debug("配对差值方差为 0，p 记为 1")
        return 1.0
    observed = abs(float(stats.ttest_rel(a, b).statistic))

    n = diffs.size
    centered = diffs - diffs.mean()
    rng = np.random.default_rng(seed)
    exceed = 0
    counted = 0
    chunk = max(1, min(resamples, 2_000_000 // n))
    done = 0
    while done < resamples:
        size = min(chunk, resamples - done)
        samples = centered[rng.integers(0, n, size=(size, n))]
        samples = samples[samples.max(axis=1) > samples.min(axis=1)]
        means = samples.mean(axis=1)
        se = samples.std(axis=1, ddof=1) / math.sqrt(n)
        exceed += int(np.count_nonzero(np.abs(means / se) >= observed))
        counted += samples.shape[0]
        done += size
    if not counted:
        return 1.0
    return exceed / counted


# ---------------- 排序与完整评测 ----------------
def metric_names(n_values: Sequence[int]) -> List[str]:
    """指标顺序与结果表一致：MRR, MAP, 然后每个 N 依次 nDCG@N, P@N, R@N"""
    names = ["MRR", "MAP"]
    for n in n_values:
        names.extend([f"nDCG@{n}", f"P@{n}", f"R@{n}"])
    return names


def user_metrics(ranked: RankedList, n_values: Sequence[int]) -> Dict[str, Optional[float]]:
    values: Dict[str, Optional[float]] = {
        "MRR": reciprocal_rank(ranked),
        "MAP": average_precision(ranked),
    }
    for n in n_values:
        values[f"nDCG@{n}"] = ndcg_at_n(ranked, n)
        values[f"P@{n}"] = precision_at_n(ranked, n) if ranked.n_relevant else None
        values[f"R@{n}"] = recall_at_n(ranked, n)
    return values


def rank_candidates(user: str, items: Sequence[str], scores: Sequence[float], relevant: Iterable[str]) -> RankedList:
    """按分数降序排列；分数相同时按物品 id 升序"""
    items = list(items)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(items),):
        raise DimensionError(f"分数个数 {scores.shape} 与候选物品数 {len(items)} 不一致")
    id_order = np.argsort(np.array(items, dtype=object), kind="stable")
    tie_rank = np.empty(len(items), dtype=np.int64)
    tie_rank[id_order] = np.arange(len(items))
    order = np.lexsort((tie_rank, -scores))
    relevant = set(relevant)
    ranked_items = [items[k] for k in order]
    return RankedList(user, ranked_items, [i in relevant for i in ranked_items], n_relevant=len(relevant))


def candidate_items(dataset: InteractionDataset, user: str, protocol: str = "all") -> List[str]:
    """
    all: 目录中除该用户训练交互（train/validation）以外的全部物品；
    test-only: 只排该用户的测试集交互（正负反馈）。
    """
    if protocol == "all":
        seen = {i for i in dataset.interactions(user) if dataset.partitions[(user, i)] in (TRAIN, VALIDATION)}
        return [i for i in dataset.items if i not in seen]
    if protocol == "test-only":
        return dataset.items_in(user, TEST)
    raise ConfigError(f"未知的候选协议: {protocol}（可选 {CANDIDATE_PROTOCOLS}）")


class MetricReport:
    """一个模型的评测结果：逐用户取值与平均值"""

    def __init__(
        self,
        model_id: str,
        n_values: Sequence[int],
        per_user: Dict[str, Dict[str, float]],
        config_fingerprint: str = "",
        extras: Optional[Dict] = None,
    ):
        self.model_id = model_id
        self.n_values = list(n_values)
        self.per_user = per_user
        self.config_fingerprint = config_fingerprint
        self.extras = extras or {}
        self.means = {name: _mean(per_user.get(name, {}).values()) for name in metric_names(self.n_values)}

    def to_dict(self) -> Dict:
        return {
            "model": self.model_id,
            "n_values": self.n_values,
            "config_fingerprint": self.config_fingerprint,
            "means": self.means,
            "per_user": self.per_user,
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        return cls(
            model_id=data["model"],
            n_values=data["n_values"],
            per_user={name: dict(values) for name, values in data["per_user"].items()},
            config_fingerprint=data.get("config_fingerprint", ""),
            extras=dict(data.get("extras", {})),
        )

    def __repr__(self) -> str:
        shown = ", ".join(f"{k}={v:.4f}" for k, v in list(self.means.items())[:4])
        return f"MetricReport({self.model_id}: {shown}, ...)"


def evaluate_recommender(
    recommender,
    dataset: InteractionDataset,
    n_values: Sequence[int] = DEFAULT_N_VALUES,
    candidates: str = "all",
    model_id: Optional[str] = None,
    config_fingerprint: str = "",
) -> MetricReport:
    """对每个有测试集正反馈的用户排序候选物品并计算全部指标；没有测试集正反馈的用户不计入"""
    if list(n_values) != sorted(n_values) or not n_values:
        raise ConfigError(f"N 列表必须非空且升序: {n_values}")
    for n in n_values:
        _check_n(n)
    names = metric_names(n_values)
    per_user: Dict[str, Dict[str, float]] = {name: {} for name in names}
    test_positives = dataset.positives_in(TEST)
    for user in sorted(test_positives):
        items = candidate_items(dataset, user, candidates)
        if not items:
            continue
        scores = recommender.score_items(user, items)
        ranked = rank_candidates(user, items, scores, test_positives[user])
        for name, value in user_metrics(ranked, n_values).items():
            if value is not None:
                per_user[name][user] = value
    model_id = model_id or getattr(recommender, "name", type(recommender).__name__)
    report = MetricReport(model_id, n_values, per_user, config_fingerprint)
    logger.info(f"[{model_id}] 评测完成: 用户 {len(per_user['MAP'])}，MRR={report.means['MRR']:.4f}，MAP={report.means['MAP']:.4f}")
    return report


def significance_against(
    reports: Mapping[str, MetricReport],
    baseline: str,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
) -> Dict[str, Dict[str, Optional[float]]]:
    """每个模型相对 baseline 的逐指标 p 值（按用户配对）；可配对用户少于 2 个时为 None"""
    if baseline not in reports:
        raise ConfigError(f"显著性基线 {baseline} 不在结果中")
    base = reports[baseline]
    result: Dict[str, Dict[str, Optional[float]]] = {}
    for model_id, report in reports.items():
        if model_id == baseline:
            continue
        result[model_id] = {}
        for name in metric_names(report.n_values):
            mine, theirs = report.per_user.get(name, {}), base.per_user.get(name, {})
            users = sorted(set(mine) & set(theirs))
            if len(users) < 2:
                result[model_id][name] = None
                continue
            result[model_id][name] = bootstrap_paired_ttest(
                [mine[u] for u in users], [theirs[u] for u in users], resamples, seed
            )
    return result


def pairwise_auc(score_fn: Callable[[str, str], float], pairs: Iterable[Tuple[str, str, str]]) -> float:
    """(用户, 正, 负) 样本对中正样本得分严格高于负样本的比例"""
    total = 0
    wins = 0
    for user, pos, neg in pairs:
        total += 1
        if score_fn(user, pos) > score_fn(user, neg):
            wins += 1
    if not total:
        raise DegenerateInputError("没有可计算 AUC 的样本对")
    return wins / total


def report_fingerprint(data: Mapping) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()
