# feature_builder.py
# 根据背景知识构建全局特征索引，并按 user|item|po|sp|pr 块布局拼装 FM 训练样本
import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from lodfm.errors import DegenerateInputError, StructuralError
from lodfm.feature_structure import (
    PO,
    PR,
    SP,
    FeatureIndex,
    ItemKnowledge,
    SparseVector,
)
from lodfm.lod_information import normalize_pagerank

logger = logging.getLogger(__name__)


def _sorted_unique(ids: Iterable[str], kind: str) -> List[str]:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise StructuralError(f"{kind} id 存在重复")
    return sorted(ids)


def build_feature_index(
    knowledge: Mapping[str, ItemKnowledge],
    users: Iterable[str],
    items: Iterable[str],
    config: Iterable[str],
) -> FeatureIndex:
    """
    构建 user | item | PO | SP | PR 五块连续索引。
    PO/SP 词表取所有物品（含测试集物品）的并集，块内按 URI 字典序排列。
    """
    features = frozenset(config)
    users = _sorted_unique(users, "用户")
    items = _sorted_unique(items, "物品")

    missing = [i for i in items if i not in knowledge]
    if missing:
        raise StructuralError(f"{len(missing)} 个物品缺少背景知识条目，例如: {missing[:3]}")

    po_pairs = set()
    sp_pairs = set()
    for item in items:
        if PO in features:
            po_pairs.update(knowledge[item].po_list)
        if SP in features:
            sp_pairs.update(knowledge[item].sp_list)

    index = FeatureIndex(
        users=users,
        items=items,
        po_pairs=sorted(po_pairs),
        sp_pairs=sorted(sp_pairs),
        features=features,
    )
    logger.info(
        f"特征索引构建完成: p={index.p}（用户 {len(users)}，物品 {len(items)}，"
        f"PO {len(po_pairs)}，SP {len(sp_pairs)}，PR {1 if index.pr_column is not None else 0}）"
    )
    return index


def _item_entries(index: FeatureIndex, knowledge: ItemKnowledge) -> Dict[int, float]:
    """物品部分的特征：物品 one-hot、PO、SP（各自归一化为和 1）以及 PR"""
    entries = {index.item_index(knowledge.item_id): 1.0}

    if PO in index.features and knowledge.po_list:
        value = 1.0 / len(knowledge.po_list)
        for pair in knowledge.po_list:
            # 构建索引之后才出现的键直接跳过
            idx = index.po_block.get(pair)
            if idx is not None:
                entries[idx] = value

    if SP in index.features and knowledge.sp_list:
        value = 1.0 / len(knowledge.sp_list)
        for pair in knowledge.sp_list:
            idx = index.sp_block.get(pair)
            if idx is not None:
                entries[idx] = value

    if index.pr_column is not None:
        if knowledge.pagerank_value is None and knowledge.pagerank_raw is not None:
            raise StructuralError(
                f"物品 {knowledge.item_id} 的 PageRank 尚未归一化，请先调用 attach_normalized_pagerank"
            )
        if knowledge.pagerank_value:
            entries[index.pr_column] = float(knowledge.pagerank_value)
    return entries


def assemble_example(
    user: str,
    item: str,
    index: FeatureIndex,
    knowledge: ItemKnowledge,
) -> SparseVector:
    """拼装一个 (user, item) 样本；用户和物品 one-hot 值均为 1"""
    if knowledge.item_id != item:
        raise StructuralError(f"背景知识属于物品 {knowledge.item_id}，而不是 {item}")
    entries = _item_entries(index, knowledge)
    entries[index.user_index(user)] = 1.0
    return SparseVector.from_mapping(entries)


def attach_normalized_pagerank(
    knowledge: Mapping[str, ItemKnowledge],
) -> Dict[str, ItemKnowledge]:
    """用全部物品的最大 PageRank 归一化，缺失值记为 0"""
    normalized = normalize_pagerank({item: k.pagerank_raw for item, k in knowledge.items()})
    return {item: k.with_pagerank_value(normalized[item]) for item, k in knowledge.items()}


class ExampleBuilder:
    """
    带缓存的样本拼装器：每个物品的物品部分只计算一次。
    build(user, item) 的结果与 assemble_example 完全一致。
    """

    def __init__(self, index: FeatureIndex, knowledge: Mapping[str, ItemKnowledge]):
        self.index = index
        knowledge = dict(knowledge)
        if index.pr_column is not None and any(
            k.pagerank_value is None and k.pagerank_raw is not None for k in knowledge.values()
        ):
            try:
                knowledge = attach_normalized_pagerank(knowledge)
            except DegenerateInputError as e:
                logger.warning(f"PageRank 无法归一化，PR 特征将全部为 0: {e}")
        self.knowledge = knowledge
        self._item_cache: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    def _item_part(self, item: str) -> Tuple[np.ndarray, np.ndarray]:
        cached = self._item_cache.get(item)
        if cached is None:
            try:
                item_knowledge = self.knowledge[item]
            except KeyError:
                item_knowledge = ItemKnowledge(item_id=item)
            entries = sorted(_item_entries(self.index, item_knowledge).items())
            cached = (
                np.array([i for i, _ in entries], dtype=np.int64),
                np.array([v for _, v in entries], dtype=np.float64),
            )
            self._item_cache[item] = cached
        return cached

    def build(self, user: str, item: str) -> SparseVector:
        item_idx, item_val = self._item_part(item)
        # 用户块位于所有物品特征之前，直接前置即保持有序
        return SparseVector(
            np.concatenate(([self.index.user_index(user)], item_idx)),
            np.concatenate(([1.0], item_val)),
        )

    def item_matrix(self, items: Optional[Sequence[str]] = None) -> sparse.csr_matrix:
        """物品部分特征矩阵（len(items) x p），用于向量化打分"""
        items = list(self.index.items if items is None else items)
        rows, cols, vals = [], [], []
        for row, item in enumerate(items):
            idx, val = self._item_part(item)
            rows.extend([row] * len(idx))
            cols.extend(idx.tolist())
            vals.extend(val.tolist())
        return sparse.csr_matrix(
            (np.array(vals, dtype=np.float64), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
            shape=(len(items), self.index.p),
        )
