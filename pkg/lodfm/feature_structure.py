# feature_structure.py
# FM 输入所需的基础数据结构：稀疏向量、全局特征索引、交互数据集、物品背景知识
import hashlib
import math
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple
from urllib.parse import quote, unquote

import numpy as np

from lodfm.errors import StructuralError, UnknownEntityError

# 特征集合名称（小写），与 CLI 的 --features/--sets 取值一致
PO = "po"
SP = "sp"
PR = "pr"
ALL_FEATURE_SETS = (PO, SP, PR)

# 分区标签
TRAIN = "train"
VALIDATION = "validation"
TEST = "test"
PARTITIONS = (TRAIN, VALIDATION, TEST)

# 块名称（序列化时使用），顺序即样本向量中各块的排列顺序
BLOCK_ORDER = ("user", "item", PO, SP, PR)


def parse_feature_sets(text: Optional[str]) -> FrozenSet[str]:
    """解析 "po,sp,pr" 或 "po+sp" 形式的特征集合；空串或 None 表示不使用 LOD 特征"""
    if not text:
        return frozenset()
    sets = set()
    for part in str(text).replace("+", ",").split(","):
        name = part.strip().lower()
        if not name or name == "none":
            continue
        if name not in ALL_FEATURE_SETS:
            raise StructuralError(f"未知的特征集合: {part!r}（可选 po, sp, pr）")
        sets.add(name)
    return frozenset(sets)


def format_feature_sets(sets: Iterable[str]) -> str:
    """按 po, sp, pr 的固定顺序输出，如 "po+pr"；空集合输出 "none" """
    ordered = [name for name in ALL_FEATURE_SETS if name in set(sets)]
    return "+".join(ordered) if ordered else "none"


class SparseVector:
    """FM 的输入 x：按索引严格递增的 (index, value) 列表，不存储显式 0"""

    def __init__(self, indices: Iterable[int], values: Iterable[float]):
        idx = np.asarray(list(indices), dtype=np.int64)
        val = np.asarray(list(values), dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise StructuralError("indices 与 values 长度不一致")
        if idx.size:
            if idx[0] < 0:
                raise StructuralError(f"索引不能为负: {int(idx[0])}")
            if np.any(np.diff(idx) <= 0):
                raise StructuralError("索引必须严格递增且不重复")
            if not np.all(np.isfinite(val)):
                raise StructuralError("特征值必须是有限实数")
            if np.any(val == 0.0):
                raise StructuralError("SparseVector 不存储显式 0")
        idx.setflags(write=False)
        val.setflags(write=False)
        self.indices = idx
        self.values = val

    @classmethod
    def from_mapping(cls, entries: Mapping[int, float]) -> "SparseVector":
        """从 {index: value} 构造，自动排序并丢弃值为 0 的项"""
        items = sorted((int(i), float(v)) for i, v in entries.items() if v != 0.0)
        return cls([i for i, _ in items], [v for _, v in items])

    @property
    def entries(self) -> List[Tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.nnz

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self) -> int:
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        return f"SparseVector({self.entries})"


# URI 中常见的分隔符保持原样；空白、制表符、换行和 % 一律编码
_KEY_SAFE = ":/#?&=@!$'()*+,;~"


def _encode_pair(first: str, second: str) -> str:
    return f"{quote(first, safe=_KEY_SAFE)} {quote(second, safe=_KEY_SAFE)}"


class FeatureIndex:
    """
    全局特征索引：user | item | PO | SP | PR 五个连续块。
    块内按 id/URI 字典序排列；未启用的特征集合不占索引。
    """

    def __init__(
        self,
        users: Iterable[str],
        items: Iterable[str],
        po_pairs: Iterable[Tuple[str, str]] = (),
        sp_pairs: Iterable[Tuple[str, str]] = (),
        features: Iterable[str] = (),
    ):
        self.features: FrozenSet[str] = frozenset(features)
        unknown = self.features - set(ALL_FEATURE_SETS)
        if unknown:
            raise StructuralError(f"未知的特征集合: {sorted(unknown)}")

        users = list(users)
        items = list(items)
        po_pairs = [tuple(pair) for pair in po_pairs]
        sp_pairs = [tuple(pair) for pair in sp_pairs]
        for name, keys in (("user", users), ("item", items), (PO, po_pairs), (SP, sp_pairs)):
            if len(set(keys)) != len(keys):
                raise StructuralError(f"{name} 块中存在重复的键")
        if po_pairs and PO not in self.features:
            raise StructuralError("未启用 PO 特征却提供了 PO 键")
        if sp_pairs and SP not in self.features:
            raise StructuralError("未启用 SP 特征却提供了 SP 键")

        offset = 0
        self.user_block: Dict[str, int] = {}
        for key in users:
            self.user_block[key] = offset
            offset += 1
        self.item_block: Dict[str, int] = {}
        for key in items:
            self.item_block[key] = offset
            offset += 1
        self.po_block: Dict[Tuple[str, str], int] = {}
        for key in po_pairs:
            self.po_block[key] = offset
            offset += 1
        self.sp_block: Dict[Tuple[str, str], int] = {}
        for key in sp_pairs:
            self.sp_block[key] = offset
            offset += 1
        self.pr_column: Optional[int] = None
        if PR in self.features:
            self.pr_column = offset
            offset += 1
        self.p = offset

    # ---------------- 查询 ----------------
    def user_index(self, user: str) -> int:
        try:
            return self.user_block[user]
        except KeyError:
            raise UnknownEntityError(f"未知用户: {user}") from None

    def item_index(self, item: str) -> int:
        try:
            return self.item_block[item]
        except KeyError:
            raise UnknownEntityError(f"未知物品: {item}") from None

    @property
    def users(self) -> List[str]:
        return list(self.user_block)

    @property
    def items(self) -> List[str]:
        return list(self.item_block)

    def block_ranges(self) -> Dict[str, Tuple[int, int]]:
        """各块的 [start, end) 区间，按块顺序排列，且首尾相接覆盖 [0, p)"""
        ranges = {}
        start = 0
        sizes = (
            ("user", len(self.user_block)),
            ("item", len(self.item_block)),
            (PO, len(self.po_block)),
            (SP, len(self.sp_block)),
            (PR, 1 if self.pr_column is not None else 0),
        )
        for name, size in sizes:
            ranges[name] = (start, start + size)
            start += size
        return ranges

    # ---------------- 序列化 ----------------
    def dumps(self) -> str:
        """每个特征一行: <index>\\t<block>\\t<key>；PO/SP 键两半分别做百分号编码后用空格连接"""
        lines = [f"# features={','.join(n for n in ALL_FEATURE_SETS if n in self.features)}"]
        for key, idx in self.user_block.items():
            lines.append(f"{idx}\tuser\t{key}")
        for key, idx in self.item_block.items():
            lines.append(f"{idx}\titem\t{key}")
        for (prop, obj), idx in self.po_block.items():
            lines.append(f"{idx}\t{PO}\t{_encode_pair(prop, obj)}")
        for (subj, prop), idx in self.sp_block.items():
            lines.append(f"{idx}\t{SP}\t{_encode_pair(subj, prop)}")
        if self.pr_column is not None:
            lines.append(f"{self.pr_column}\t{PR}\tpagerank")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FeatureIndex":
        features: FrozenSet[str] = frozenset()
        blocks: Dict[str, list] = {name: [] for name in BLOCK_ORDER}
        expected = 0
        last_block = 0
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("# features="):
                features = parse_feature_sets(line[len("# features="):])
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise StructuralError(f"特征索引第 {line_no} 行格式错误: {line!r}")
            idx_text, block, key = parts
            if not idx_text.isdigit() or int(idx_text) != expected:
                raise StructuralError(f"特征索引第 {line_no} 行的索引不连续: {idx_text}")
            if block not in blocks:
                raise StructuralError(f"特征索引第 {line_no} 行未知块: {block}")
            # 块必须按 user, item, PO, SP, PR 的顺序出现
            if BLOCK_ORDER.index(block) < last_block:
                raise StructuralError(f"特征索引第 {line_no} 行的块顺序不符合 user|item|po|sp|pr")
            last_block = BLOCK_ORDER.index(block)
            if block in (PO, SP, PR) and block not in features:
                raise StructuralError(f"特征索引第 {line_no} 行属于未启用的特征集合: {block}")
            if block in (PO, SP):
                pair = key.split(" ")
                if len(pair) != 2:
                    raise StructuralError(f"特征索引第 {line_no} 行的键不是 URI 对: {key!r}")
                blocks[block].append((unquote(pair[0]), unquote(pair[1])))
            else:
                blocks[block].append(key)
            expected += 1
        if PR in features and len(blocks[PR]) != 1:
            raise StructuralError("启用了 PR 特征但 PR 列缺失或重复")
        return cls(
            users=blocks["user"],
            items=blocks["item"],
            po_pairs=blocks[PO],
            sp_pairs=blocks[SP],
            features=features,
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path: str) -> "FeatureIndex":
        with open(path, "r", encoding="utf-8") as f:
            return cls.loads(f.read())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureIndex):
            return NotImplemented
        return self.dumps() == other.dumps()

    def __repr__(self) -> str:
        ranges = ", ".join(f"{name}={start}:{end}" for name, (start, end) in self.block_ranges().items())
        return f"FeatureIndex(p={self.p}, {ranges})"


class ItemKnowledge:
    """单个物品从 SPARQL Endpoint 取得的背景知识：PO 列表、SP 列表、原始 PageRank"""

    def __init__(
        self,
        item_id: str,
        po_list: Iterable[Tuple[str, str]] = (),
        sp_list: Iterable[Tuple[str, str]] = (),
        pagerank_raw: Optional[float] = None,
        item_uri: Optional[str] = None,
        pagerank_value: Optional[float] = None,
    ):
        self.item_id = item_id
        self.item_uri = item_uri
        # 去重并排序，保证无重复且输出确定
        self.po_list: Tuple[Tuple[str, str], ...] = tuple(sorted({tuple(p) for p in po_list}))
        self.sp_list: Tuple[Tuple[str, str], ...] = tuple(sorted({tuple(p) for p in sp_list}))
        if pagerank_raw is not None:
            pagerank_raw = float(pagerank_raw)
            if not math.isfinite(pagerank_raw) or pagerank_raw < 0:
                raise StructuralError(f"物品 {item_id} 的 PageRank 必须是非负有限实数: {pagerank_raw}")
        self.pagerank_raw = pagerank_raw
        # 按最大值归一化后的值，由 attach_normalized_pagerank 填入
        self.pagerank_value = pagerank_value

    def with_pagerank_value(self, value: Optional[float]) -> "ItemKnowledge":
        return ItemKnowledge(
            item_id=self.item_id,
            po_list=self.po_list,
            sp_list=self.sp_list,
            pagerank_raw=self.pagerank_raw,
            item_uri=self.item_uri,
            pagerank_value=value,
        )

    def to_dict(self) -> Dict:
        return {
            "item": self.item_id,
            "uri": self.item_uri,
            "po": [list(p) for p in self.po_list],
            "sp": [list(p) for p in self.sp_list],
            "pagerank": self.pagerank_raw,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ItemKnowledge":
        return cls(
            item_id=data["item"],
            po_list=[tuple(p) for p in data.get("po", [])],
            sp_list=[tuple(p) for p in data.get("sp", [])],
            pagerank_raw=data.get("pagerank"),
            item_uri=data.get("uri"),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ItemKnowledge):
            return NotImplemented
        return (
            self.to_dict() == other.to_dict()
            and self.pagerank_value == other.pagerank_value
        )

    def __repr__(self) -> str:
        return (
            f"ItemKnowledge(item={self.item_id}, po={len(self.po_list)}, "
            f"sp={len(self.sp_list)}, pagerank={self.pagerank_raw})"
        )


class InteractionDataset:
    """
    用户-物品交互数据集：正反馈 C_u+（评分 > 3）、负反馈 C_u-（评分 <= 3），
    每个 (user, item) 交互带唯一的分区标签 train | validation | test。
    """

    def __init__(
        self,
        positives: Mapping[str, Iterable[str]],
        negatives: Mapping[str, Iterable[str]],
        users: Optional[Iterable[str]] = None,
        items: Optional[Iterable[str]] = None,
        partitions: Optional[Mapping[Tuple[str, str], str]] = None,
    ):
        self.positives: Dict[str, FrozenSet[str]] = {
            u: frozenset(items_) for u, items_ in positives.items()
        }
        self.negatives: Dict[str, FrozenSet[str]] = {
            u: frozenset(items_) for u, items_ in negatives.items()
        }
        user_set = set(self.positives) | set(self.negatives)
        item_set = set()
        for group in (self.positives, self.negatives):
            for user_items in group.values():
                item_set.update(user_items)
        if users is not None:
            user_set.update(users)
        if items is not None:
            item_set.update(items)
        self.users: Tuple[str, ...] = tuple(sorted(user_set))
        self.items: Tuple[str, ...] = tuple(sorted(item_set))
        for u in self.users:
            self.positives.setdefault(u, frozenset())
            self.negatives.setdefault(u, frozenset())
            overlap = self.positives[u] & self.negatives[u]
            if overlap:
                raise StructuralError(f"用户 {u} 的正负反馈存在交集: {sorted(overlap)[:5]}")

        labels: Dict[Tuple[str, str], str] = {}
        partitions = partitions or {}
        for u in self.users:
            for i in self.positives[u] | self.negatives[u]:
                labels[(u, i)] = TRAIN
        for pair, label in partitions.items():
            if pair not in labels:
                raise StructuralError(f"分区标签指向不存在的交互: {pair}")
            if label not in PARTITIONS:
                raise StructuralError(f"未知分区标签: {label}")
            labels[pair] = label
        self.partitions = labels

    @property
    def n_interactions(self) -> int:
        return len(self.partitions)

    def label(self, user: str, item: str) -> str:
        try:
            return self.partitions[(user, item)]
        except KeyError:
            raise UnknownEntityError(f"不存在交互: ({user}, {item})") from None

    def interactions(self, user: str) -> List[str]:
        return sorted(self.positives[user] | self.negatives[user])

    def positives_in(self, partition: str) -> Dict[str, List[str]]:
        """{user: 指定分区中的正反馈物品（排序）}，不含空用户"""
        return self._select(self.positives, partition)

    def negatives_in(self, partition: str) -> Dict[str, List[str]]:
        return self._select(self.negatives, partition)

    def items_in(self, user: str, partition: str) -> List[str]:
        return sorted(
            i for i in self.positives[user] | self.negatives[user]
            if self.partitions[(user, i)] == partition
        )

    def _select(self, group: Mapping[str, FrozenSet[str]], partition: str) -> Dict[str, List[str]]:
        selected = {}
        for u in self.users:
            chosen = sorted(i for i in group[u] if self.partitions[(u, i)] == partition)
            if chosen:
                selected[u] = chosen
        return selected

    def with_partitions(self, partitions: Mapping[Tuple[str, str], str]) -> "InteractionDataset":
        """返回带新分区标签的副本（未给出的交互标为 train）"""
        return InteractionDataset(
            positives=self.positives,
            negatives=self.negatives,
            users=self.users,
            items=self.items,
            partitions=partitions,
        )

    def relabel(self, mapping: Mapping[str, str]) -> "InteractionDataset":
        """按 {旧标签: 新标签} 整体改写分区，例如把 validation 并回 train"""
        new_labels = {pair: mapping.get(label, label) for pair, label in self.partitions.items()}
        return self.with_partitions(new_labels)

    def __repr__(self) -> str:
        counts = {name: 0 for name in PARTITIONS}
        for label in self.partitions.values():
            counts[label] += 1
        return (
            f"InteractionDataset(users={len(self.users)}, items={len(self.items)}, "
            f"train={counts[TRAIN]}, validation={counts[VALIDATION]}, test={counts[TEST]})"
        )
