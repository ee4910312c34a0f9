# ratings_data.py
# 读取 MovieLens 评分与物品 -> DBpedia URI 映射，二值化为正/负反馈，并按用户分层切分 80/20
import logging
import math
from typing import Dict, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

from lodfm.errors import DegenerateInputError, RatingsFormatError
from lodfm.feature_structure import TEST, TRAIN, InteractionDataset

logger = logging.getLogger(__name__)

POSITIVE_THRESHOLD = 3.0  # 评分严格大于 3 为正反馈
MIN_SPLIT_INTERACTIONS = 5
SPLIT_STRATEGY = "stratified-per-user"


class RatingRecord(NamedTuple):
    user: str
    item: str
    rating: float
    timestamp: int


def _parse_line(line: str, line_no: int) -> RatingRecord:
    fields = line.split("::") if "::" in line else line.split("\t")
    if len(fields) not in (3, 4):
        raise RatingsFormatError(f"第 {line_no} 行字段数应为 3 或 4，实际为 {len(fields)}: {line!r}", line_no)
    user, item = fields[0].strip(), fields[1].strip()
    if not user or not item:
        raise RatingsFormatError(f"第 {line_no} 行用户或物品 id 为空: {line!r}", line_no)
    try:
        rating = float(fields[2])
    except ValueError:
        raise RatingsFormatError(f"第 {line_no} 行评分不是数字: {fields[2]!r}", line_no) from None
    if not math.isfinite(rating):
        raise RatingsFormatError(f"第 {line_no} 行评分不是有限数: {fields[2]!r}", line_no)
    timestamp = 0
    if len(fields) == 4:
        try:
            timestamp = int(fields[3])
        except ValueError:
            raise RatingsFormatError(f"第 {line_no} 行时间戳不是整数: {fields[3]!r}", line_no) from None
    return RatingRecord(user, item, rating, timestamp)


def load_ratings(path: str) -> List[RatingRecord]:
    """
    解析 `user::item::rating::timestamp`（MovieLens 格式），也接受制表符分隔。
    空行忽略；格式错误的行抛出带行号的 RatingsFormatError。时间戳读入但不参与切分。
    """
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line:
                    continue
                records.append(_parse_line(line, line_no))
    except OSError as e:
        raise RatingsFormatError(f"无法读取评分文件 {path}: {e}", 0) from e
    logger.info(f"读取评分 {len(records)} 条: {path}")
    return records


def load_item_mapping(path: str) -> Dict[str, str]:
    """
    物品映射文件：制表符分隔，第一列为物品 id、最后一列为 DBpedia URI
    （公开的映射文件中间还有一列片名，同样接受）。
    """
    mapping: Dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for line_no, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) < 2 or not fields[0].strip() or not fields[-1].strip():
                    raise RatingsFormatError(f"映射文件第 {line_no} 行格式错误: {line!r}", line_no)
                item, uri = fields[0].strip(), fields[-1].strip()
                if item in mapping and mapping[item] != uri:
                    logger.warning(f"物品 {item} 在映射文件中出现多次，保留第 {line_no} 行")
                mapping[item] = uri
    except OSError as e:
        raise RatingsFormatError(f"无法读取映射文件 {path}: {e}", 0) from e
    logger.info(f"读取物品映射 {len(mapping)} 条: {path}")
    return mapping


class DatasetStats:
    """数据集统计：用户数、物品数、评分数、人均评分数、稀疏度、正反馈比例（百分比）"""

    def __init__(self, users: int, items: int, ratings: int, positives: int):
        self.users = users
        self.items = items
        self.ratings = ratings
        self.positives = positives

    @property
    def avg_ratings_per_user(self) -> float:
        return self.ratings / self.users if self.users else 0.0

    @property
    def sparsity(self) -> float:
        return 1.0 - self.ratings / (self.users * self.items)

    @property
    def positive_percentage(self) -> float:
        return 100.0 * self.positives / self.ratings

    def to_dict(self) -> Dict:
        return {
            "users": self.users,
            "items": self.items,
            "ratings": self.ratings,
            "avg_ratings_per_user": self.avg_ratings_per_user,
            "sparsity": self.sparsity,
            "positive_percentage": self.positive_percentage,
        }

    def format_table(self) -> str:
        rows = [
            ("Number of users", f"{self.users:,}"),
            ("Number of items", f"{self.items:,}"),
            ("Number of ratings", f"{self.ratings:,}"),
            ("Avg. # of ratings per user", f"{self.avg_ratings_per_user:.0f}"),
            ("Sparsity", f"{100 * self.sparsity:.2f}%"),
            ("Positive ratings", f"{self.positive_percentage:.0f}%"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)

    def __repr__(self) -> str:
        return (
            f"DatasetStats(users={self.users}, items={self.items}, ratings={self.ratings}, "
            f"sparsity={self.sparsity:.4f}, positive={self.positive_percentage:.1f}%)"
        )


def binarize_and_stats(
    records: Sequence[RatingRecord],
    mapping: Mapping[str, str],
) -> Tuple[InteractionDataset, DatasetStats]:
    """只保留有 URI 映射的物品；评分 > 3 记为正反馈，其余为负反馈。同一 (用户, 物品) 重复评分时保留最后一条"""
    latest: Dict[Tuple[str, str], float] = {}
    duplicates = 0
    for record in records:
        if record.item not in mapping:
            continue
        key = (record.user, record.item)
        if key in latest:
            duplicates += 1
        latest[key] = record.rating
    if not latest:
        raise DegenerateInputError("没有任何评分落在有 URI 映射的物品上")
    if duplicates:
        logger.warning(f"发现 {duplicates} 条重复评分，已保留每个 (用户, 物品) 的最后一条")

    positives: Dict[str, List[str]] = {}
    negatives: Dict[str, List[str]] = {}
    n_positive = 0
    for (user, item), rating in latest.items():
        if rating > POSITIVE_THRESHOLD:
            positives.setdefault(user, []).append(item)
            n_positive += 1
        else:
            negatives.setdefault(user, []).append(item)
    dataset = InteractionDataset(positives, negatives)
    stats = DatasetStats(len(dataset.users), len(dataset.items), len(latest), n_positive)
    logger.info(f"二值化完成: {stats}")
    return dataset, stats


def split_train_test(
    dataset: InteractionDataset,
    seed: int,
    test_fraction: float = 0.2,
    min_interactions: int = MIN_SPLIT_INTERACTIONS,
) -> InteractionDataset:
    """
    按用户分层的随机切分：每个用户的交互中 round(test_fraction · n) 个进入测试集。
    交互少于 min_interactions 的用户全部留在训练集。
    """
    if dataset.n_interactions == 0:
        raise DegenerateInputError("数据集为空，无法切分")
    rng = np.random.default_rng(seed)
    labels = {}
    kept_whole = 0
    for user in dataset.users:
        items = dataset.interactions(user)
        for item in items:
            labels[(user, item)] = TRAIN
        if len(items) < min_interactions:
            kept_whole += 1
            continue
        n_test = int(math.floor(test_fraction * len(items) + 0.5))
        for k in rng.permutation(len(items))[:n_test]:
            labels[(user, items[int(k)])] = TEST
    split = dataset.with_partitions(labels)
    logger.info(f"训练/测试切分完成（seed={seed}）: {split}；{kept_whole} 个用户交互过少，全部留在训练集")
    return split
