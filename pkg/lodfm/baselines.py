# baselines.py
# 三个对照推荐方法：PopRank（流行度）、kNN-item（物品余弦相似度）、BPRMF（BPR 矩阵分解）
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.special import expit

from lodfm.bpr_training import bpr_pair_loss, negative_pool, sample_pairs
from lodfm.errors import ConfigError, DegenerateInputError
from lodfm.feature_structure import TRAIN, InteractionDataset
from lodfm.fm_model import NEGATIVE_MODES, PAIR_STRATEGIES

logger = logging.getLogger(__name__)


class Recommender:
    """推荐器的统一接口：fit 之后对任意物品列表打分（分数越高越靠前）"""

    name = "base"

    def fit(self, dataset: InteractionDataset) -> "Recommender":
        raise NotImplementedError

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        raise NotImplementedError


# ---------------- PopRank ----------------
def poprank_score(train: InteractionDataset) -> Dict[str, float]:
    """每个物品在训练分区中的正反馈次数；只在测试集出现的物品为 0"""
    positives = train.positives_in(TRAIN)
    if not positives:
        raise DegenerateInputError("训练分区中没有正反馈")
    counts = {item: 0.0 for item in train.items}
    for items in positives.values():
        for item in items:
            counts[item] += 1.0
    return counts


def poprank_ranking(scores: Dict[str, float]) -> List[str]:
    """按分数降序，分数相同时按物品 id 升序"""
    return sorted(scores, key=lambda item: (-scores[item], item))


class PopRankRecommender(Recommender):
    name = "poprank"

    def __init__(self):
        self.scores: Dict[str, float] = {}

    def fit(self, dataset: InteractionDataset) -> "PopRankRecommender":
        self.scores = poprank_score(dataset)
        return self

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        # 与用户无关的排序
        return np.array([self.scores.get(i, 0.0) for i in items], dtype=np.float64)


# ---------------- kNN-item ----------------
class ItemSimilarityMatrix:
    """
    物品之间的余弦相似度（基于二值化的训练正反馈列），对角线不计入邻居。
    neighbors[item] 为按相似度降序（并列时按物品 id 升序）的前 k 个邻居。
    """

    def __init__(self, items: Sequence[str], similarity: sparse.csr_matrix, k: int):
        self.items = list(items)
        self.position = {item: pos for pos, item in enumerate(self.items)}
        self.similarity = similarity
        self.k = k
        self.neighbors: Dict[str, List[Tuple[str, float]]] = {}

        rows, cols, vals = [], [], []
        for pos, item in enumerate(self.items):
            start, end = similarity.indptr[pos], similarity.indptr[pos + 1]
            cand_cols = similarity.indices[start:end]
            cand_vals = similarity.data[start:end]
            keep = (cand_cols != pos) & (cand_vals > 0)
            cand_cols, cand_vals = cand_cols[keep], cand_vals[keep]
            # 物品列表已按 id 排序，列号升序即物品 id 升序
            order = np.lexsort((cand_cols, -cand_vals))[:k]
            self.neighbors[item] = [(self.items[int(c)], float(v)) for c, v in zip(cand_cols[order], cand_vals[order])]
            rows.extend([pos] * len(order))
            cols.extend(cand_cols[order].tolist())
            vals.extend(cand_vals[order].tolist())
        # 每行只保留该物品的 top-k 邻居
        self.truncated = sparse.csr_matrix(
            (np.array(vals, dtype=np.float64), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
            shape=(len(self.items), len(self.items)),
        )

    def sim(self, a: str, b: str) -> float:
        if a == b or a not in self.position or b not in self.position:
            return 0.0
        return float(self.similarity[self.position[a], self.position[b]])

    def __repr__(self) -> str:
        return f"ItemSimilarityMatrix(items={len(self.items)}, k={self.k}, nnz={self.truncated.nnz})"


def interaction_matrix(train: InteractionDataset, items: Sequence[str]) -> sparse.csr_matrix:
    """训练分区正反馈的二值矩阵（users x items）"""
    positives = train.positives_in(TRAIN)
    position = {item: pos for pos, item in enumerate(items)}
    user_pos = {user: pos for pos, user in enumerate(train.users)}
    rows, cols = [], []
    for user, liked in positives.items():
        for item in liked:
            rows.append(user_pos[user])
            cols.append(position[item])
    return sparse.csr_matrix(
        (np.ones(len(rows)), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
        shape=(len(train.users), len(items)),
    )


def build_item_similarity(train: InteractionDataset, k: int = 80) -> ItemSimilarityMatrix:
    if k < 1:
        raise ConfigError(f"k 必须为正整数: {k}")
    items = list(train.items)
    R = interaction_matrix(train, items).tocsc()
    co_counts = (R.T @ R).tocsr()
    norms = np.sqrt(np.asarray(R.multiply(R).sum(axis=0)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    cosine = sparse.diags(inv) @ co_counts @ sparse.diags(inv)
    cosine = cosine.tocsr()
    cosine.data = np.minimum(cosine.data, 1.0)
    cosine.setdiag(0.0)
    cosine.eliminate_zeros()
    cosine.sort_indices()
    logger.info(f"物品相似度矩阵构建完成: {len(items)} 个物品，非零 {cosine.nnz}")
    return ItemSimilarityMatrix(items, cosine, k)


def knn_item_score(train: InteractionDataset, sim: ItemSimilarityMatrix, user: str, item: str) -> float:
    """Σ_{j ∈ 用户的训练正反馈 ∩ item 的 top-k 邻居} sim(item, j)；未知物品得 0"""
    if item not in sim.position:
        return 0.0
    liked = set(train.positives_in(TRAIN).get(user, ()))
    return float(sum(s for neighbor, s in sim.neighbors[item] if neighbor in liked))


class ItemKnnRecommender(Recommender):
    name = "knn"

    def __init__(self, k: int = 80):
        self.k = k
        self.sim: Optional[ItemSimilarityMatrix] = None
        self._liked: Dict[str, List[str]] = {}

    def fit(self, dataset: InteractionDataset) -> "ItemKnnRecommender":
        self.sim = build_item_similarity(dataset, self.k)
        self._liked = dataset.positives_in(TRAIN)
        return self

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        if self.sim is None:
            raise DegenerateInputError("kNN 模型尚未训练")
        profile = np.zeros(len(self.sim.items))
        for item in self._liked.get(user, ()):
            profile[self.sim.position[item]] = 1.0
        all_scores = self.sim.truncated @ profile
        return np.array(
            [all_scores[self.sim.position[i]] if i in self.sim.position else 0.0 for i in items],
            dtype=np.float64,
        )


# ---------------- BPRMF ----------------
class MfHyperparams:
    def __init__(
        self,
        m: int = 200,
        learning_rate: float = 0.05,
        l2_reg: float = 0.0025,
        bias_reg: float = 0.0025,
        init_stddev: float = 0.01,
        epochs: int = 30,
        seed: int = 0,
        negatives: str = "unseen",
        pair_strategy: str = "sampled",
    ):
        if m < 1 or epochs < 1:
            raise ConfigError(f"m 与 epochs 必须为正整数: m={m}, epochs={epochs}")
        if seed < 0:
            raise ConfigError(f"seed 不能为负: {seed}")
        if learning_rate < 0 or l2_reg < 0 or bias_reg < 0 or init_stddev <= 0:
            raise ConfigError("BPRMF 超参数取值非法")
        if negatives not in NEGATIVE_MODES or pair_strategy not in PAIR_STRATEGIES:
            raise ConfigError(f"negatives/pair_strategy 取值非法: {negatives}/{pair_strategy}")
        self.m = int(m)
        self.learning_rate = float(learning_rate)
        self.l2_reg = float(l2_reg)
        self.bias_reg = float(bias_reg)
        self.init_stddev = float(init_stddev)
        self.epochs = int(epochs)
        self.seed = int(seed)
        self.negatives = negatives
        self.pair_strategy = pair_strategy

    def to_dict(self) -> Dict:
        return dict(vars(self))

    def __repr__(self) -> str:
        return f"MfHyperparams({self.to_dict()})"


class MfModel:
    """score(u, i) = <p_u, q_i> + b_i"""

    def __init__(self, users: Sequence[str], items: Sequence[str], P: np.ndarray, Q: np.ndarray, bias: np.ndarray):
        if P.shape[1] != Q.shape[1] or P.shape[0] != len(users) or Q.shape[0] != len(items) or bias.shape != (len(items),):
            raise ConfigError("MF 参数维度不一致")
        self.users = list(users)
        self.items = list(items)
        self.user_pos = {u: k for k, u in enumerate(self.users)}
        self.item_pos = {i: k for k, i in enumerate(self.items)}
        self.P = P
        self.Q = Q
        self.bias = bias

    @property
    def m(self) -> int:
        return int(self.P.shape[1])

    def score(self, user: str, item: str) -> float:
        u, i = self.user_pos[user], self.item_pos[item]
        return float(self.P[u] @ self.Q[i] + self.bias[i])

    def __repr__(self) -> str:
        return f"MfModel(users={len(self.users)}, items={len(self.items)}, m={self.m})"


def bprmf_train(train: InteractionDataset, hp: MfHyperparams) -> MfModel:
    """与 FM 相同的 BPR 损失与抽样方式训练用户/物品隐向量（含物品偏置）"""
    rng = np.random.default_rng(hp.seed)
    users, items = list(train.users), list(train.items)
    model = MfModel(
        users,
        items,
        rng.normal(0.0, hp.init_stddev, size=(len(users), hp.m)),
        rng.normal(0.0, hp.init_stddev, size=(len(items), hp.m)),
        np.zeros(len(items)),
    )
    positives = train.positives_in(TRAIN)
    negatives = negative_pool(train, TRAIN, hp.negatives)
    lr = hp.learning_rate
    for current in range(1, hp.epochs + 1):
        pairs = sample_pairs(positives, negatives, rng, hp.pair_strategy)
        if not pairs:
            raise DegenerateInputError("训练分区中没有同时拥有正负样本的用户")
        total = 0.0
        for user, pos, neg in pairs:
            u, i, j = model.user_pos[user], model.item_pos[pos], model.item_pos[neg]
            p_u = model.P[u].copy()
            q_i = model.Q[i].copy()
            q_j = model.Q[j].copy()
            x_uij = p_u @ (q_i - q_j) + model.bias[i] - model.bias[j]
            total += bpr_pair_loss(x_uij, 0.0)
            g = float(expit(-x_uij))
            model.P[u] = p_u + lr * (g * (q_i - q_j) - hp.l2_reg * p_u)
            model.Q[i] = q_i + lr * (g * p_u - hp.l2_reg * q_i)
            model.Q[j] = q_j + lr * (-g * p_u - hp.l2_reg * q_j)
            model.bias[i] = model.bias[i] + lr * (g - hp.bias_reg * model.bias[i])
            model.bias[j] = model.bias[j] + lr * (-g - hp.bias_reg * model.bias[j])
        logger.debug(f"BPRMF epoch {current}: loss={total / len(pairs):.6f}")
    logger.info(f"BPRMF 训练完成: m={hp.m}, epochs={hp.epochs}")
    return model


class BprMfRecommender(Recommender):
    name = "bprmf"

    def __init__(self, hp: Optional[MfHyperparams] = None):
        self.hp = hp or MfHyperparams()
        self.model: Optional[MfModel] = None

    def fit(self, dataset: InteractionDataset) -> "BprMfRecommender":
        self.model = bprmf_train(dataset, self.hp)
        return self

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        if self.model is None:
            raise DegenerateInputError("BPRMF 模型尚未训练")
        model = self.model
        rows = [model.item_pos[i] for i in items]
        return model.Q[rows] @ model.P[model.user_pos[user]] + model.bias[rows]
