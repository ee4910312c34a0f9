# bpr_training.py
# BPR 成对损失、逐对 SGD 更新，以及"先验证早停、再全量重训"的四步训练流程
import json
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from lodfm.errors import DegenerateInputError, DimensionError
from lodfm.feature_builder import ExampleBuilder
from lodfm.feature_structure import TRAIN, VALIDATION, InteractionDataset, SparseVector
from lodfm.fm_model import FmHyperparams, FmModel, init_model, predict, score_items

logger = logging.getLogger(__name__)

Pair = Tuple[str, str, str]  # (user, 正反馈物品, 负反馈物品)


def bpr_pair_loss(y_pos: float, y_neg: float) -> float:
    """−log δ(y_pos − y_neg) = log(1 + e^{−(y_pos − y_neg)})，用 logaddexp 避免溢出"""
    return float(np.logaddexp(0.0, -(y_pos - y_neg)))


def sgd_pair_step(model: FmModel, x_pos: SparseVector, x_neg: SparseVector, hp: FmHyperparams) -> float:
    """
    对一个 (正, 负) 样本对做一次 SGD 更新（原地修改 model），返回更新前的损失。
    θ ← θ − lr · (g · (∂ŷ_pos/∂θ − ∂ŷ_neg/∂θ) + l2 · θ)，g = −(1 − δ(ŷ_pos − ŷ_neg))。
    只更新两个向量中出现过的特征；w0 在差值中抵消，且不参与 L2。
    """
    for x in (x_pos, x_neg):
        if x.nnz and int(x.indices[-1]) >= model.p:
            raise DimensionError(f"特征索引 {int(x.indices[-1])} 超出模型维度 p={model.p}")

    y_pos = predict(model, x_pos)
    y_neg = predict(model, x_neg)
    margin = y_pos - y_neg
    g = -float(expit(-margin))

    touched = np.union1d(x_pos.indices, x_neg.indices)
    xp = np.zeros(touched.size)
    xn = np.zeros(touched.size)
    xp[np.searchsorted(touched, x_pos.indices)] = x_pos.values
    xn[np.searchsorted(touched, x_neg.indices)] = x_neg.values

    w_t = model.w[touched]
    v_t = model.V[touched]
    s_pos = xp @ v_t
    s_neg = xn @ v_t
    d_w = xp - xn
    d_v = (xp[:, None] * s_pos[None, :] - v_t * (xp * xp)[:, None]) - (
        xn[:, None] * s_neg[None, :] - v_t * (xn * xn)[:, None]
    )

    lr = hp.learning_rate
    model.w[touched] = w_t - lr * (g * d_w + hp.l2_reg * w_t)
    model.V[touched] = v_t - lr * (g * d_v + hp.l2_reg * v_t)
    return bpr_pair_loss(y_pos, y_neg)


# ---------------- 样本对 ----------------
def negative_pool(
    dataset: InteractionDataset,
    partition: str,
    mode: str,
    also_liked: Sequence[str] = (),
) -> Dict[str, List[str]]:
    """
    负样本来源：explicit 为用户在该分区中的显式负反馈（评分 <= 3）；
    unseen 为用户在该分区及 also_liked 各分区中都没有正反馈的所有物品（BPRMF 的传统做法）。
    """
    if mode == "explicit":
        return dataset.negatives_in(partition)
    positives = [dataset.positives_in(p) for p in (partition, *also_liked)]
    catalog = list(dataset.items)
    pool = {}
    for user in dataset.users:
        liked = {item for part in positives for item in part.get(user, ())}
        unseen = [i for i in catalog if i not in liked]
        if unseen:
            pool[user] = unseen
    return pool


def sample_pairs(
    positives: Mapping[str, Sequence[str]],
    negatives: Mapping[str, Sequence[str]],
    rng: np.random.Generator,
    strategy: str = "sampled",
) -> List[Pair]:
    """
    sampled: 每个 (用户, 正反馈物品) 均匀抽一个负样本；full: 完整的 C_u+ × C_u−。
    没有负样本的用户直接跳过；结果顺序随机打乱（由 rng 决定）。
    """
    base = [(u, i) for u in sorted(positives) if negatives.get(u) for i in positives[u]]
    if strategy == "full":
        triples = [(u, i, j) for u, i in base for j in negatives[u]]
        return [triples[k] for k in rng.permutation(len(triples))]
    pairs = []
    for k in rng.permutation(len(base)):
        user, item = base[k]
        negs = negatives[user]
        pairs.append((user, item, negs[int(rng.integers(len(negs)))]))
    return pairs


def split_inner_validation(dataset: InteractionDataset, fraction: float, seed: int) -> InteractionDataset:
    """
    每个用户随机取训练交互的 fraction（至少 1 个、至多留下 1 个训练交互）作为验证集；
    训练交互少于 2 个的用户不参与验证。
    """
    rng = np.random.default_rng(seed)
    labels = dict(dataset.partitions)
    for user in dataset.users:
        items = dataset.items_in(user, TRAIN)
        if len(items) < 2:
            continue
        n_val = min(max(1, int(round(fraction * len(items)))), len(items) - 1)
        for k in rng.choice(len(items), size=n_val, replace=False):
            labels[(user, items[int(k)])] = VALIDATION
    return dataset.with_partitions(labels)


def validation_pairs(dataset: InteractionDataset, hp: FmHyperparams, rng: np.random.Generator) -> List[Pair]:
    """验证集样本对只抽一次；负样本优先取验证集内的，缺失时退回训练集的负样本池"""
    val_pos = dataset.positives_in(VALIDATION)
    # unseen 模式下用户在训练集中喜欢的物品不能作为验证负样本
    val_neg = negative_pool(dataset, VALIDATION, hp.negatives, also_liked=(TRAIN,))
    train_neg = negative_pool(dataset, TRAIN, hp.negatives)
    pairs = []
    for user in sorted(val_pos):
        negs = val_neg.get(user) or train_neg.get(user)
        if not negs:
            continue
        for item in val_pos[user]:
            pairs.append((user, item, negs[int(rng.integers(len(negs)))]))
    return pairs


def mean_pair_loss(model: FmModel, pairs: Sequence[Pair], builder: ExampleBuilder) -> float:
    if not pairs:
        raise DegenerateInputError("没有可用于计算损失的样本对")
    total = 0.0
    for user, pos, neg in pairs:
        total += bpr_pair_loss(predict(model, builder.build(user, pos)), predict(model, builder.build(user, neg)))
    return total / len(pairs)


def epoch(
    model: FmModel,
    dataset: InteractionDataset,
    builder: ExampleBuilder,
    hp: FmHyperparams,
    rng: np.random.Generator,
    partition: str = TRAIN,
) -> float:
    """一个 epoch：按打乱顺序逐对更新，返回访问过的样本对在更新前的平均损失"""
    pairs = sample_pairs(
        dataset.positives_in(partition),
        negative_pool(dataset, partition, hp.negatives),
        rng,
        hp.pair_strategy,
    )
    if not pairs:
        raise DegenerateInputError(f"{partition} 分区中没有同时拥有正负反馈的用户")
    total = 0.0
    for user, pos, neg in pairs:
        total += sgd_pair_step(model, builder.build(user, pos), builder.build(user, neg), hp)
    return total / len(pairs)


class TrainReport:
    def __init__(self):
        self.epochs_run = 0
        self.stopped_epoch: Optional[int] = None
        self.validation_losses: List[float] = []
        self.train_losses: List[float] = []
        self.retrain_epochs = 0
        self.retrain_losses: List[float] = []
        self.final_train_loss = float("nan")

    def to_dict(self) -> Dict:
        return {
            "epochs_run": self.epochs_run,
            "stopped_epoch": self.stopped_epoch,
            "validation_losses": self.validation_losses,
            "train_losses": self.train_losses,
            "retrain_epochs": self.retrain_epochs,
            "retrain_losses": self.retrain_losses,
            "final_train_loss": self.final_train_loss,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def __repr__(self) -> str:
        return (
            f"TrainReport(epochs_run={self.epochs_run}, stopped_epoch={self.stopped_epoch}, "
            f"retrain_epochs={self.retrain_epochs}, final_train_loss={self.final_train_loss:.6f})"
        )


def train_early_stopping(
    dataset: InteractionDataset,
    builder: ExampleBuilder,
    hp: FmHyperparams,
    validation_loss_fn: Optional[Callable[[FmModel, int], float]] = None,
) -> Tuple[FmModel, TrainReport]:
    """
    四步训练流程：
    1. 把训练分区再切成内部训练集与验证集；
    2. 每个 epoch 结束后计算验证集上的平均 BPR 损失；
    3. 验证损失第一次高于上一个 epoch 时停止，记住上一个 epoch 序号 E；
    4. 用同一个种子重新初始化，在完整训练分区上训练恰好 E 个 epoch。
    max_epochs 内没有出现上升时 E = max_epochs。
    validation_loss_fn(model, epoch) 可替换第 2 步的验证损失。
    """
    full = dataset.relabel({VALIDATION: TRAIN})
    inner = split_inner_validation(full, hp.validation_fraction, hp.seed)
    p = builder.index.p
    report = TrainReport()

    val_pairs: List[Pair] = []
    if validation_loss_fn is None:
        val_pairs = validation_pairs(inner, hp, np.random.default_rng([hp.seed, 2]))
        if not val_pairs:
            raise DegenerateInputError("内部验证集中没有可用的样本对")

    # 阶段一：内部训练集 + 验证集早停
    model = init_model(p, hp)
    rng = np.random.default_rng(hp.seed)
    for current in range(1, hp.max_epochs + 1):
        report.train_losses.append(epoch(model, inner, builder, hp, rng))
        if validation_loss_fn is not None:
            loss = float(validation_loss_fn(model, current))
        else:
            loss = mean_pair_loss(model, val_pairs, builder)
        report.validation_losses.append(loss)
        logger.debug(f"epoch {current}: train={report.train_losses[-1]:.6f} validation={loss:.6f}")
        if len(report.validation_losses) > 1 and loss > report.validation_losses[-2]:
            report.stopped_epoch = current - 1
            logger.info(f"验证损失在第 {current} 个 epoch 上升，记住 E={report.stopped_epoch}")
            break
    report.epochs_run = len(report.validation_losses)
    best = report.stopped_epoch if report.stopped_epoch is not None else hp.max_epochs

    # 阶段二：同一种子重新初始化，在完整训练分区上训练 E 个 epoch
    model = init_model(p, hp)
    rng = np.random.default_rng(hp.seed)
    for _ in range(best):
        report.retrain_losses.append(epoch(model, full, builder, hp, rng))
    report.retrain_epochs = best
    report.final_train_loss = report.retrain_losses[-1]
    logger.info(f"重训完成: {best} 个 epoch，最终训练损失 {report.final_train_loss:.6f}")
    return model, report


class LodFmRecommender:
    """以 LOD 特征训练的 FM 推荐器（CLI 中的 lodfm 模型）"""

    name = "lodfm"

    def __init__(
        self,
        builder: ExampleBuilder,
        hp: FmHyperparams,
        validation_loss_fn: Optional[Callable[[FmModel, int], float]] = None,
    ):
        self.builder = builder
        self.hp = hp
        self.validation_loss_fn = validation_loss_fn
        self.model: Optional[FmModel] = None
        self.report: Optional[TrainReport] = None
        self._item_matrix = None

    def fit(self, dataset: InteractionDataset) -> "LodFmRecommender":
        self.model, self.report = train_early_stopping(dataset, self.builder, self.hp, self.validation_loss_fn)
        return self

    def use_model(self, model: FmModel) -> "LodFmRecommender":
        """直接使用已训练（如从检查点加载）的模型"""
        if model.p != self.builder.index.p:
            raise DimensionError(f"模型维度 p={model.p} 与特征索引 p={self.builder.index.p} 不一致")
        self.model = model
        return self

    def score_items(self, user: str, items: Sequence[str]) -> np.ndarray:
        if self.model is None:
            raise DegenerateInputError("模型尚未训练")
        index = self.builder.index
        if self._item_matrix is None:
            self._item_matrix = self.builder.item_matrix(index.items)
        offset = len(index.user_block)
        rows = [index.item_index(i) - offset for i in items]
        return score_items(self.model, index.user_index(user), self._item_matrix[rows])
