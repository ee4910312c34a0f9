# fm_model.py
# 二阶 Factorization Machine：参数存储、预测（线性时间形式 + 朴素双重求和）与解析梯度
import logging
from typing import Dict, Optional

import numpy as np
from scipy import sparse

from lodfm.errors import ConfigError, DimensionError, FingerprintMismatchError
from lodfm.feature_structure import FeatureIndex, SparseVector

logger = logging.getLogger(__name__)

PAIR_STRATEGIES = ("sampled", "full")
NEGATIVE_MODES = ("explicit", "unseen")


class FmHyperparams:
    """FM 与训练的超参数"""

    def __init__(
        self,
        m: int = 200,
        learning_rate: float = 0.05,
        l2_reg: float = 1e-4,
        init_stddev: float = 0.01,
        max_epochs: int = 100,
        seed: int = 0,
        pair_strategy: str = "sampled",
        negatives: str = "explicit",
        validation_fraction: float = 0.1,
    ):
        if m < 1:
            raise ConfigError(f"m 必须为正整数: {m}")
        if learning_rate < 0:
            raise ConfigError(f"learning_rate 不能为负: {learning_rate}")
        if l2_reg < 0:
            raise ConfigError(f"l2_reg 不能为负: {l2_reg}")
        if init_stddev <= 0:
            raise ConfigError(f"init_stddev 必须 > 0: {init_stddev}")
        if max_epochs < 1:
            raise ConfigError(f"max_epochs 必须为正整数: {max_epochs}")
        if pair_strategy not in PAIR_STRATEGIES:
            raise ConfigError(f"pair_strategy 只能是 {PAIR_STRATEGIES}: {pair_strategy}")
        if negatives not in NEGATIVE_MODES:
            raise ConfigError(f"negatives 只能是 {NEGATIVE_MODES}: {negatives}")
        if seed < 0:
            raise ConfigError(f"seed 不能为负: {seed}")
        if not 0 < validation_fraction < 1:
            raise ConfigError(f"validation_fraction 必须在 (0, 1) 内: {validation_fraction}")
        self.m = int(m)
        self.learning_rate = float(learning_rate)
        self.l2_reg = float(l2_reg)
        self.init_stddev = float(init_stddev)
        self.max_epochs = int(max_epochs)
        self.seed = int(seed)
        self.pair_strategy = pair_strategy
        self.negatives = negatives
        self.validation_fraction = float(validation_fraction)

    def replace(self, **changes) -> "FmHyperparams":
        values = self.to_dict()
        values.update(changes)
        return FmHyperparams(**values)

    def to_dict(self) -> Dict:
        return {
            "m": self.m,
            "learning_rate": self.learning_rate,
            "l2_reg": self.l2_reg,
            "init_stddev": self.init_stddev,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "pair_strategy": self.pair_strategy,
            "negatives": self.negatives,
            "validation_fraction": self.validation_fraction,
        }

    def __repr__(self) -> str:
        return f"FmHyperparams({self.to_dict()})"


class FmModel:
    """参数 w0（全局偏置）、w（p 维线性权重）、V（p x m 隐向量矩阵），全部为 float64"""

    def __init__(self, w0: float, w: np.ndarray, V: np.ndarray):
        w = np.asarray(w, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        if w.ndim != 1 or V.ndim != 2 or V.shape[0] != w.shape[0]:
            raise DimensionError(f"参数维度不一致: w{w.shape}, V{V.shape}")
        if not (np.isfinite(w0) and np.all(np.isfinite(w)) and np.all(np.isfinite(V))):
            raise DimensionError("模型参数必须全部为有限实数")
        self.w0 = float(w0)
        self.w = w
        self.V = V

    @property
    def p(self) -> int:
        return int(self.w.shape[0])

    @property
    def m(self) -> int:
        return int(self.V.shape[1])

    def copy(self) -> "FmModel":
        return FmModel(self.w0, self.w.copy(), self.V.copy())

    def __repr__(self) -> str:
        return f"FmModel(p={self.p}, m={self.m}, w0={self.w0:.6g})"


def init_model(p: int, hp: FmHyperparams) -> FmModel:
    """w0 = 0, w = 0, V ~ Normal(0, init_stddev^2)"""
    rng = np.random.default_rng(hp.seed)
    return FmModel(0.0, np.zeros(p), rng.normal(0.0, hp.init_stddev, size=(p, hp.m)))


def _check_dims(model: FmModel, x: SparseVector) -> None:
    if x.nnz and int(x.indices[-1]) >= model.p:
        raise DimensionError(f"特征索引 {int(x.indices[-1])} 超出模型维度 p={model.p}")


def predict(model: FmModel, x: SparseVector) -> float:
    """
    线性时间形式：
    w0 + Σ w_i x_i + ½ Σ_f [(Σ_i v_if x_i)² − Σ_i v_if² x_i²]，复杂度 O(nnz · m)
    """
    _check_dims(model, x)
    if not x.nnz:
        return model.w0
    idx, val = x.indices, x.values
    vx = model.V[idx] * val[:, None]
    s = vx.sum(axis=0)
    pairwise = 0.5 * float(np.sum(s * s - np.sum(vx * vx, axis=0)))
    return model.w0 + float(model.w[idx] @ val) + pairwise


def predict_naive(model: FmModel, x: SparseVector) -> float:
    """直接双重求和，O(nnz² · m)，仅作测试对照"""
    _check_dims(model, x)
    entries = x.entries
    total = model.w0
    for i, xi in entries:
        total += model.w[i] * xi
    for a in range(len(entries)):
        i, xi = entries[a]
        for b in range(a + 1, len(entries)):
            j, xj = entries[b]
            total += float(model.V[i] @ model.V[j]) * xi * xj
    return float(total)


class FmGradient:
    """ŷ 对参数的稀疏梯度：只包含 x 中非零特征对应的 w_i 与 v_i"""

    def __init__(self, indices: np.ndarray, w: np.ndarray, V: np.ndarray):
        self.w0 = 1.0
        self.indices = indices
        self.w = w
        self.V = V

    def __repr__(self) -> str:
        return f"FmGradient(nnz={len(self.indices)})"


def gradient(model: FmModel, x: SparseVector) -> FmGradient:
    """
    ∂ŷ/∂w0 = 1；∂ŷ/∂w_i = x_i；∂ŷ/∂v_if = x_i Σ_j v_jf x_j − v_if x_i²。
    x 中为 0 的特征梯度恒为 0，因此不出现在结果中。
    """
    _check_dims(model, x)
    idx, val = x.indices, x.values
    v_rows = model.V[idx]
    s = (v_rows * val[:, None]).sum(axis=0)
    grad_v = val[:, None] * s[None, :] - v_rows * (val * val)[:, None]
    return FmGradient(idx.copy(), val.copy(), grad_v)


def score_items(model: FmModel, user_index: int, item_matrix: sparse.csr_matrix) -> np.ndarray:
    """
    一个用户对多个物品的预测值。item_matrix 每行是样本中的物品部分（不含用户 one-hot），
    由于用户特征值为 1，ŷ = w0 + w_u + lin + <v_u, S> + ½ Σ_f (S² − Σ v² x²)，与 predict 代数上一致。
    """
    if item_matrix.shape[1] != model.p:
        raise DimensionError(f"物品特征矩阵列数 {item_matrix.shape[1]} 与 p={model.p} 不一致")
    if not 0 <= user_index < model.p:
        raise DimensionError(f"用户索引 {user_index} 超出范围")
    S = np.asarray(item_matrix @ model.V)
    lin = np.asarray(item_matrix @ model.w).ravel()
    squared = np.asarray(item_matrix.multiply(item_matrix) @ (model.V * model.V))
    pairwise = 0.5 * np.sum(S * S - squared, axis=1)
    return model.w0 + model.w[user_index] + lin + S @ model.V[user_index] + pairwise


def save_checkpoint(model: FmModel, path: str, index: Optional[FeatureIndex] = None) -> None:
    fingerprint = index.fingerprint() if index is not None else ""
    with open(path, "wb") as f:
        np.savez(
            f,
            p=np.array(model.p),
            m=np.array(model.m),
            w0=np.array(model.w0),
            w=model.w,
            V=model.V,
            fingerprint=np.array(fingerprint),
        )
    logger.info(f"模型已保存: {path}（p={model.p}, m={model.m}）")


def load_checkpoint(path: str, index: Optional[FeatureIndex] = None) -> FmModel:
    """加载模型；给出 index 时校验特征索引指纹是否一致"""
    with np.load(path, allow_pickle=False) as data:
        model = FmModel(float(data["w0"]), data["w"], data["V"])
        fingerprint = str(data["fingerprint"])
        if int(data["p"]) != model.p or int(data["m"]) != model.m:
            raise DimensionError(f"检查点头信息与参数形状不符: {path}")
    if index is not None:
        if fingerprint != index.fingerprint():
            raise FingerprintMismatchError(f"检查点 {path} 与当前特征索引不匹配")
        if index.p != model.p:
            raise DimensionError(f"检查点维度 p={model.p} 与特征索引 p={index.p} 不一致")
    return model
