# config.py
# 实验配置：内置默认值 < 环境变量（可来自 .env） < TOML 配置文件 < 命令行参数
import copy
import hashlib
import json
import logging
import os
import tomllib
from typing import Any, Dict, List, Mapping, Optional

from lodfm.baselines import MfHyperparams
from lodfm.errors import ConfigError
from lodfm.evaluation import CANDIDATE_PROTOCOLS, DEFAULT_RESAMPLES
from lodfm.feature_structure import format_feature_sets, parse_feature_sets
from lodfm.fm_model import FmHyperparams
from lodfm.lod_information import DEFAULT_ENDPOINT, SparqlEndpointConfig

logger = logging.getLogger(__name__)

MODEL_NAMES = ("poprank", "knn", "bprmf", "lodfm")
ENV_ENDPOINT = "LODFM_SPARQL_ENDPOINT"
ENV_CACHE_DIR = "LODFM_CACHE_DIR"

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "ratings": "data/ratings.dat",
        "mapping": "data/mappings.tsv",
        "split_seed": 42,
        "test_fraction": 0.2,
    },
    "features": {
        "sets": "po,pr",
        "cache_dir": "cache",
    },
    "model": {
        "models": list(MODEL_NAMES),
        "knn_k": 80,
        "sweep_m": [10, 50, 100, 150, 200],
        "ablation_m": 10,
        "ablation_sets": ["po", "po+sp", "po+pr", "po+sp+pr"],
    },
    "training": {
        **FmHyperparams().to_dict(),
        "bprmf": MfHyperparams().to_dict(),
    },
    "evaluation": {
        "n_values": [1, 5, 10],
        "candidates": "all",
        "significance_baseline": "bprmf",
        "resamples": DEFAULT_RESAMPLES,
        "significance_seed": 0,
        "replication": False,
    },
    "sparql": {
        "endpoint": DEFAULT_ENDPOINT,
        "timeout": 30.0,
        "max_retries": 3,
        "retry_backoff": 1.0,
        "max_concurrent": 4,
    },
    "output": {
        "dir": "results",
    },
}


def _merge(base: Dict[str, Any], layer: Mapping[str, Any], where: str = "") -> None:
    for key, value in layer.items():
        if key not in base:
            raise ConfigError(f"未知的配置项: {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"配置项 {where}{key} 应为表")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def _env_layer() -> Dict[str, Dict[str, Any]]:
    layer: Dict[str, Dict[str, Any]] = {}
    if os.getenv(ENV_ENDPOINT):
        layer["sparql"] = {"endpoint": os.getenv(ENV_ENDPOINT)}
    if os.getenv(ENV_CACHE_DIR):
        layer["features"] = {"cache_dir": os.getenv(ENV_CACHE_DIR)}
    return layer


def _dotted(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """{"training.m": 50} -> {"training": {"m": 50}}；值为 None 的项视为未给出"""
    nested: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


class ExperimentConfig:
    """一次实验的全部设置；构造时即完成校验"""

    def __init__(self, values: Mapping[str, Any]):
        self.values = copy.deepcopy(dict(values))
        data, features, model = values["data"], values["features"], values["model"]
        training, evaluation, sparql = values["training"], values["evaluation"], values["sparql"]

        self.ratings_path: str = data["ratings"]
        self.mapping_path: str = data["mapping"]
        self.cache_dir: str = features["cache_dir"]
        self.output_dir: str = values["output"]["dir"]
        for name, path in (("ratings", self.ratings_path), ("mapping", self.mapping_path),
                           ("cache_dir", self.cache_dir), ("output", self.output_dir)):
            if not path:
                raise ConfigError(f"路径 {name} 不能为空")
        self.split_seed = int(data["split_seed"])
        self.test_fraction = float(data["test_fraction"])
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction 必须在 (0, 1) 内: {self.test_fraction}")

        self.feature_sets = parse_feature_sets(features["sets"])
        self.models: List[str] = list(model["models"])
        unknown = [m for m in self.models if m not in MODEL_NAMES]
        if unknown or not self.models:
            raise ConfigError(f"未知的模型 {unknown}，可选 {MODEL_NAMES}")
        self.knn_k = int(model["knn_k"])
        if self.knn_k < 1:
            raise ConfigError(f"knn_k 必须为正整数: {self.knn_k}")
        self.sweep_m: List[int] = [int(m) for m in model["sweep_m"]]
        self.ablation_m = int(model["ablation_m"])
        self.ablation_sets = [parse_feature_sets(s) for s in model["ablation_sets"]]

        fm_values = {k: v for k, v in training.items() if k != "bprmf"}
        try:
            self.fm = FmHyperparams(**fm_values)
            self.mf = MfHyperparams(**training["bprmf"])
        except TypeError as e:
            raise ConfigError(f"训练参数不合法: {e}") from None

        self.n_values: List[int] = [int(n) for n in evaluation["n_values"]]
        if not self.n_values or self.n_values != sorted(self.n_values) or self.n_values[0] < 1:
            raise ConfigError(f"n_values 必须非空、升序且 >= 1: {self.n_values}")
        self.candidates: str = evaluation["candidates"]
        if self.candidates not in CANDIDATE_PROTOCOLS:
            raise ConfigError(f"candidates 只能是 {CANDIDATE_PROTOCOLS}: {self.candidates}")
        self.significance_baseline: Optional[str] = evaluation["significance_baseline"] or None
        self.resamples = int(evaluation["resamples"])
        if self.resamples < 1000:
            raise ConfigError(f"resamples 至少为 1000: {self.resamples}")
        self.significance_seed = int(evaluation["significance_seed"])
        self.replication = bool(evaluation["replication"])

        self.sparql = SparqlEndpointConfig(
            endpoint=sparql["endpoint"],
            timeout=sparql["timeout"],
            max_retries=sparql["max_retries"],
            retry_backoff=sparql["retry_backoff"],
            max_concurrent=sparql["max_concurrent"],
            cache_dir=os.path.join(self.cache_dir, "sparql"),
        )

    @property
    def knowledge_path(self) -> str:
        return os.path.join(self.cache_dir, "knowledge.json")

    def to_dict(self) -> Dict[str, Any]:
        values = copy.deepcopy(self.values)
        values["features"]["sets"] = format_feature_sets(self.feature_sets)
        return values

    def fingerprint(self) -> str:
        """除输出目录外全部配置的 SHA-256；输出目录不影响结果"""
        values = self.to_dict()
        values.pop("output")
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode("utf-8")).hexdigest()

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        values = copy.deepcopy(self.values)
        _merge(values, _dotted(overrides))
        return ExperimentConfig(values)

    def __repr__(self) -> str:
        return (
            f"ExperimentConfig(models={self.models}, features={format_feature_sets(self.feature_sets)}, "
            f"m={self.fm.m}, split_seed={self.split_seed}, output={self.output_dir})"
        )


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    按优先级合并配置并校验。overrides 使用点号键，例如 {"training.m": 50, "features.sets": "po"}。
    """
    values = copy.deepcopy(DEFAULTS)
    _merge(values, _env_layer())
    if path:
        try:
            with open(path, "rb") as f:
                file_values = tomllib.load(f)
        except OSError as e:
            raise ConfigError(f"无法读取配置文件 {path}: {e}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"配置文件 {path} 不是合法 TOML: {e}") from None
        _merge(values, file_values)
        logger.debug(f"已读取配置文件: {path}")
    if overrides:
        _merge(values, _dotted(overrides))
    return ExperimentConfig(values)
