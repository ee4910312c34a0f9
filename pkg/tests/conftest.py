import json
from typing import Dict, List, Tuple

import numpy as np
import pytest

from lodfm.feature_structure import InteractionDataset, ItemKnowledge
from lodfm.ratings_data import split_train_test

GENRE_PROP = "http://dbpedia.org/ontology/genre"
RESOURCE = "http://dbpedia.org/resource/"


def planted_dataset(
    seed: int,
    n_users: int = 200,
    n_items: int = 100,
    n_genres: int = 10,
    liked_per_user: int = 8,
    disliked_per_user: int = 7,
) -> Tuple[InteractionDataset, Dict[str, ItemKnowledge]]:
    """
    物品 k 的类型为 k % n_genres（每个类型物品数相同，流行度不带信息）；
    每个用户喜欢两个类型，正反馈全部来自喜欢的类型，负反馈来自其余类型。
    类型通过 PO 特征 (dbo:genre, Genre_g) 提供给 FM。
    """
    rng = np.random.default_rng(seed)
    items = [f"i{k:03d}" for k in range(n_items)]
    knowledge = {
        item: ItemKnowledge(
            item_id=item,
            po_list=[(GENRE_PROP, f"{RESOURCE}Genre_{k % n_genres}")],
            item_uri=f"{RESOURCE}Item_{k}",
        )
        for k, item in enumerate(items)
    }
    positives: Dict[str, List[str]] = {}
    negatives: Dict[str, List[str]] = {}
    for u in range(n_users):
        user = f"u{u:03d}"
        liked = set(rng.choice(n_genres, size=2, replace=False).tolist())
        liked_items = [k for k in range(n_items) if k % n_genres in liked]
        other_items = [k for k in range(n_items) if k % n_genres not in liked]
        positives[user] = [items[k] for k in rng.choice(liked_items, size=liked_per_user, replace=False)]
        negatives[user] = [items[k] for k in rng.choice(other_items, size=disliked_per_user, replace=False)]
    dataset = InteractionDataset(positives, negatives, items=items)
    return split_train_test(dataset, seed), knowledge


def separable_dataset(n_users: int, n_items: int) -> Tuple[InteractionDataset, Dict[str, ItemKnowledge]]:
    """偶数号物品属于 Genre_good、奇数号属于 Genre_bad；所有用户只喜欢 good 物品，PO 特征可线性分开正负反馈"""
    items = [f"i{k:02d}" for k in range(n_items)]
    knowledge = {
        item: ItemKnowledge(
            item_id=item,
            po_list=[(GENRE_PROP, f"{RESOURCE}Genre_{'good' if k % 2 == 0 else 'bad'}")],
            item_uri=f"{RESOURCE}Item_{k}",
        )
        for k, item in enumerate(items)
    }
    positives: Dict[str, List[str]] = {}
    negatives: Dict[str, List[str]] = {}
    for u in range(n_users):
        positives[f"u{u:02d}"] = [items[k] for k in range(0, n_items, 2) if (k // 2 + u) % 3 != 0]
        negatives[f"u{u:02d}"] = [items[k] for k in range(1, n_items, 2) if (k // 2 + u) % 3 != 1]
    return InteractionDataset(positives, negatives, items=items), knowledge


@pytest.fixture
def planted():
    return planted_dataset(0)


@pytest.fixture
def tiny_dataset() -> InteractionDataset:
    # 3 个用户、6 个物品，每个用户都有正负反馈
    return InteractionDataset(
        positives={"u1": ["a", "b", "c"], "u2": ["c", "d"], "u3": ["a", "e", "f"]},
        negatives={"u1": ["d", "e"], "u2": ["a", "f"], "u3": ["b", "c"]},
    )


@pytest.fixture
def tiny_knowledge() -> Dict[str, ItemKnowledge]:
    po = {
        "a": [("p:genre", "o:drama"), ("p:director", "o:x")],
        "b": [("p:genre", "o:drama")],
        "c": [("p:genre", "o:comedy")],
        "d": [("p:genre", "o:comedy"), ("p:director", "o:y")],
        "e": [],
        "f": [("p:genre", "o:horror")],
    }
    sp = {"a": [("s:award", "p:won")], "c": [("s:award", "p:won"), ("s:list", "p:item")]}
    pagerank = {"a": 2.0, "b": 8.0, "c": 4.0, "d": None, "e": 1.0, "f": 0.0}
    return {
        item: ItemKnowledge(item_id=item, po_list=po[item], sp_list=sp.get(item, []), pagerank_raw=pagerank[item])
        for item in po
    }


def write_movielens(tmp_path, dataset: InteractionDataset, knowledge: Dict[str, ItemKnowledge]):
    """把合成数据写成评分文件、映射文件和背景知识文件，供端到端测试使用"""
    ratings = tmp_path / "ratings.dat"
    lines = []
    for user in dataset.users:
        for item in dataset.interactions(user):
            rating = 5 if item in dataset.positives[user] else 2
            lines.append(f"{user}::{item}::{rating}::978300760")
    ratings.write_text("\n".join(lines) + "\n", encoding="utf-8")

    mapping = tmp_path / "mappings.tsv"
    mapping.write_text(
        "".join(f"{item}\tTitle {item}\t{knowledge[item].item_uri}\n" for item in dataset.items),
        encoding="utf-8",
    )

    cache_dir = tmp_path / "cache"
    cache_dir.mkdir()
    (cache_dir / "knowledge.json").write_text(
        json.dumps({"sets": ["po", "pr", "sp"], "items": [knowledge[i].to_dict() for i in sorted(knowledge)]}),
        encoding="utf-8",
    )
    return ratings, mapping, cache_dir


def write_config(tmp_path, ratings, mapping, cache_dir, extra: str = "") -> str:
    config = tmp_path / "lodfm.toml"
    config.write_text(
        f"""
[data]
ratings = "{ratings.as_posix()}"
mapping = "{mapping.as_posix()}"
split_seed = 7

[features]
sets = "po"
cache_dir = "{cache_dir.as_posix()}"

[training]
m = 8
learning_rate = 0.1
l2_reg = 0.01
init_stddev = 0.1
max_epochs = 4

[training.bprmf]
m = 8
learning_rate = 0.1
l2_reg = 0.01
init_stddev = 0.1
epochs = 5

[evaluation]
resamples = 1000
{extra}
""",
        encoding="utf-8",
    )
    return str(config)
