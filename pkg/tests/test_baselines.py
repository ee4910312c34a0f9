import math

import numpy as np
import pytest

from conftest import separable_dataset
from lodfm.baselines import (
    BprMfRecommender,
    ItemKnnRecommender,
    MfHyperparams,
    PopRankRecommender,
    bprmf_train,
    build_item_similarity,
    knn_item_score,
    poprank_ranking,
    poprank_score,
)
from lodfm.bpr_training import LodFmRecommender
from lodfm.errors import ConfigError, DegenerateInputError
from lodfm.evaluation import evaluate_recommender
from lodfm.feature_builder import ExampleBuilder, build_feature_index
from lodfm.feature_structure import TEST, TRAIN, InteractionDataset
from lodfm.fm_model import FmHyperparams
from lodfm.ratings_data import split_train_test


def _cosine(dataset, a, b):
    liked = dataset.positives_in(TRAIN)
    col_a = {u for u, items in liked.items() if a in items}
    col_b = {u for u, items in liked.items() if b in items}
    if not col_a or not col_b:
        return 0.0
    return len(col_a & col_b) / math.sqrt(len(col_a) * len(col_b))


def test_poprank_counts_training_positives(tiny_dataset):
    split = tiny_dataset.with_partitions({("u3", "a"): TEST})
    scores = poprank_score(split)
    assert scores == {"a": 1.0, "b": 1.0, "c": 2.0, "d": 1.0, "e": 1.0, "f": 1.0}
    assert poprank_ranking(scores) == ["c", "a", "b", "d", "e", "f"]


def test_poprank_test_only_item_scores_zero():
    dataset = InteractionDataset({"u1": ["a", "z"], "u2": ["a"]}, {})
    split = dataset.with_partitions({("u1", "z"): TEST})
    recommender = PopRankRecommender().fit(split)
    assert list(recommender.score_items("u1", ["z", "a"])) == [0.0, 2.0]


def test_poprank_without_training_positives():
    dataset = InteractionDataset({}, {"u1": ["a"]})
    with pytest.raises(DegenerateInputError):
        poprank_score(dataset)


def test_knn_similarity_matches_brute_force(planted):
    dataset, _ = planted
    sim = build_item_similarity(dataset, k=80)
    items = dataset.items
    for a in items[:20]:
        for b in items[:20]:
            expected = 0.0 if a == b else _cosine(dataset, a, b)
            assert sim.sim(a, b) == pytest.approx(expected, abs=1e-12)


def test_knn_neighbors_are_top_k(planted):
    dataset, _ = planted
    sim = build_item_similarity(dataset, k=5)
    for item in dataset.items[:10]:
        brute = sorted(
            (_cosine(dataset, item, other) for other in dataset.items if other != item),
            reverse=True,
        )
        brute = [s for s in brute if s > 0][:5]
        got = sim.neighbors[item]
        assert [s for _, s in got] == pytest.approx(brute, abs=1e-12)
        for other, s in got:
            assert s == pytest.approx(_cosine(dataset, item, other), abs=1e-12)


def test_knn_neighbor_ties_break_by_item_id():
    dataset = InteractionDataset({"u1": ["a", "b", "c", "d"]}, {})
    sim = build_item_similarity(dataset, k=2)
    assert sim.neighbors["c"] == [("a", 1.0), ("b", 1.0)]
    assert sim.neighbors["a"] == [("b", 1.0), ("c", 1.0)]


def test_knn_score_matches_definition(planted):
    dataset, _ = planted
    sim = build_item_similarity(dataset, k=10)
    recommender = ItemKnnRecommender(k=10).fit(dataset)
    items = list(dataset.items)
    for user in dataset.users[:10]:
        scores = recommender.score_items(user, items)
        expected = [knn_item_score(dataset, sim, user, item) for item in items]
        assert np.allclose(scores, expected, atol=1e-12)


def test_knn_unknown_item_scores_zero(tiny_dataset):
    sim = build_item_similarity(tiny_dataset, k=3)
    assert knn_item_score(tiny_dataset, sim, "u1", "not-an-item") == 0.0
    with pytest.raises(ConfigError):
        build_item_similarity(tiny_dataset, k=0)


def test_bprmf_zero_learning_rate_keeps_initialization(tiny_dataset):
    hp = MfHyperparams(m=4, learning_rate=0.0, epochs=3, seed=2)
    model = bprmf_train(tiny_dataset, hp)
    rng = np.random.default_rng(2)
    P = rng.normal(0.0, hp.init_stddev, size=(len(tiny_dataset.users), 4))
    Q = rng.normal(0.0, hp.init_stddev, size=(len(tiny_dataset.items), 4))
    assert np.array_equal(model.P, P)
    assert np.array_equal(model.Q, Q)
    assert not model.bias.any()


def test_bprmf_is_deterministic(tiny_dataset):
    hp = MfHyperparams(m=4, epochs=5, seed=1)
    a = bprmf_train(tiny_dataset, hp)
    b = bprmf_train(tiny_dataset, hp)
    assert np.array_equal(a.P, b.P)
    assert np.array_equal(a.Q, b.Q)


def test_bprmf_learns_training_preferences(planted):
    dataset, _ = planted
    hp = MfHyperparams(m=8, learning_rate=0.1, l2_reg=0.01, init_stddev=0.1, epochs=30, seed=0)
    recommender = BprMfRecommender(hp).fit(dataset)
    positives = dataset.positives_in(TRAIN)
    wins = total = 0
    for user, liked in positives.items():
        scores = dict(zip(dataset.items, recommender.score_items(user, dataset.items)))
        others = [i for i in dataset.items if i not in liked]
        for item in liked:
            wins += sum(scores[item] > scores[o] for o in others)
            total += len(others)
    assert wins / total > 0.75


def test_bprmf_score_is_dot_product_plus_bias(tiny_dataset):
    recommender = BprMfRecommender(MfHyperparams(m=3, epochs=2)).fit(tiny_dataset)
    model = recommender.model
    scores = recommender.score_items("u2", ["a", "e"])
    assert scores[0] == pytest.approx(model.score("u2", "a"))
    assert scores[1] == pytest.approx(model.score("u2", "e"))


def test_mf_hyperparams_validation():
    with pytest.raises(ConfigError):
        MfHyperparams(m=0)
    with pytest.raises(ConfigError):
        MfHyperparams(negatives="random")


def test_one_hot_fm_ranks_like_bprmf():
    # 只有 user/item one-hot 特征的 FM 等价于带物品偏置的 BPRMF
    for seed in range(3):
        dataset, knowledge = separable_dataset(30, 20)
        dataset = split_train_test(dataset, seed)
        index = build_feature_index(knowledge, dataset.users, dataset.items, set())
        fm_hp = FmHyperparams(m=8, learning_rate=0.05, l2_reg=0.0025, init_stddev=0.01, max_epochs=30, seed=seed)
        mf_hp = MfHyperparams(
            m=8, learning_rate=0.05, l2_reg=0.0025, bias_reg=0.0025, init_stddev=0.01, epochs=30, seed=seed,
            negatives="explicit",
        )
        recommenders = {
            "fm": LodFmRecommender(ExampleBuilder(index, knowledge), fm_hp, lambda model, epoch: 1.0 / epoch),
            "bprmf": BprMfRecommender(mf_hp),
        }
        ndcg = {}
        for name, recommender in recommenders.items():
            recommender.fit(dataset)
            ndcg[name] = evaluate_recommender(recommender, dataset, n_values=[5]).means["nDCG@5"]
        assert abs(ndcg["fm"] - ndcg["bprmf"]) <= 0.05
