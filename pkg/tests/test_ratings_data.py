import os

import pytest

from lodfm.errors import DegenerateInputError, RatingsFormatError
from lodfm.feature_structure import TEST, TRAIN, InteractionDataset
from lodfm.ratings_data import (
    DatasetStats,
    RatingRecord,
    binarize_and_stats,
    load_item_mapping,
    load_ratings,
    split_train_test,
)


def test_load_ratings_movielens_and_tab_formats(tmp_path):
    path = tmp_path / "ratings.dat"
    path.write_text("1::1193::5::978300760\n\n1\t661\t3\n2::1193::4\n", encoding="utf-8")
    records = load_ratings(str(path))
    assert records == [
        RatingRecord("1", "1193", 5.0, 978300760),
        RatingRecord("1", "661", 3.0, 0),
        RatingRecord("2", "1193", 4.0, 0),
    ]


def test_load_ratings_reports_line_number(tmp_path):
    path = tmp_path / "ratings.dat"
    path.write_text("1::2::5::0\n1::2::abc::0\n", encoding="utf-8")
    with pytest.raises(RatingsFormatError) as e:
        load_ratings(str(path))
    assert e.value.line_no == 2

    path.write_text("1::2\n", encoding="utf-8")
    with pytest.raises(RatingsFormatError) as e:
        load_ratings(str(path))
    assert e.value.line_no == 1


def test_load_ratings_empty_and_missing(tmp_path):
    path = tmp_path / "empty.dat"
    path.write_text("", encoding="utf-8")
    assert load_ratings(str(path)) == []
    with pytest.raises(RatingsFormatError):
        load_ratings(str(tmp_path / "missing.dat"))


def test_load_item_mapping(tmp_path):
    path = tmp_path / "mappings.tsv"
    path.write_text(
        "# id\ttitle\turi\n"
        "1\tToy Story\thttp://dbpedia.org/resource/Toy_Story\n"
        "\n"
        "2\thttp://dbpedia.org/resource/Jumanji\n",
        encoding="utf-8",
    )
    assert load_item_mapping(str(path)) == {
        "1": "http://dbpedia.org/resource/Toy_Story",
        "2": "http://dbpedia.org/resource/Jumanji",
    }
    path.write_text("only-one-column\n", encoding="utf-8")
    with pytest.raises(RatingsFormatError):
        load_item_mapping(str(path))


def test_binarize_threshold_and_mapping_filter():
    records = [
        RatingRecord("u1", "a", 4.0, 0),
        RatingRecord("u1", "b", 3.0, 0),
        RatingRecord("u1", "c", 5.0, 0),
        RatingRecord("u2", "a", 1.0, 0),
        RatingRecord("u2", "z", 5.0, 0),
    ]
    dataset, stats = binarize_and_stats(records, {"a": "A", "b": "B", "c": "C"})
    assert dataset.positives["u1"] == {"a", "c"}
    # 评分恰好为 3 记为负反馈
    assert dataset.negatives["u1"] == {"b"}
    assert dataset.negatives["u2"] == {"a"}
    assert "z" not in dataset.items
    assert (stats.users, stats.items, stats.ratings, stats.positives) == (2, 3, 4, 2)


def test_binarize_keeps_last_duplicate():
    records = [RatingRecord("u1", "a", 5.0, 0), RatingRecord("u1", "a", 2.0, 1)]
    dataset, stats = binarize_and_stats(records, {"a": "A"})
    assert dataset.negatives["u1"] == {"a"}
    assert stats.ratings == 1


def test_binarize_without_mapped_items():
    with pytest.raises(DegenerateInputError):
        binarize_and_stats([RatingRecord("u1", "a", 5.0, 0)], {"b": "B"})


def test_stats_identities():
    stats = DatasetStats(users=3997, items=3082, ratings=695842, positives=389671)
    assert abs(stats.avg_ratings_per_user - 695842 / 3997) < 1e-10
    assert abs(stats.sparsity - (1 - 695842 / (3997 * 3082))) < 1e-10
    assert abs(stats.positive_percentage - 100 * 389671 / 695842) < 1e-10
    table = stats.format_table()
    assert "Number of users" in table
    assert "94.35%" in table
    assert "56%" in table


def _dataset(n_users, per_user):
    positives = {f"u{u}": [f"i{k}" for k in range(per_user) if k % 2 == 0] for u in range(n_users)}
    negatives = {f"u{u}": [f"i{k}" for k in range(per_user) if k % 2 == 1] for u in range(n_users)}
    return InteractionDataset(positives, negatives)


def test_split_proportions():
    split = split_train_test(_dataset(1, 100), seed=1)
    assert len(split.items_in("u0", TEST)) == 20
    assert len(split.items_in("u0", TRAIN)) == 80

    split = split_train_test(_dataset(4, 7), seed=1)
    for user in split.users:
        # floor(0.2 * 7 + 0.5) = 1
        assert len(split.items_in(user, TEST)) == 1


def test_split_is_deterministic_and_disjoint():
    dataset = _dataset(20, 12)
    a = split_train_test(dataset, seed=9)
    b = split_train_test(dataset, seed=9)
    assert a.partitions == b.partitions
    assert split_train_test(dataset, seed=10).partitions != a.partitions
    for user in a.users:
        train = set(a.items_in(user, TRAIN))
        test = set(a.items_in(user, TEST))
        assert not train & test
        assert train | test == set(dataset.interactions(user))


def test_split_keeps_small_users_in_train():
    dataset = InteractionDataset({"small": ["a", "b"], "big": ["a", "b", "c", "d", "e"]}, {"small": ["c", "d"]})
    split = split_train_test(dataset, seed=0)
    assert split.items_in("small", TEST) == []
    assert len(split.items_in("big", TEST)) == 1


def test_split_empty_dataset():
    with pytest.raises(DegenerateInputError):
        split_train_test(InteractionDataset({}, {}), seed=0)


@pytest.mark.skipif(
    not (os.getenv("LODFM_ML1M_RATINGS") and os.getenv("LODFM_ML1M_MAPPING")),
    reason="MovieLens-1M 评分与映射文件未配置",
)
def test_movielens_1m_statistics():
    records = load_ratings(os.environ["LODFM_ML1M_RATINGS"])
    mapping = load_item_mapping(os.environ["LODFM_ML1M_MAPPING"])
    _, stats = binarize_and_stats(records, mapping)
    assert stats.users == 3997
    assert stats.items == 3082
    assert stats.ratings == 695842
    assert abs(100 * stats.sparsity - 94.35) <= 0.01
    assert abs(stats.positive_percentage - 56) <= 0.5
