import numpy as np
import pytest

from lodfm.errors import DegenerateInputError, StructuralError
from lodfm.feature_builder import (
    ExampleBuilder,
    assemble_example,
    attach_normalized_pagerank,
    build_feature_index,
)
from lodfm.feature_structure import PO, PR, SP, ItemKnowledge

USERS = ["u1", "u2", "u3"]
ITEMS = ["a", "b", "c", "d", "e", "f"]


def _block_sum(x, index, block):
    start, end = index.block_ranges()[block]
    return sum(v for i, v in x.entries if start <= i < end)


def test_build_feature_index_vocabulary(tiny_knowledge):
    index = build_feature_index(tiny_knowledge, USERS, ITEMS, {PO, SP, PR})
    assert list(index.po_block) == [
        ("p:director", "o:x"),
        ("p:director", "o:y"),
        ("p:genre", "o:comedy"),
        ("p:genre", "o:drama"),
        ("p:genre", "o:horror"),
    ]
    assert list(index.sp_block) == [("s:award", "p:won"), ("s:list", "p:item")]
    assert index.p == 3 + 6 + 5 + 2 + 1


def test_build_feature_index_requires_knowledge(tiny_knowledge):
    partial = {k: v for k, v in tiny_knowledge.items() if k != "c"}
    with pytest.raises(StructuralError):
        build_feature_index(partial, USERS, ITEMS, {PO})


def test_build_feature_index_rejects_duplicate_ids(tiny_knowledge):
    with pytest.raises(StructuralError):
        build_feature_index(tiny_knowledge, ["u1", "u1"], ITEMS, {PO})


def test_po_and_sp_values_sum_to_one(tiny_knowledge):
    knowledge = attach_normalized_pagerank(tiny_knowledge)
    index = build_feature_index(knowledge, USERS, ITEMS, {PO, SP, PR})
    for item in ITEMS:
        x = assemble_example("u2", item, index, knowledge[item])
        if knowledge[item].po_list:
            assert abs(_block_sum(x, index, PO) - 1.0) < 1e-12
        else:
            assert _block_sum(x, index, PO) == 0.0
        if knowledge[item].sp_list:
            assert abs(_block_sum(x, index, SP) - 1.0) < 1e-12


def test_two_po_item_gets_half_each(tiny_knowledge):
    index = build_feature_index(tiny_knowledge, USERS, ITEMS, {PO})
    x = assemble_example("u1", "a", index, tiny_knowledge["a"])
    assert x.entries == [
        (index.user_index("u1"), 1.0),
        (index.item_index("a"), 1.0),
        (index.po_block[("p:director", "o:x")], 0.5),
        (index.po_block[("p:genre", "o:drama")], 0.5),
    ]


def test_pagerank_normalized_by_max(tiny_knowledge):
    knowledge = attach_normalized_pagerank(tiny_knowledge)
    index = build_feature_index(knowledge, USERS, ITEMS, {PR})
    values = {}
    for item in ITEMS:
        x = dict(assemble_example("u1", item, index, knowledge[item]).entries)
        values[item] = x.get(index.pr_column, 0.0)
    assert values["b"] == 1.0
    assert values["a"] == 0.25
    assert values["c"] == 0.5
    # 缺失或为 0 的分数不产生条目
    assert values["d"] == 0.0
    assert values["f"] == 0.0


def test_pagerank_must_be_normalized_first(tiny_knowledge):
    index = build_feature_index(tiny_knowledge, USERS, ITEMS, {PR})
    with pytest.raises(StructuralError):
        assemble_example("u1", "a", index, tiny_knowledge["a"])


def test_all_absent_pagerank_is_degenerate():
    knowledge = {i: ItemKnowledge(i) for i in ITEMS}
    with pytest.raises(DegenerateInputError):
        attach_normalized_pagerank(knowledge)


def test_disabled_sets_contribute_nothing(tiny_knowledge):
    index = build_feature_index(tiny_knowledge, USERS, ITEMS, set())
    x = assemble_example("u3", "a", index, tiny_knowledge["a"])
    assert x.entries == [(index.user_index("u3"), 1.0), (index.item_index("a"), 1.0)]


def test_example_builder_matches_assemble_example(tiny_knowledge):
    knowledge = attach_normalized_pagerank(tiny_knowledge)
    index = build_feature_index(knowledge, USERS, ITEMS, {PO, SP, PR})
    builder = ExampleBuilder(index, tiny_knowledge)
    for user in USERS:
        for item in ITEMS:
            assert builder.build(user, item) == assemble_example(user, item, index, knowledge[item])


def test_item_matrix_rows_are_item_parts(tiny_knowledge):
    knowledge = attach_normalized_pagerank(tiny_knowledge)
    index = build_feature_index(knowledge, USERS, ITEMS, {PO, SP, PR})
    builder = ExampleBuilder(index, knowledge)
    matrix = builder.item_matrix(["c", "a"])
    assert matrix.shape == (2, index.p)
    for row, item in enumerate(["c", "a"]):
        dense = np.zeros(index.p)
        for i, v in builder.build("u1", item).entries:
            dense[i] = v
        dense[index.user_index("u1")] = 0.0
        assert np.array_equal(matrix[row].toarray().ravel(), dense)
