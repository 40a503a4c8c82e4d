"""Group construction for the five ordering variants."""

import pytest

from groupqpp.data import parse_run
from groupqpp.errors import InputError
from groupqpp.grouping import (
    Group,
    GroupingStrategy,
    build_groups,
    pad_group,
    serialize_groups,
)


def run_grid(n_queries, n_docs):
    lines = [
        f"q{qi} Q0 d{qi}_{di} {di + 1} {float(n_docs - di)} t"
        for qi in range(n_queries)
        for di in range(n_docs)
    ]
    return parse_run("\n".join(lines) + "\n")


def valid_pairs(group):
    return [
        item for item, ok in zip(group.items, group.mask) if ok
    ]


class TestStrategyNames:
    def test_round_trip(self):
        for strat in GroupingStrategy:
            assert GroupingStrategy.from_name(strat.value) is strat

    def test_unknown_rejected(self):
        with pytest.raises(InputError):
            GroupingStrategy.from_name("alphabetical")


class TestGroupInvariants:
    def test_position_ids_must_be_permutation(self):
        with pytest.raises(InputError):
            Group(
                items=(("q1", "a"), ("q1", "b")),
                position_ids=(0, 0),
                mask=(True, True),
                kind=GroupingStrategy.RANDOM_ORDER,
            )

    def test_field_lengths_must_agree(self):
        with pytest.raises(InputError):
            Group(
                items=(("q1", "a"),),
                position_ids=(0, 1),
                mask=(True,),
                kind=GroupingStrategy.RANDOM_ORDER,
            )


class TestPadGroup:
    def _group(self, k):
        return Group(
            items=tuple(("q1", f"d{i}") for i in range(k)),
            position_ids=tuple(range(k)),
            mask=(True,) * k,
            kind=GroupingStrategy.DOC_ORDER,
        )

    def test_pads_with_masked_slots(self):
        g = pad_group(self._group(3), 4)
        assert g.mask == (True, True, True, False)
        assert len(g.items) == 4

    def test_full_group_unchanged(self):
        g = self._group(4)
        assert pad_group(g, 4) == g

    def test_empty_group_rejected(self):
        with pytest.raises(InputError):
            pad_group(self._group(0), 4)

    def test_oversized_group_rejected(self):
        with pytest.raises(InputError):
            pad_group(self._group(5), 4)


class TestDocOrder:
    def test_single_query_single_group(self):
        run = run_grid(1, 4)
        groups = build_groups(
            GroupingStrategy.DOC_ORDER, run, depth=4, n=4, seed=0
        )
        assert len(groups) == 1
        assert groups[0].position_ids == (0, 1, 2, 3)
        assert [d for _, d in valid_pairs(groups[0])] == [
            "d0_0", "d0_1", "d0_2", "d0_3",
        ]

    def test_position_ids_wrap_by_rank(self):
        run = run_grid(1, 6)
        groups = build_groups(
            GroupingStrategy.DOC_ORDER, run, depth=6, n=4, seed=0
        )
        # second chunk holds ranks 5,6 with ids (4 mod 4, 5 mod 4) = 0,1
        assert groups[1].position_ids[:2] == (0, 1)

    def test_each_pair_exactly_once(self):
        run = run_grid(3, 5)
        groups = build_groups(
            GroupingStrategy.DOC_ORDER, run, depth=5, n=2, seed=0
        )
        pairs = [p for g in groups for p in valid_pairs(g)]
        assert len(pairs) == len(set(pairs)) == 15


class TestRandomOrder:
    def test_each_pair_exactly_once(self):
        run = run_grid(4, 3)
        groups = build_groups(
            GroupingStrategy.RANDOM_ORDER, run, depth=3, n=5, seed=1
        )
        pairs = [p for g in groups for p in valid_pairs(g)]
        assert len(pairs) == len(set(pairs)) == 12

    def test_slot_index_position_ids(self):
        run = run_grid(4, 3)
        groups = build_groups(
            GroupingStrategy.RANDOM_ORDER, run, depth=3, n=5, seed=1
        )
        full = [g for g in groups if all(g.mask)]
        assert all(g.position_ids == (0, 1, 2, 3, 4) for g in full)

    def test_group_size_one_is_pointwise(self):
        run = run_grid(2, 3)
        groups = build_groups(
            GroupingStrategy.RANDOM_ORDER, run, depth=3, n=1, seed=0
        )
        assert len(groups) == 6
        assert all(g.mask == (True,) for g in groups)


class TestQueryOrder:
    def test_position_ids_follow_initial_qpp(self):
        run = run_grid(3, 2)
        qpp = {"q0": 0.5, "q1": 0.9, "q2": 0.1}
        groups = build_groups(
            GroupingStrategy.QUERY_ORDER, run, depth=1, n=3, seed=0,
            initial_qpp=qpp,
        )
        (g,) = groups
        by_qid = {
            item[0]: pid
            for item, pid in zip(g.items, g.position_ids)
            if item
        }
        assert by_qid == {"q1": 0, "q0": 1, "q2": 2}

    def test_qpp_ties_broken_by_ascending_qid(self):
        run = run_grid(3, 1)
        qpp = {"q0": 0.5, "q1": 0.5, "q2": 0.5}
        groups = build_groups(
            GroupingStrategy.QUERY_ORDER, run, depth=1, n=3, seed=0,
            initial_qpp=qpp,
        )
        (g,) = groups
        by_qid = {
            item[0]: pid
            for item, pid in zip(g.items, g.position_ids)
            if item
        }
        assert by_qid == {"q0": 0, "q1": 1, "q2": 2}

    def test_missing_qpp_rejected(self):
        run = run_grid(2, 2)
        with pytest.raises(InputError):
            build_groups(
                GroupingStrategy.QUERY_ORDER, run, depth=2, n=2, seed=0,
                initial_qpp={"q0": 0.5},
            )

    def test_one_slot_per_query_per_rank_chunk(self):
        run = run_grid(5, 3)
        qpp = {f"q{i}": float(i) for i in range(5)}
        groups = build_groups(
            GroupingStrategy.QUERY_ORDER, run, depth=3, n=2, seed=4,
            initial_qpp=qpp,
        )
        pairs = [p for g in groups for p in valid_pairs(g)]
        assert len(pairs) == len(set(pairs)) == 15


class TestCompositeStrategies:
    def test_query_plus_doc_is_union_of_both_kinds(self):
        run = run_grid(4, 4)
        qpp = {f"q{i}": float(i) for i in range(4)}
        groups = build_groups(
            GroupingStrategy.QUERY_PLUS_DOC, run, depth=4, n=4, seed=2,
            initial_qpp=qpp,
        )
        kinds = {g.kind for g in groups}
        assert kinds == {
            GroupingStrategy.QUERY_ORDER,
            GroupingStrategy.DOC_ORDER,
        }

    def test_rqd_has_all_three_kinds(self):
        run = run_grid(4, 4)
        qpp = {f"q{i}": float(i) for i in range(4)}
        groups = build_groups(
            GroupingStrategy.RQD, run, depth=4, n=4, seed=2,
            initial_qpp=qpp,
        )
        kinds = {g.kind for g in groups}
        assert kinds == {
            GroupingStrategy.RANDOM_ORDER,
            GroupingStrategy.QUERY_ORDER,
            GroupingStrategy.DOC_ORDER,
        }


class TestDeterminismAndEpochs:
    def test_pure_function_of_inputs(self):
        run = run_grid(4, 4)
        a = build_groups(GroupingStrategy.RANDOM_ORDER, run, 4, 3, seed=7)
        b = build_groups(GroupingStrategy.RANDOM_ORDER, run, 4, 3, seed=7)
        assert a == b

    def test_epoch_reshuffles_group_order(self):
        run = run_grid(6, 4)
        a = build_groups(
            GroupingStrategy.RANDOM_ORDER, run, 4, 3, seed=7, epoch=0
        )
        b = build_groups(
            GroupingStrategy.RANDOM_ORDER, run, 4, 3, seed=7, epoch=1
        )
        assert a != b
        flat = lambda gs: sorted(p for g in gs for p in valid_pairs(g))
        assert flat(a) == flat(b)

    def test_seed_changes_assignment(self):
        run = run_grid(6, 4)
        a = build_groups(GroupingStrategy.RANDOM_ORDER, run, 4, 3, seed=1)
        b = build_groups(GroupingStrategy.RANDOM_ORDER, run, 4, 3, seed=2)
        assert a != b


class TestDepthShortfall:
    def test_short_lists_contribute_available_ranks(self, caplog):
        lines = [
            "q0 Q0 a 1 3.0 t",
            "q0 Q0 b 2 2.0 t",
            "q0 Q0 c 3 1.0 t",
            "q1 Q0 a 1 5.0 t",
        ]
        run = parse_run("\n".join(lines) + "\n")
        with caplog.at_level("WARNING"):
            groups = build_groups(
                GroupingStrategy.DOC_ORDER, run, depth=3, n=3, seed=0
            )
        pairs = [p for g in groups for p in valid_pairs(g)]
        assert len(pairs) == 4
        assert any("depth" in m for m in caplog.messages)


class TestSerializeGroups:
    def test_line_format(self):
        run = run_grid(1, 3)
        groups = build_groups(
            GroupingStrategy.DOC_ORDER, run, depth=3, n=4, seed=0
        )
        lines = serialize_groups(groups).splitlines()
        cols = lines[0].split()
        assert cols == ["0", "0", "q0", "d0_0", "0", "1", "doc"]
        padded = lines[3].split()
        assert padded[2:4] == ["-", "-"]
        assert padded[5] == "0"
