"""Group construction: fixed-size batches of (query, document) pairs with
position ids that encode one of five ordering schemes.

A group is the unit the predictor scores jointly; position ids carry the
ranking context (slot index, initial-QPP query order, document rank),
and padded slots are masked out of attention, loss, and outputs.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .data import RetrievalRun
from .errors import InputError

log = logging.getLogger(__name__)


class GroupingStrategy(enum.Enum):
    RANDOM_ORDER = "random"
    QUERY_ORDER = "query"
    DOC_ORDER = "doc"
    QUERY_PLUS_DOC = "query+doc"
    RQD = "rqd"

    @classmethod
    def from_name(cls, name: str) -> "GroupingStrategy":
        for member in cls:
            if member.value == name:
                return member
        raise InputError(
            f"unknown grouping strategy {name!r}; "
            f"known: {[m.value for m in cls]}"
        )


# base orderings mixed by the composite strategies
_KINDS = {
    GroupingStrategy.RANDOM_ORDER: (GroupingStrategy.RANDOM_ORDER,),
    GroupingStrategy.QUERY_ORDER: (GroupingStrategy.QUERY_ORDER,),
    GroupingStrategy.DOC_ORDER: (GroupingStrategy.DOC_ORDER,),
    GroupingStrategy.QUERY_PLUS_DOC: (
        GroupingStrategy.QUERY_ORDER,
        GroupingStrategy.DOC_ORDER,
    ),
    GroupingStrategy.RQD: (
        GroupingStrategy.RANDOM_ORDER,
        GroupingStrategy.QUERY_ORDER,
        GroupingStrategy.DOC_ORDER,
    ),
}

_STRATEGY_CODE = {s: i for i, s in enumerate(GroupingStrategy)}


@dataclass(frozen=True)
class Group:
    """n slots of (qid, docid) pairs; None marks a padded slot."""

    items: tuple
    position_ids: tuple[int, ...]
    mask: tuple[bool, ...]
    kind: GroupingStrategy

    def __post_init__(self):
        if not (
            len(self.items) == len(self.position_ids) == len(self.mask)
        ):
            raise InputError("group fields have mismatched lengths")
        valid_ids = [
            p for p, ok in zip(self.position_ids, self.mask) if ok
        ]
        if sorted(valid_ids) != list(range(len(valid_ids))):
            raise InputError(
                "valid position ids must form a permutation of "
                f"0..{len(valid_ids) - 1}, got {valid_ids}"
            )

    @property
    def n_valid(self) -> int:
        return sum(self.mask)


def pad_group(group: Group, n: int) -> Group:
    """Extend a group to n slots with masked placeholders."""
    size = len(group.items)
    if size == 0 or group.n_valid == 0:
        raise InputError("cannot pad an empty group")
    if size > n:
        raise InputError(f"group of {size} slots exceeds target size {n}")
    if size == n:
        return group
    # valid ids occupy 0..(valid-1); padding takes the next ids
    pad_ids = range(group.n_valid, group.n_valid + n - size)
    return Group(
        items=group.items + (None,) * (n - size),
        position_ids=group.position_ids + tuple(pad_ids),
        mask=group.mask + (False,) * (n - size),
        kind=group.kind,
    )


def _top_pairs(run: RetrievalRun, depth: int) -> dict[str, list[str]]:
    docs: dict[str, list[str]] = {}
    for qid in run.qids:
        entries = run.entries(qid)
        if len(entries) < depth:
            log.warning(
                "query %s has %d docs, below grouping depth %d",
                qid,
                len(entries),
                depth,
            )
        docs[qid] = [e.docid for e in entries[:depth]]
    return docs


def _random_groups(docs, n, rng) -> list[Group]:
    pairs = [(q, d) for q in sorted(docs) for d in docs[q]]
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    out = []
    for lo in range(0, len(shuffled), n):
        chunk = shuffled[lo : lo + n]
        out.append(
            Group(
                items=tuple(chunk),
                position_ids=tuple(range(len(chunk))),
                mask=(True,) * len(chunk),
                kind=GroupingStrategy.RANDOM_ORDER,
            )
        )
    return out


def _query_groups(docs, n, rng, initial_qpp) -> list[Group]:
    qids = sorted(docs)
    missing = [q for q in qids if q not in initial_qpp]
    if missing:
        raise InputError(
            f"initial QPP values missing for queries {missing[:5]}"
        )
    order = rng.permutation(len(qids))
    shuffled = [qids[i] for i in order]
    max_len = max((len(d) for d in docs.values()), default=0)
    out = []
    for rank in range(max_len):
        eligible = [q for q in shuffled if len(docs[q]) > rank]
        for lo in range(0, len(eligible), n):
            chunk = eligible[lo : lo + n]
            # position id = rank of the query under the initial QPP,
            # descending, ties by ascending qid
            by_qpp = sorted(chunk, key=lambda q: (-initial_qpp[q], q))
            pos_of = {q: i for i, q in enumerate(by_qpp)}
            out.append(
                Group(
                    items=tuple((q, docs[q][rank]) for q in chunk),
                    position_ids=tuple(pos_of[q] for q in chunk),
                    mask=(True,) * len(chunk),
                    kind=GroupingStrategy.QUERY_ORDER,
                )
            )
    return out


def _doc_groups(docs, n) -> list[Group]:
    out = []
    for qid in sorted(docs):
        doc_list = docs[qid]
        for lo in range(0, len(doc_list), n):
            chunk = doc_list[lo : lo + n]
            out.append(
                Group(
                    items=tuple((qid, d) for d in chunk),
                    # (rank - 1) mod n, with rank the 1-based list position
                    position_ids=tuple(
                        (lo + j) % n for j in range(len(chunk))
                    ),
                    mask=(True,) * len(chunk),
                    kind=GroupingStrategy.DOC_ORDER,
                )
            )
    return out


def build_groups(
    strategy: GroupingStrategy,
    run: RetrievalRun,
    depth: int,
    n: int,
    seed: int,
    initial_qpp: dict[str, float] | None = None,
    epoch: int = 0,
) -> list[Group]:
    """Construct one epoch's groups; a pure function of its arguments.

    The composite strategies (QueryPlusDoc, RQD) take the union of their
    base kinds' groups; the whole list is reshuffled every epoch.
    """
    if depth < 1:
        raise InputError(f"depth must be >= 1, got {depth}")
    if n < 1:
        raise InputError(f"group size must be >= 1, got {n}")
    if len(run) == 0:
        raise InputError("run has no queries to group")
    kinds = _KINDS[strategy]
    if GroupingStrategy.QUERY_ORDER in kinds and initial_qpp is None:
        raise InputError(
            f"strategy {strategy.value} requires initial QPP values"
        )
    rng = np.random.default_rng([seed, _STRATEGY_CODE[strategy], epoch])
    docs = _top_pairs(run, depth)
    groups: list[Group] = []
    for kind in kinds:
        if kind is GroupingStrategy.RANDOM_ORDER:
            groups.extend(_random_groups(docs, n, rng))
        elif kind is GroupingStrategy.QUERY_ORDER:
            groups.extend(_query_groups(docs, n, rng, initial_qpp))
        else:
            groups.extend(_doc_groups(docs, n))
    order = rng.permutation(len(groups))
    return [pad_group(groups[i], n) for i in order]


def serialize_groups(groups) -> str:
    """Debug dump: ``group_id slot qid docid position_id mask kind``."""
    lines = []
    for gid, group in enumerate(groups):
        for slot, (item, pos, ok) in enumerate(
            zip(group.items, group.position_ids, group.mask)
        ):
            qid, docid = item if item is not None else ("-", "-")
            lines.append(
                f"{gid} {slot} {qid} {docid} {pos} {int(ok)} {group.kind.value}"
            )
    return "\n".join(lines) + "\n"
