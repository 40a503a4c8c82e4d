"""Effectiveness labels, rank correlations, splits, and the paired t-test.

Conventions fixed here: P@k divides by k even for short lists; AP counts
every judged-relevant document in its denominator; Kendall is the tie-aware
tau-b; the t-test p-value comes from the exact Student-t tail via the
regularized incomplete beta function.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import (
    DegenerateVarianceError,
    InputError,
    NoRelevantJudgmentsError,
    ParseError,
)

LABEL_AP_1000 = "AP@1000"


def label_kind_p_at_k(k: int) -> str:
    return f"P@{k}"


@dataclass(frozen=True)
class QueryLabel:
    """Ground-truth effectiveness of one query's ranking, in [0, 1]."""

    qid: str
    value: float
    kind: str

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise InputError(
                f"label for {self.qid!r} out of [0,1]: {self.value}"
            )


def precision_at_k(ranked_docids, relevant_docids, k: int) -> float:
    """Fraction of the top k that is relevant; denominator is always k."""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    relevant = set(relevant_docids)
    hits = sum(1 for d in list(ranked_docids)[:k] if d in relevant)
    return hits / k


def average_precision(
    ranked_docids, relevant_docids, cutoff: int = 1000
) -> float:
    """AP over the top ``cutoff`` positions.

    The denominator counts every judged-relevant document, retrieved or
    not.  A query with no relevant documents has no defined AP; callers
    drop such queries from correlations.
    """
    if cutoff < 1:
        raise InputError(f"cutoff must be >= 1, got {cutoff}")
    relevant = set(relevant_docids)
    n_rel = len(relevant)
    if n_rel == 0:
        raise NoRelevantJudgmentsError(
            "query has no judged-relevant documents; AP undefined"
        )
    total = 0.0
    hits = 0
    for i, docid in enumerate(list(ranked_docids)[:cutoff], start=1):
        if docid in relevant:
            hits += 1
            total += hits / i
    return total / n_rel


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    return arr


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.shape != yv.shape:
        raise InputError(
            f"length mismatch: {xv.shape[0]} vs {yv.shape[0]}"
        )
    if xv.shape[0] < 2:
        raise InputError("need at least 2 observations")
    return xv, yv


def pearson(x, y) -> float:
    xv, yv = _check_pair(x, y)
    dx = xv - xv.mean()
    dy = yv - yv.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVarianceError(
            "pearson undefined for a constant input vector"
        )
    return float((dx @ dy) / math.sqrt(sxx * syy))


def kendall_tau_b(x, y) -> float:
    """Tie-aware Kendall correlation (C - D) / sqrt((P - Tx)(P - Ty))."""
    xv, yv = _check_pair(x, y)
    sign_x = np.sign(xv[:, None] - xv[None, :])
    sign_y = np.sign(yv[:, None] - yv[None, :])
    iu = np.triu_indices(xv.shape[0], k=1)
    # over pairs i<j: numerator = C - D, each factor = P - tied pairs
    num = float(np.sum(sign_x[iu] * sign_y[iu]))
    untied_x = float(np.sum(sign_x[iu] != 0))
    untied_y = float(np.sum(sign_y[iu] != 0))
    if untied_x == 0.0 or untied_y == 0.0:
        raise DegenerateVarianceError(
            "kendall tau-b undefined when all values tie in one vector"
        )
    return num / math.sqrt(untied_x * untied_y)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-tailed paired t-test; returns (t, p) with n-1 degrees of freedom."""
    av, bv = _check_pair(a, b)
    d = av - bv
    n = d.shape[0]
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        raise DegenerateVarianceError(
            "all paired differences identical and nonzero"
        )
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, p


@dataclass(frozen=True)
class SplitPlan:
    """Repeated balanced bipartitions of a query set."""

    seed: int
    splits: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]

    def __post_init__(self):
        for fold1, fold2 in self.splits:
            if set(fold1) & set(fold2):
                raise InputError("split folds overlap")


def make_splits(qids, n_splits: int = 30, seed: int = 0) -> SplitPlan:
    """Draw ``n_splits`` random bipartitions with |fold1| = ceil(N/2).

    Split i uses its own PRNG stream seeded by (seed, i), so plans are
    reproducible and independent of how many splits are requested.
    """
    qid_list = sorted(set(qids))
    if len(qid_list) < 2:
        raise InputError("need at least 2 query ids to split")
    if n_splits < 1:
        raise InputError(f"n_splits must be >= 1, got {n_splits}")
    half = math.ceil(len(qid_list) / 2)
    splits = []
    for i in range(n_splits):
        rng = np.random.default_rng([seed, i])
        perm = rng.permutation(len(qid_list))
        fold1 = tuple(sorted(qid_list[j] for j in perm[:half]))
        fold2 = tuple(sorted(qid_list[j] for j in perm[half:]))
        splits.append((fold1, fold2))
    return SplitPlan(seed=seed, splits=tuple(splits))


def serialize_split_plan(plan: SplitPlan) -> str:
    """Textual form, one line per assignment: ``split_index fold_index qid``."""
    lines = []
    for i, (fold1, fold2) in enumerate(plan.splits):
        for qid in fold1:
            lines.append(f"{i} 1 {qid}")
        for qid in fold2:
            lines.append(f"{i} 2 {qid}")
    return "\n".join(lines) + "\n"


def parse_split_plan(raw_text: str, seed: int = 0) -> SplitPlan:
    """Inverse of `serialize_split_plan`."""
    folds: dict[int, tuple[list[str], list[str]]] = {}
    for line_no, line in enumerate(io.StringIO(raw_text), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 3:
            raise ParseError(f"expected 3 columns, got {len(cols)}", line_no)
        try:
            split_idx = int(cols[0])
            fold_idx = int(cols[1])
        except ValueError:
            raise ParseError("non-integer split or fold index", line_no) from None
        if fold_idx not in (1, 2):
            raise ParseError(f"fold index must be 1 or 2, got {fold_idx}", line_no)
        folds.setdefault(split_idx, ([], []))[fold_idx - 1].append(cols[2])
    if not folds:
        raise ParseError("empty split plan", 1)
    if sorted(folds) != list(range(len(folds))):
        raise ParseError("split indices must be contiguous from 0", 1)
    splits = tuple(
        (tuple(sorted(folds[i][0])), tuple(sorted(folds[i][1])))
        for i in range(len(folds))
    )
    return SplitPlan(seed=seed, splits=splits)
