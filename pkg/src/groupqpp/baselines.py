"""Score-distribution predictors over a query's retrieval scores.

All predictors read a ScoreListContext and return a real where higher
means predicted-better.  The collection score s(C) is approximated by
the mean score of the full retrieved list unless an explicit per-query
value is supplied; see `context_from_run`.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .data import RetrievalRun
from .errors import (
    DegenerateDivisorError,
    InputError,
    ParseError,
)

SHIFT_EPSILON = 1e-6

X_PERCENT_GRID = (25.0, 50.0, 75.0, 100.0)
LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class ScoreListContext:
    """Descending retrieval scores plus the normalization inputs.

    query_length is the query's token count; collection_score is s(C).
    """

    scores: tuple[float, ...]
    collection_score: float
    query_length: int

    def __post_init__(self):
        if not self.scores:
            raise InputError("score list must be non-empty")
        if any(
            self.scores[i] < self.scores[i + 1]
            for i in range(len(self.scores) - 1)
        ):
            raise InputError("scores must be sorted descending")
        if self.query_length < 1:
            raise InputError(
                f"query_length must be >= 1, got {self.query_length}"
            )


@dataclass(frozen=True)
class InterpolationConfig:
    """Mixing weight for combining two predictors on z-scored values."""

    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InputError(f"lambda must be in [0,1], got {self.lam}")


def _check_depth(ctx: ScoreListContext, k: int) -> np.ndarray:
    if not 1 <= k <= len(ctx.scores):
        raise InputError(
            f"depth k={k} outside 1..{len(ctx.scores)}"
        )
    return np.asarray(ctx.scores[:k], dtype=np.float64)


def _abs_collection_score(ctx: ScoreListContext) -> float:
    if ctx.collection_score == 0.0:
        raise DegenerateDivisorError("collection score s(C) is zero")
    return abs(ctx.collection_score)


def sigma_k(ctx: ScoreListContext, k: int) -> float:
    """Population standard deviation of the top-k scores."""
    return float(_check_depth(ctx, k).std())


def nqc(ctx: ScoreListContext, k: int) -> float:
    """sigma_k normalized by |s(C)|."""
    return sigma_k(ctx, k) / _abs_collection_score(ctx)


def wig(ctx: ScoreListContext, k: int) -> float:
    """Mean top-k gain over s(C), damped by sqrt of the query length."""
    top = _check_depth(ctx, k)
    return float(
        (top - ctx.collection_score).sum()
        / (k * math.sqrt(ctx.query_length))
    )


def _shifted(scores: np.ndarray, trigger: bool) -> np.ndarray:
    # Shift by the minimum of the FULL list so relative magnitudes at
    # every depth stay consistent.
    if trigger:
        return scores - scores.min() + SHIFT_EPSILON
    return scores


def smv(ctx: ScoreListContext, k: int) -> float:
    """Magnitude-weighted log dispersion of the top-k, over |s(C)|."""
    denom = _abs_collection_score(ctx)
    _check_depth(ctx, k)
    full = np.asarray(ctx.scores, dtype=np.float64)
    shifted = _shifted(full, trigger=bool((full <= 0.0).any()))
    top = shifted[:k]
    mu = top.mean()
    value = float((top * np.abs(np.log(top / mu))).mean())
    return value / denom


def n_sigma_x(ctx: ScoreListContext, x_percent: float = 50.0) -> float:
    """Population std of scores within x% of the best, over |s(C)|."""
    if not 0.0 < x_percent <= 100.0:
        raise InputError(f"x_percent must be in (0,100], got {x_percent}")
    denom = _abs_collection_score(ctx)
    full = np.asarray(ctx.scores, dtype=np.float64)
    shifted = _shifted(full, trigger=ctx.scores[0] <= 0.0)
    members = shifted[shifted >= (x_percent / 100.0) * shifted[0]]
    if members.shape[0] <= 1:
        return 0.0
    return float(members.std()) / denom


def z_scores(values: dict[str, float]) -> dict[str, float]:
    """Per-set z-score normalization; a constant set maps to all zeros."""
    arr = np.asarray(list(values.values()), dtype=np.float64)
    mu = arr.mean()
    sigma = arr.std()
    if sigma == 0.0:
        return {q: 0.0 for q in values}
    return {q: (v - mu) / sigma for q, v in values.items()}


def interpolate(
    primary: dict[str, float],
    baseline: dict[str, float],
    cfg: InterpolationConfig,
) -> dict[str, float]:
    """lam * z(primary) + (1 - lam) * z(baseline), per query."""
    if set(primary) != set(baseline):
        raise InputError(
            "interpolation inputs cover different query sets"
        )
    zp = z_scores(primary)
    zb = z_scores(baseline)
    return {
        q: cfg.lam * zp[q] + (1.0 - cfg.lam) * zb[q] for q in sorted(primary)
    }


def parse_collection_scores(raw_text: str) -> dict[str, float]:
    """Parse optional per-query s(C) overrides, lines ``qid s_c``."""
    out: dict[str, float] = {}
    for line_no, line in enumerate(io.StringIO(raw_text), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 2:
            raise ParseError(f"expected 2 columns, got {len(cols)}", line_no)
        try:
            out[cols[0]] = float(cols[1])
        except ValueError:
            raise ParseError(
                f"non-numeric collection score {cols[1]!r}", line_no
            ) from None
    return out


def context_from_run(
    run: RetrievalRun,
    qid: str,
    query_length: int = 1,
    collection_scores: dict[str, float] | None = None,
) -> ScoreListContext:
    """Build a predictor context for one query of a run.

    Without an override, s(C) falls back to the mean score of the
    query's full retrieved list.
    """
    scores = run.scores(qid)
    if collection_scores is not None and qid in collection_scores:
        s_c = collection_scores[qid]
    else:
        s_c = float(np.mean(scores))
    return ScoreListContext(
        scores=scores, collection_score=s_c, query_length=query_length
    )


PREDICTORS = {
    "sigma_k": lambda ctx, k, x: sigma_k(ctx, k),
    "nqc": lambda ctx, k, x: nqc(ctx, k),
    "wig": lambda ctx, k, x: wig(ctx, k),
    "smv": lambda ctx, k, x: smv(ctx, k),
    "nsigma": lambda ctx, k, x: n_sigma_x(ctx, x),
}


def predict_baseline(
    method: str,
    run: RetrievalRun,
    k: int,
    x_percent: float = 50.0,
    query_lengths: dict[str, int] | None = None,
    collection_scores: dict[str, float] | None = None,
) -> dict[str, float]:
    """Apply one named predictor to every query of a run."""
    if method not in PREDICTORS:
        raise InputError(
            f"unknown baseline {method!r}; known: {sorted(PREDICTORS)}"
        )
    fn = PREDICTORS[method]
    out: dict[str, float] = {}
    for qid in run.qids:
        qlen = (query_lengths or {}).get(qid, 1)
        ctx = context_from_run(run, qid, qlen, collection_scores)
        depth = min(k, len(ctx.scores))
        out[qid] = fn(ctx, depth, x_percent)
    return out
