"""The groupwise predictor: a 4-layer post-norm transformer encoder over
group sequences of pair vectors, plus the trainable toy pair encoder,
training with Adam, inference, and per-query aggregation.

Pair vectors come either from an embedding store (frozen, imported) or
from the toy encoder (trained end-to-end with the predictor).
"""
from __future__ import annotations

import enum
import logging
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step
from .baselines import predict_baseline
from .data import PairEmbeddingStore, QueryRecord
from .errors import (
    ContractError,
    DegenerateVarianceError,
    InputError,
    NonFiniteLossError,
)
from .grouping import Group, GroupingStrategy, build_groups
from .metrics import kendall_tau_b

log = logging.getLogger(__name__)

PAIR_TOKEN_LIMIT = 256

# PRNG stream tags (mixed into seed lists; must stay stable across versions)
_STREAM_INIT = 11
_STREAM_INNER_SPLIT = 7
_STREAM_PREDICT = 13


class Aggregation(enum.Enum):
    MAX = "max"
    MEAN = "mean"
    FIRST_RANKED_DOC = "first"

    @classmethod
    def from_name(cls, name: str) -> "Aggregation":
        for member in cls:
            if member.value == name:
                return member
        raise InputError(
            f"unknown aggregation {name!r}; known: {[m.value for m in cls]}"
        )


def aggregate(per_doc_predictions, method: Aggregation) -> float:
    """Collapse a query's per-document predictions (in rank order)."""
    preds = list(per_doc_predictions)
    if not preds:
        raise InputError("no per-document predictions to aggregate")
    if method is Aggregation.MAX:
        return float(max(preds))
    if method is Aggregation.MEAN:
        return float(np.mean(preds))
    return float(preds[0])


def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def hash_token(token: str, vocab_size: int) -> int:
    """Stable token-to-row hash (crc32 of the UTF-8 bytes)."""
    return zlib.crc32(token.encode("utf-8")) % vocab_size


@dataclass
class EncoderParams:
    """Toy pair encoder: mean token embeddings of query and document,
    concatenated and projected to the predictor dimension."""

    vocab_size: int
    d_embed: int
    d_model: int
    table: Tensor
    proj_w: Tensor
    proj_b: Tensor
    token_limit: int = PAIR_TOKEN_LIMIT

    def named(self, prefix: str = "encoder.") -> dict[str, Tensor]:
        return {
            f"{prefix}table": self.table,
            f"{prefix}proj_w": self.proj_w,
            f"{prefix}proj_b": self.proj_b,
        }

    def parameters(self) -> list[Tensor]:
        return [self.table, self.proj_w, self.proj_b]


def init_encoder(
    d_model: int,
    d_embed: int = 32,
    vocab_size: int = 2**15,
    rng=None,
    token_limit: int = PAIR_TOKEN_LIMIT,
) -> EncoderParams:
    if rng is None:
        rng = np.random.default_rng(0)
    if vocab_size < 1 or d_embed < 1 or d_model < 1:
        raise InputError("encoder dimensions must be positive")
    return EncoderParams(
        vocab_size=vocab_size,
        d_embed=d_embed,
        d_model=d_model,
        table=Tensor(
            _uniform(rng, d_embed, (vocab_size, d_embed)), requires_grad=True
        ),
        proj_w=Tensor(
            _uniform(rng, 2 * d_embed, (2 * d_embed, d_model)),
            requires_grad=True,
        ),
        proj_b=Tensor(
            _uniform(rng, 2 * d_embed, (1, d_model)), requires_grad=True
        ),
        token_limit=token_limit,
    )


def toy_encode(
    tape: Tape, query: QueryRecord, doc_tokens, enc: EncoderParams
) -> Tensor:
    """Encode one (query, document) pair to a 1 x d vector.

    The document is truncated so the pair fits the token limit; a
    document left empty after truncation is an input error.
    """
    budget = enc.token_limit - len(query.tokens)
    doc = tuple(doc_tokens)[: max(budget, 0)]
    if not doc:
        raise InputError(
            f"query {query.qid!r}: document empty after truncation to "
            f"{max(budget, 0)} tokens"
        )
    q_idx = [hash_token(t, enc.vocab_size) for t in query.tokens]
    d_idx = [hash_token(t, enc.vocab_size) for t in doc]
    q_mean = tape.mean_rows(tape.gather_rows(enc.table, q_idx))
    d_mean = tape.mean_rows(tape.gather_rows(enc.table, d_idx))
    both = tape.concat([q_mean, d_mean], axis=1)
    return tape.add(tape.matmul(both, enc.proj_w), enc.proj_b)


@dataclass
class LayerParams:
    # no key bias: softmax is invariant to it, so it has zero gradient
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}{name}": getattr(self, name)
            for name in (
                "wq", "bq", "wk", "wv", "bv", "wo", "bo",
                "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b",
            )
        }


@dataclass
class PredictorParams:
    """4-layer masked self-attention encoder with learned positions and a
    scalar head."""

    d_model: int
    n_heads: int
    max_positions: int
    pos_table: Tensor
    layers: list[LayerParams]
    head_w: Tensor
    head_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {"pos_table": self.pos_table}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}."))
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())


def init_predictor(
    d_model: int,
    n_heads: int = 4,
    max_positions: int = 128,
    n_layers: int = 4,
    rng=None,
) -> PredictorParams:
    if rng is None:
        rng = np.random.default_rng(0)
    if d_model % n_heads != 0:
        raise InputError(
            f"d_model {d_model} not divisible by n_heads {n_heads}"
        )
    d = d_model
    layers = []
    for _ in range(n_layers):
        layers.append(
            LayerParams(
                wq=Tensor(_uniform(rng, d, (d, d)), requires_grad=True),
                bq=Tensor(_uniform(rng, d, (1, d)), requires_grad=True),
                wk=Tensor(_uniform(rng, d, (d, d)), requires_grad=True),
                wv=Tensor(_uniform(rng, d, (d, d)), requires_grad=True),
                bv=Tensor(_uniform(rng, d, (1, d)), requires_grad=True),
                wo=Tensor(_uniform(rng, d, (d, d)), requires_grad=True),
                bo=Tensor(_uniform(rng, d, (1, d)), requires_grad=True),
                # layer norms start as identity transforms
                ln1_g=Tensor(np.ones((1, d)), requires_grad=True),
                ln1_b=Tensor(np.zeros((1, d)), requires_grad=True),
                w1=Tensor(_uniform(rng, d, (d, 4 * d)), requires_grad=True),
                b1=Tensor(_uniform(rng, d, (1, 4 * d)), requires_grad=True),
                w2=Tensor(
                    _uniform(rng, 4 * d, (4 * d, d)), requires_grad=True
                ),
                b2=Tensor(
                    _uniform(rng, 4 * d, (1, d)), requires_grad=True
                ),
                ln2_g=Tensor(np.ones((1, d)), requires_grad=True),
                ln2_b=Tensor(np.zeros((1, d)), requires_grad=True),
            )
        )
    return PredictorParams(
        d_model=d,
        n_heads=n_heads,
        max_positions=max_positions,
        pos_table=Tensor(
            _uniform(rng, d, (max_positions, d)), requires_grad=True
        ),
        layers=layers,
        head_w=Tensor(_uniform(rng, d, (d, 1)), requires_grad=True),
        head_b=Tensor(_uniform(rng, d, (1, 1)), requires_grad=True),
    )


def forward(
    tape: Tape,
    group_vectors: Tensor,
    position_ids,
    mask,
    params: PredictorParams,
) -> Tensor:
    """Score an n x d group; returns n predictions (masked slots invalid).

    Masked slots are excluded from attention via a -1e9 key bias; their
    output values are meaningless and must be dropped by the caller.
    """
    n, d = group_vectors.shape
    position_ids = list(position_ids)
    mask = list(mask)
    if d != params.d_model:
        raise ContractError(
            f"group vectors have dim {d}, model expects {params.d_model}"
        )
    if len(position_ids) != n or len(mask) != n:
        raise ContractError(
            f"group of {n} slots got {len(position_ids)} position ids "
            f"and {len(mask)} mask entries"
        )
    if any(not 0 <= p < params.max_positions for p in position_ids):
        raise ContractError(
            f"position ids {position_ids} outside 0..{params.max_positions - 1}"
        )
    if not any(mask):
        raise ContractError("group has no valid slots")
    d_head = params.d_model // params.n_heads
    key_bias = Tensor(
        np.where(np.asarray(mask, dtype=bool)[None, :], 0.0, -1e9)
        * np.ones((n, 1))
    )
    x = tape.add(group_vectors, tape.gather_rows(params.pos_table, position_ids))
    for layer in params.layers:
        q = tape.add(tape.matmul(x, layer.wq), layer.bq)
        k = tape.matmul(x, layer.wk)
        v = tape.add(tape.matmul(x, layer.wv), layer.bv)
        heads = []
        for h in range(params.n_heads):
            lo, hi = h * d_head, (h + 1) * d_head
            qh = tape.slice_cols(q, lo, hi)
            kh = tape.slice_cols(k, lo, hi)
            vh = tape.slice_cols(v, lo, hi)
            scores = tape.scale(
                tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(d_head)
            )
            attn = tape.row_softmax(tape.add(scores, key_bias))
            heads.append(tape.matmul(attn, vh))
        merged = heads[0] if len(heads) == 1 else tape.concat(heads, axis=1)
        attn_out = tape.add(tape.matmul(merged, layer.wo), layer.bo)
        x = tape.add(
            tape.mul(tape.layer_norm(tape.add(x, attn_out)), layer.ln1_g),
            layer.ln1_b,
        )
        f = tape.gelu(tape.add(tape.matmul(x, layer.w1), layer.b1))
        f = tape.add(tape.matmul(f, layer.w2), layer.b2)
        x = tape.add(
            tape.mul(tape.layer_norm(tape.add(x, f)), layer.ln2_g),
            layer.ln2_b,
        )
    return tape.add(tape.matmul(x, params.head_w), params.head_b)


def mse_loss(tape: Tape, predictions: Tensor, labels, mask) -> Tensor:
    """Mean squared error over valid slots only."""
    mask_arr = np.asarray(list(mask), dtype=np.float64).reshape(-1, 1)
    n_valid = int(mask_arr.sum())
    if n_valid == 0:
        raise ContractError("loss over a group with zero valid slots")
    label_t = Tensor(np.asarray(list(labels), dtype=np.float64).reshape(-1, 1))
    if predictions.shape != label_t.shape:
        raise ContractError(
            f"predictions {predictions.shape} vs labels {label_t.shape}"
        )
    diff = tape.sub(predictions, label_t)
    sq = tape.mul(diff, diff)
    masked = tape.mul(sq, Tensor(mask_arr))
    return tape.scale(tape.sum_all(masked), 1.0 / n_valid)


@dataclass
class EncoderSource:
    """Trainable pair source: toy encoder plus the pair texts it needs.

    doc_tokens maps (qid, docid) to the pair's selected passage tokens.
    """

    params: EncoderParams
    queries: dict[str, QueryRecord]
    doc_tokens: dict[tuple[str, str], tuple[str, ...]]

    @property
    def dim(self) -> int:
        return self.params.d_model

    def trainable(self) -> list[Tensor]:
        return self.params.parameters()


@dataclass
class StoreSource:
    """Frozen pair source backed by an embedding store."""

    store: PairEmbeddingStore

    @property
    def dim(self) -> int:
        return self.store.dim

    def trainable(self) -> list[Tensor]:
        return []


def as_source(source):
    if isinstance(source, (EncoderSource, StoreSource)):
        return source
    if isinstance(source, PairEmbeddingStore):
        return StoreSource(source)
    raise InputError(f"unsupported pair source {type(source).__name__}")


def group_matrix(tape: Tape, group: Group, source) -> Tensor:
    """Assemble the n x d input for one group; padded slots are zeros."""
    source = as_source(source)
    if isinstance(source, StoreSource):
        rows = np.zeros((len(group.items), source.dim))
        for i, item in enumerate(group.items):
            if item is not None:
                rows[i] = source.store.get(*item).vec
        return Tensor(rows)
    zero_row = Tensor(np.zeros((1, source.dim)))
    rows = []
    for item in group.items:
        if item is None:
            rows.append(zero_row)
            continue
        qid, docid = item
        if qid not in source.queries:
            raise InputError(f"no query text for {qid!r}")
        if (qid, docid) not in source.doc_tokens:
            raise InputError(f"no document tokens for pair ({qid!r}, {docid!r})")
        rows.append(
            toy_encode(
                tape, source.queries[qid], source.doc_tokens[(qid, docid)],
                source.params,
            )
        )
    return rows[0] if len(rows) == 1 else tape.concat(rows, axis=0)


@dataclass
class TrainConfig:
    """Training protocol knobs (depths, grids, strategy, determinism)."""

    epochs: int = 5
    group_size: int = 8
    lr_grid: tuple[float, ...] = (1e-4, 1e-5, 1e-6)
    warmup_fraction: float = 0.10
    train_depth: int = 100
    infer_depth: int = 25
    strategy: GroupingStrategy = GroupingStrategy.RQD
    n_heads: int = 4
    n_layers: int = 4
    seed: int = 0
    max_steps: int | None = None
    initial_qpp_x: float = 50.0
    inner_train_fraction: float = 0.80
    aggregation: Aggregation | None = None  # None = tune on the inner split
    inference_order: GroupingStrategy | None = None  # None = derive

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise InputError(
                f"warmup fraction must be in (0,1), got {self.warmup_fraction}"
            )
        if self.epochs < 1 or self.group_size < 1:
            raise InputError("epochs and group size must be >= 1")
        if not self.lr_grid:
            raise InputError("learning-rate grid is empty")


def _initial_qpp(run, cfg: TrainConfig) -> dict[str, float] | None:
    if cfg.strategy not in (
        GroupingStrategy.QUERY_ORDER,
        GroupingStrategy.QUERY_PLUS_DOC,
        GroupingStrategy.RQD,
    ):
        return None
    return predict_baseline(
        "nsigma", run, k=cfg.infer_depth, x_percent=cfg.initial_qpp_x
    )


@dataclass
class FitResult:
    params: PredictorParams
    source: object
    log: list = field(default_factory=list)  # (step, lr, loss) records


def fit(
    run,
    labels: dict[str, float],
    source,
    cfg: TrainConfig,
    lr: float,
    lr_index: int = 0,
) -> FitResult:
    """Train the predictor (and the toy encoder, when trainable) on one
    query set with a fixed learning rate."""
    source = as_source(source)
    missing = [q for q in run.qids if q not in labels]
    if missing:
        raise InputError(f"labels missing for queries {missing[:5]}")
    rng_init = np.random.default_rng([cfg.seed, _STREAM_INIT, lr_index])
    params = init_predictor(
        d_model=source.dim,
        n_heads=cfg.n_heads,
        max_positions=max(cfg.group_size, 1),
        n_layers=cfg.n_layers,
        rng=rng_init,
    )
    qpp = _initial_qpp(run, cfg)
    trainable = params.parameters() + source.trainable()
    groups_per_epoch = len(
        build_groups(
            cfg.strategy, run, cfg.train_depth, cfg.group_size,
            cfg.seed, qpp, epoch=0,
        )
    )
    total = cfg.epochs * groups_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    state = AdamState(
        base_lr=lr,
        total_steps=total,
        warmup_steps=max(1, math.ceil(cfg.warmup_fraction * total)),
    )
    result = FitResult(params=params, source=source)
    step = 0
    for epoch in range(cfg.epochs):
        groups = build_groups(
            cfg.strategy, run, cfg.train_depth, cfg.group_size,
            cfg.seed, qpp, epoch=epoch,
        )
        for gid, group in enumerate(groups):
            if step >= total:
                return result
            tape = Tape()
            preds = forward(
                tape, group_matrix(tape, group, source),
                group.position_ids, group.mask, params,
            )
            slot_labels = [
                labels[item[0]] if item is not None else 0.0
                for item in group.items
            ]
            loss = mse_loss(tape, preds, slot_labels, group.mask)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise NonFiniteLossError(
                    f"non-finite loss at lr={lr}, step={step}, "
                    f"epoch={epoch}, group={gid}"
                )
            tape.backward(loss)
            adam_step(state, trainable)
            for p in trainable:
                p.grad = None
            step += 1
            result.log.append((step, state.lr_at(state.t), loss_val))
    return result


def inference_strategy(cfg: TrainConfig) -> GroupingStrategy:
    """Ordering used to build inference groups.

    Pure orders keep their own ordering; the mixed strategies default to
    document order (aggregation is per query), overridable in the config.
    """
    if cfg.inference_order is not None:
        return cfg.inference_order
    if cfg.strategy in (
        GroupingStrategy.RANDOM_ORDER,
        GroupingStrategy.QUERY_ORDER,
        GroupingStrategy.DOC_ORDER,
    ):
        return cfg.strategy
    return GroupingStrategy.DOC_ORDER


def predict_scores(
    run,
    qids,
    params: PredictorParams,
    source,
    cfg: TrainConfig,
) -> dict[str, list[float]]:
    """Per-document predictions for each query, in rank order."""
    source = as_source(source)
    qids = [q for q in qids]
    missing = [q for q in qids if q not in run]
    if missing:
        raise InputError(f"queries not in run: {missing[:5]}")
    sub = run.restrict(qids)
    kind = inference_strategy(cfg)
    qpp = None
    if kind is GroupingStrategy.QUERY_ORDER:
        qpp = predict_baseline(
            "nsigma", sub, k=cfg.infer_depth, x_percent=cfg.initial_qpp_x
        )
    groups = build_groups(
        kind, sub, cfg.infer_depth, cfg.group_size,
        cfg.seed + _STREAM_PREDICT, qpp, epoch=0,
    )
    per_pair: dict[tuple[str, str], float] = {}
    for group in groups:
        tape = Tape(record=False)
        preds = forward(
            tape, group_matrix(tape, group, source),
            group.position_ids, group.mask, params,
        )
        for slot, item in enumerate(group.items):
            if item is not None:
                per_pair[item] = float(preds.data[slot, 0])
    out: dict[str, list[float]] = {}
    for qid in qids:
        entries = sub.top(qid, cfg.infer_depth)
        out[qid] = [per_pair[(qid, e.docid)] for e in entries]
    return out


def predict_all(
    run, qids, params, source, cfg: TrainConfig, aggregation: Aggregation
) -> dict[str, float]:
    """One aggregated prediction per query."""
    per_doc = predict_scores(run, qids, params, source, cfg)
    return {q: aggregate(preds, aggregation) for q, preds in per_doc.items()}


def predict_query(
    qid, run, params, source, cfg: TrainConfig, aggregation: Aggregation
) -> float:
    return predict_all(run, [qid], params, source, cfg, aggregation)[qid]


def safe_tau(x, y) -> float:
    """Kendall tau for model selection; degenerate inputs rank last."""
    try:
        return kendall_tau_b(x, y)
    except DegenerateVarianceError:
        return -2.0


@dataclass
class TrainResult:
    params: PredictorParams
    source: object
    lr: float
    aggregation: Aggregation
    inner_scores: dict
    log: list


def train(run, labels: dict[str, float], source, cfg: TrainConfig) -> TrainResult:
    """Full training protocol: tune (lr, aggregation) on an inner 80/20
    split of the given queries, then retrain on all of them."""
    qids = sorted(run.qids)
    if len(qids) < 4:
        raise InputError(
            f"need at least 4 queries to tune on an inner split, got {len(qids)}"
        )
    rng = np.random.default_rng([cfg.seed, _STREAM_INNER_SPLIT])
    perm = rng.permutation(len(qids))
    n_train = int(round(cfg.inner_train_fraction * len(qids)))
    n_train = min(max(n_train, 1), len(qids) - 2)
    inner_train = sorted(qids[i] for i in perm[:n_train])
    inner_val = sorted(qids[i] for i in perm[n_train:])
    run_train = run.restrict(inner_train)
    val_labels = [labels[q] for q in inner_val]

    # a trainable encoder mutates in place; every candidate must start
    # from the same weights
    source = as_source(source)
    pristine = [p.data.copy() for p in source.trainable()]

    def reset_source():
        for p, data in zip(source.trainable(), pristine):
            p.data = data.copy()
            p.grad = None

    candidates = (
        list(Aggregation)
        if cfg.aggregation is None
        else [cfg.aggregation]
    )
    best = None  # ((tau, tiebreaks), lr_index, lr, agg)
    inner_scores: dict = {}
    for lr_index, lr in enumerate(cfg.lr_grid):
        reset_source()
        fitted = fit(run_train, labels, source, cfg, lr, lr_index=lr_index)
        per_doc = predict_scores(run, inner_val, fitted.params, source, cfg)
        for agg_index, agg in enumerate(candidates):
            preds = [aggregate(per_doc[q], agg) for q in inner_val]
            tau = safe_tau(preds, val_labels)
            inner_scores[(lr, agg.value)] = tau
            key = (tau, -lr_index, -agg_index)
            if best is None or key > best[0]:
                best = (key, lr_index, lr, agg)
    _, lr_index, lr, agg = best
    reset_source()
    final = fit(run, labels, source, cfg, lr, lr_index=lr_index)
    return TrainResult(
        params=final.params,
        source=final.source,
        lr=lr,
        aggregation=agg,
        inner_scores=inner_scores,
        log=final.log,
    )
