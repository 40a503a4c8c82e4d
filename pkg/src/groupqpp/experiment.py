"""Experiment orchestration: labels, the repeated 2-fold protocol,
interpolation tuning, sweeps, and report files.

Reports are deterministic byte-for-byte for a fixed config and seed: no
timestamps, sorted keys, and per-split PRNG streams derived from
(seed, split index).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (
    LAMBDA_GRID,
    X_PERCENT_GRID,
    InterpolationConfig,
    interpolate,
    parse_collection_scores,
    predict_baseline,
)
from .data import (
    QueryRecord,
    RetrievalRun,
    Qrels,
    load_embeddings,
    load_id_text_tsv,
    parse_qrels,
    parse_run,
    select_top_passage,
    slice_passages,
    tokenize,
)
from .errors import (
    DegenerateVarianceError,
    ExperimentError,
    InputError,
    NoRelevantJudgmentsError,
    QppError,
    UsageError,
)
from .grouping import GroupingStrategy
from .metrics import (
    LABEL_AP_1000,
    QueryLabel,
    average_precision,
    kendall_tau_b,
    label_kind_p_at_k,
    make_splits,
    paired_t_test,
    pearson,
    precision_at_k,
    serialize_split_plan,
)
from .model import (
    Aggregation,
    EncoderSource,
    StoreSource,
    TrainConfig,
    init_encoder,
    predict_all,
    safe_tau,
    train,
)

log = logging.getLogger(__name__)

BASELINE_METHODS = ("sigma_k", "nqc", "wig", "smv", "nsigma")
MODEL_METHODS = ("model", "model+nsigma")
KNOWN_METHODS = BASELINE_METHODS + MODEL_METHODS

GROUP_SIZE_SWEEP = (1, 8, 16, 32, 64)
INFER_DEPTH_SWEEP = (10, 25, 50, 100, 200)

_STREAM_ENCODER = 5


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment settings; every field maps to one config-file key."""

    run: str = ""
    qrels: str = ""
    embeddings: str = ""
    queries: str = ""
    docs: str = ""
    collection_scores: str = ""
    out: str = ""
    methods: tuple[str, ...] = ("nsigma", "model", "model+nsigma")
    strategy: str = "rqd"
    group_size: int = 8
    train_depth: int = 100
    infer_depth: int = 25
    baseline_depth: int = 25
    label_kind: str = LABEL_AP_1000
    label_k: int = 10
    lambda_grid: tuple[float, ...] = LAMBDA_GRID
    x_grid: tuple[float, ...] = X_PERCENT_GRID
    lr_grid: tuple[float, ...] = (1e-4, 1e-5, 1e-6)
    epochs: int = 5
    n_heads: int = 4
    n_layers: int = 4
    seed: int = 0
    n_splits: int = 30
    max_steps: int = 0  # 0 = no cap
    inference_order: str = "auto"
    vocab_size: int = 2**15
    d_embed: int = 32
    d_model: int = 64
    window: int = 150
    stride: int = 75

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise UsageError(
                f"unknown methods {unknown}; known: {list(KNOWN_METHODS)}"
            )
        if self.label_kind not in (LABEL_AP_1000, "P@k"):
            raise UsageError(
                f"label kind must be 'AP@1000' or 'P@k', got {self.label_kind!r}"
            )
        GroupingStrategy.from_name(self.strategy)
        if self.inference_order != "auto":
            GroupingStrategy.from_name(self.inference_order)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            group_size=self.group_size,
            lr_grid=self.lr_grid,
            train_depth=self.train_depth,
            infer_depth=self.infer_depth,
            strategy=GroupingStrategy.from_name(self.strategy),
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            seed=seed,
            max_steps=self.max_steps or None,
            inference_order=(
                None
                if self.inference_order == "auto"
                else GroupingStrategy.from_name(self.inference_order)
            ),
        )


_TUPLE_FLOAT_KEYS = {"lambda_grid", "x_grid", "lr_grid"}
_TUPLE_STR_KEYS = {"methods"}


def config_from_mapping(mapping: dict[str, str]) -> ExperimentConfig:
    """Build a config from flat string key/values (file or CLI flags)."""
    kwargs = {}
    types = {
        f.name: f for f in dataclasses.fields(ExperimentConfig)
    }
    for key, raw in mapping.items():
        if key not in types:
            raise UsageError(f"unknown config key {key!r}")
        if raw is None:
            continue
        if key in _TUPLE_FLOAT_KEYS:
            if isinstance(raw, (tuple, list)):
                kwargs[key] = tuple(float(v) for v in raw)
            else:
                kwargs[key] = tuple(
                    float(v) for v in str(raw).split(",") if v.strip()
                )
        elif key in _TUPLE_STR_KEYS:
            if isinstance(raw, (tuple, list)):
                kwargs[key] = tuple(raw)
            else:
                kwargs[key] = tuple(
                    v.strip() for v in str(raw).split(",") if v.strip()
                )
        else:
            default = types[key].default
            if isinstance(default, int):
                try:
                    kwargs[key] = int(raw)
                except (TypeError, ValueError):
                    raise UsageError(
                        f"config key {key!r} needs an integer, got {raw!r}"
                    ) from None
            else:
                kwargs[key] = str(raw)
    return ExperimentConfig(**kwargs)


def config_to_mapping(cfg: ExperimentConfig) -> dict[str, str]:
    """Flat string form; `config_from_mapping` inverts it exactly."""
    out: dict[str, str] = {}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if f.name in _TUPLE_FLOAT_KEYS:
            out[f.name] = ",".join(repr(v) for v in value)
        elif f.name in _TUPLE_STR_KEYS:
            out[f.name] = ",".join(value)
        else:
            out[f.name] = str(value)
    return out


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat ``key = value`` config format.

    Lines starting with # are comments; values may be quoted.
    """
    out: dict[str, str] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(
                f"config line {line_no}: expected 'key = value', got {line!r}"
            )
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key] = value
    return out


def dump_config_text(cfg: ExperimentConfig) -> str:
    mapping = config_to_mapping(cfg)
    return "\n".join(f"{k} = {mapping[k]}" for k in sorted(mapping)) + "\n"


def compute_labels(
    run: RetrievalRun, qrels: Qrels, kind: str, k: int = 10
) -> dict[str, QueryLabel]:
    """Per-query effectiveness labels; queries without any relevant
    judgments are dropped with a warning."""
    labels: dict[str, QueryLabel] = {}
    judged = set(qrels.qids)
    for qid in run.qids:
        if qid not in judged:
            log.warning("query %s absent from qrels; excluded", qid)
            continue
        relevant = qrels.relevant_docs(qid)
        docids = [e.docid for e in run.entries(qid)]
        if kind == LABEL_AP_1000:
            try:
                value = average_precision(docids, relevant)
            except NoRelevantJudgmentsError:
                log.warning("query %s has no relevant documents; excluded", qid)
                continue
            labels[qid] = QueryLabel(qid, value, LABEL_AP_1000)
        elif kind == "P@k":
            if not relevant:
                log.warning("query %s has no relevant documents; excluded", qid)
                continue
            labels[qid] = QueryLabel(
                qid, precision_at_k(docids, relevant, k), label_kind_p_at_k(k)
            )
        else:
            raise InputError(f"unknown label kind {kind!r}")
    if not labels:
        raise InputError("no queries are covered by both run and qrels")
    return labels


def build_encoder_source(
    run: RetrievalRun,
    query_texts: dict[str, str],
    doc_texts: dict[str, str],
    cfg: ExperimentConfig,
) -> EncoderSource:
    """Select each pair's top passage and wrap a fresh toy encoder."""
    queries = {}
    for qid in run.qids:
        if qid not in query_texts:
            raise InputError(f"no query text for {qid!r}")
        queries[qid] = QueryRecord.from_text(qid, query_texts[qid])
    depth = max(cfg.train_depth, cfg.infer_depth)
    doc_tokens: dict[tuple[str, str], tuple[str, ...]] = {}
    for qid in run.qids:
        for entry in run.top(qid, depth):
            if entry.docid not in doc_texts:
                raise InputError(f"no document text for {entry.docid!r}")
            tokens = tokenize(doc_texts[entry.docid])
            passages = slice_passages(tokens, cfg.window, cfg.stride)
            best = select_top_passage(queries[qid], passages)
            doc_tokens[(qid, entry.docid)] = passages[best].tokens
    encoder = init_encoder(
        d_model=cfg.d_model,
        d_embed=cfg.d_embed,
        vocab_size=cfg.vocab_size,
        rng=np.random.default_rng([cfg.seed, _STREAM_ENCODER]),
    )
    return EncoderSource(params=encoder, queries=queries, doc_tokens=doc_tokens)


def _split_seed(seed: int, split_index: int) -> int:
    return int(
        np.random.SeedSequence([seed, split_index]).generate_state(1)[0]
    )


def _tune_nsigma(run1, fold1, eval1, cfg, extras) -> float:
    best = None
    for idx, x in enumerate(cfg.x_grid):
        preds = predict_baseline(
            "nsigma", run1, cfg.baseline_depth, x, **extras
        )
        tau = safe_tau([preds[q] for q in fold1], [eval1[q] for q in fold1])
        key = (tau, -idx)
        if best is None or key > best[0]:
            best = (key, x)
    return best[1]


def _tune_interpolation(
    model1: dict[str, float], run1, fold1, eval1, cfg, extras
) -> tuple[float, float]:
    labels = [eval1[q] for q in fold1]
    nsig_by_x = {
        x: predict_baseline("nsigma", run1, cfg.baseline_depth, x, **extras)
        for x in cfg.x_grid
    }
    best = None
    for li, lam in enumerate(cfg.lambda_grid):
        for xi, x in enumerate(cfg.x_grid):
            mixed = interpolate(
                model1, nsig_by_x[x], InterpolationConfig(lam)
            )
            tau = safe_tau([mixed[q] for q in fold1], labels)
            key = (tau, -li, -xi)
            if best is None or key > best[0]:
                best = (key, lam, x)
    return best[1], best[2]


def run_experiment(
    cfg: ExperimentConfig,
    run: RetrievalRun | None = None,
    qrels: Qrels | None = None,
    source=None,
) -> dict:
    """The full protocol; returns (and optionally writes) the report."""
    stage = "load-inputs"
    split_idx: int | None = None
    outcomes: list[dict] = []
    try:
        if run is None:
            run = parse_run(Path(cfg.run).read_text(encoding="utf-8"))
        if qrels is None:
            qrels = parse_qrels(Path(cfg.qrels).read_text(encoding="utf-8"))
        query_lengths: dict[str, int] = {}
        if source is None:
            if cfg.embeddings:
                source = StoreSource(load_embeddings(cfg.embeddings))
            elif cfg.queries and cfg.docs:
                source = build_encoder_source(
                    run,
                    load_id_text_tsv(cfg.queries),
                    load_id_text_tsv(cfg.docs),
                    cfg,
                )
            elif any(m in MODEL_METHODS for m in cfg.methods):
                raise InputError(
                    "model methods need either an embeddings file or "
                    "query and document texts"
                )
        if isinstance(source, EncoderSource):
            query_lengths = {
                q: len(rec.tokens) for q, rec in source.queries.items()
            }
        collection_scores = None
        if cfg.collection_scores:
            collection_scores = parse_collection_scores(
                Path(cfg.collection_scores).read_text(encoding="utf-8")
            )
        extras = {
            "query_lengths": query_lengths,
            "collection_scores": collection_scores,
        }

        stage = "labels"
        labels_eval = compute_labels(run, qrels, LABEL_AP_1000)
        if cfg.label_kind == LABEL_AP_1000:
            labels_sup = labels_eval
        else:
            labels_sup = compute_labels(run, qrels, "P@k", cfg.label_k)
        eligible = sorted(set(labels_eval) & set(labels_sup))
        if len(eligible) < 4:
            raise InputError(
                f"protocol needs at least 4 labeled queries, got {len(eligible)}"
            )

        stage = "splits"
        plan = make_splits(eligible, cfg.n_splits, cfg.seed)

        for split_idx, (fold1, fold2) in enumerate(plan.splits):
            stage = "fold-setup"
            run1 = run.restrict(fold1)
            run2 = run.restrict(fold2)
            eval1 = {q: labels_eval[q].value for q in fold1}
            sup1 = {q: labels_sup[q].value for q in fold1}
            eval2 = [labels_eval[q].value for q in fold2]
            trained = None
            per_method: dict[str, dict] = {}
            for method in cfg.methods:
                stage = f"method:{method}"
                tuned: dict = {}
                if method in BASELINE_METHODS and method != "nsigma":
                    preds2 = predict_baseline(
                        method, run2, cfg.baseline_depth, 50.0, **extras
                    )
                elif method == "nsigma":
                    x_star = _tune_nsigma(run1, fold1, eval1, cfg, extras)
                    tuned["x_percent"] = float(x_star)
                    preds2 = predict_baseline(
                        "nsigma", run2, cfg.baseline_depth, x_star, **extras
                    )
                else:
                    if trained is None:
                        tcfg = cfg.train_config(
                            _split_seed(cfg.seed, split_idx)
                        )
                        trained = train(run1, sup1, source, tcfg)
                    tcfg = cfg.train_config(_split_seed(cfg.seed, split_idx))
                    tuned["lr"] = float(trained.lr)
                    tuned["aggregation"] = trained.aggregation.value
                    preds2_model = predict_all(
                        run2, fold2, trained.params, trained.source,
                        tcfg, trained.aggregation,
                    )
                    if method == "model":
                        preds2 = preds2_model
                    else:
                        preds1_model = predict_all(
                            run1, fold1, trained.params, trained.source,
                            tcfg, trained.aggregation,
                        )
                        lam, x_star = _tune_interpolation(
                            preds1_model, run1, fold1, eval1, cfg, extras
                        )
                        tuned["lambda"] = float(lam)
                        tuned["x_percent"] = float(x_star)
                        nsig2 = predict_baseline(
                            "nsigma", run2, cfg.baseline_depth, x_star,
                            **extras,
                        )
                        preds2 = interpolate(
                            preds2_model, nsig2, InterpolationConfig(lam)
                        )
                stage = f"correlation:{method}"
                xs = [preds2[q] for q in fold2]
                per_method[method] = {
                    "pearson": float(pearson(xs, eval2)),
                    "kendall": float(kendall_tau_b(xs, eval2)),
                    "tuned": tuned,
                    "predictions": {q: float(preds2[q]) for q in fold2},
                }
            outcomes.append(
                {
                    "split": split_idx,
                    "fold1": list(fold1),
                    "fold2": list(fold2),
                    "methods": per_method,
                }
            )
    except QppError as e:
        if isinstance(e, ExperimentError):
            raise
        _persist_partial(cfg, outcomes, stage, split_idx, str(e))
        raise ExperimentError(stage, split_idx) from e

    report = _assemble_report(cfg, eligible, plan, outcomes)
    if cfg.out:
        write_report(report, plan, cfg.out)
    return report


def _persist_partial(cfg, outcomes, stage, split_idx, message):
    if not cfg.out:
        return
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    partial = {
        "failed_stage": stage,
        "failed_split": split_idx,
        "error": message,
        "completed_splits": outcomes,
    }
    (out / "partial_report.json").write_text(
        json.dumps(partial, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def _assemble_report(cfg, eligible, plan, outcomes) -> dict:
    methods_block: dict[str, dict] = {}
    for method in cfg.methods:
        rhos = [o["methods"][method]["pearson"] for o in outcomes]
        taus = [o["methods"][method]["kendall"] for o in outcomes]
        methods_block[method] = {
            "mean_pearson": float(np.mean(rhos)),
            "mean_kendall": float(np.mean(taus)),
            "per_split": [
                {
                    "split": o["split"],
                    "pearson": o["methods"][method]["pearson"],
                    "kendall": o["methods"][method]["kendall"],
                    "tuned": o["methods"][method]["tuned"],
                }
                for o in outcomes
            ],
        }
    significance: dict[str, dict] = {"pearson": {}, "kendall": {}}
    if len(outcomes) >= 2:
        for i, m1 in enumerate(cfg.methods):
            for m2 in cfg.methods[i + 1 :]:
                for corr in ("pearson", "kendall"):
                    a = [o["methods"][m1][corr] for o in outcomes]
                    b = [o["methods"][m2][corr] for o in outcomes]
                    try:
                        t, p = paired_t_test(a, b)
                        entry = {"t": float(t), "p": float(p)}
                    except DegenerateVarianceError:
                        entry = {"t": None, "p": None}
                    significance[corr][f"{m1}|{m2}"] = entry
    config_map = config_to_mapping(cfg)
    # the output directory does not define the experiment; keeping it out
    # of the report makes reruns byte-comparable across locations
    config_map.pop("out", None)
    config_hash = hashlib.sha256(
        json.dumps(config_map, sort_keys=True).encode("utf-8")
    ).hexdigest()
    return {
        "version": __version__,
        "config": config_map,
        "config_hash": config_hash,
        "seed": cfg.seed,
        "n_splits": cfg.n_splits,
        "queries": list(eligible),
        "methods": methods_block,
        "significance": significance,
        "splits": [
            {"split": o["split"], "fold1": o["fold1"], "fold2": o["fold2"]}
            for o in outcomes
        ],
        "predictions": {
            method: [
                o["methods"][method]["predictions"] for o in outcomes
            ]
            for method in cfg.methods
        },
    }


def render_table(report: dict) -> str:
    """Human-readable summary of the report."""
    lines = [f"{'method':<16} {'mean_pearson':>12} {'mean_kendall':>12}"]
    for method in sorted(report["methods"]):
        block = report["methods"][method]
        lines.append(
            f"{method:<16} {block['mean_pearson']:>12.4f} "
            f"{block['mean_kendall']:>12.4f}"
        )
    sig = report.get("significance", {})
    pairs = sorted(sig.get("kendall", {}))
    if pairs:
        lines.append("")
        lines.append(f"{'pair':<28} {'t(kendall)':>10} {'p':>8}")
        for pair in pairs:
            entry = sig["kendall"][pair]
            if entry["t"] is None:
                lines.append(f"{pair:<28} {'n/a':>10} {'n/a':>8}")
            else:
                lines.append(
                    f"{pair:<28} {entry['t']:>10.4f} {entry['p']:>8.4f}"
                )
    return "\n".join(lines) + "\n"


def write_report(report: dict, plan, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "table.txt").write_text(render_table(report), encoding="utf-8")
    (out / "splits.txt").write_text(
        serialize_split_plan(plan), encoding="utf-8"
    )


def sweep(cfg: ExperimentConfig, axis: str, grid=None) -> dict:
    """Repeat the experiment varying one axis; table tracks the model."""
    if axis == "group_size":
        values = tuple(grid) if grid else GROUP_SIZE_SWEEP
    elif axis == "infer_depth":
        values = tuple(grid) if grid else INFER_DEPTH_SWEEP
    else:
        raise UsageError(
            f"sweep axis must be group_size or infer_depth, got {axis!r}"
        )
    if "model" not in cfg.methods:
        raise UsageError("sweep requires the 'model' method")
    points = []
    for value in values:
        sub_out = str(Path(cfg.out) / f"{axis}={value}") if cfg.out else ""
        sub_cfg = dataclasses.replace(
            cfg, **{axis: int(value), "out": sub_out}
        )
        report = run_experiment(sub_cfg)
        block = report["methods"]["model"]
        points.append(
            {
                "value": int(value),
                "mean_pearson": block["mean_pearson"],
                "mean_kendall": block["mean_kendall"],
            }
        )
    result = {"axis": axis, "points": points}
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(
            json.dumps(result, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
        lines = [f"{axis:>12} {'mean_kendall':>12} {'mean_pearson':>12}"]
        for point in points:
            lines.append(
                f"{point['value']:>12d} {point['mean_kendall']:>12.4f} "
                f"{point['mean_pearson']:>12.4f}"
            )
        (out / "sweep.txt").write_text(
            "\n".join(lines) + "\n", encoding="utf-8"
        )
    return result


def read_predictions(text: str) -> dict[str, float]:
    """Lines ``qid score [method]`` -> qid to score."""
    out: dict[str, float] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) not in (2, 3):
            raise InputError(
                f"prediction line {line_no}: expected 'qid score [method]'"
            )
        try:
            out[cols[0]] = float(cols[1])
        except ValueError:
            raise InputError(
                f"prediction line {line_no}: bad score {cols[1]!r}"
            ) from None
    if not out:
        raise InputError("prediction file is empty")
    return out


def read_label_file(text: str) -> dict[str, float]:
    """Lines ``qid value [kind]`` -> qid to value."""
    out: dict[str, float] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) not in (2, 3):
            raise InputError(
                f"label line {line_no}: expected 'qid value [kind]'"
            )
        try:
            out[cols[0]] = float(cols[1])
        except ValueError:
            raise InputError(
                f"label line {line_no}: bad value {cols[1]!r}"
            ) from None
    if not out:
        raise InputError("label file is empty")
    return out


def write_predictions(preds: dict[str, float], method: str) -> str:
    return (
        "\n".join(f"{q} {preds[q]!r} {method}" for q in sorted(preds)) + "\n"
    )


def write_labels(labels: dict[str, QueryLabel]) -> str:
    return (
        "\n".join(
            f"{q} {labels[q].value!r} {labels[q].kind}" for q in sorted(labels)
        )
        + "\n"
    )
