"""Command-line interface.

Subcommands: ingest, embed, baseline, train, predict, evaluate,
experiment, sweep.  Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import Tape, load_checkpoint, save_checkpoint
from .baselines import predict_baseline, parse_collection_scores
from .data import (
    PairEmbedding,
    PairEmbeddingStore,
    QueryRecord,
    load_embeddings,
    load_id_text_tsv,
    parse_qrels,
    parse_run,
    save_embeddings,
    select_top_passage,
    serialize_run,
    slice_passages,
    tokenize,
)
from .errors import (
    DataError,
    NumericalError,
    QppError,
    UsageError,
)
from .experiment import (
    ExperimentConfig,
    build_encoder_source,
    compute_labels,
    config_from_mapping,
    config_to_mapping,
    parse_config_text,
    read_label_file,
    read_predictions,
    render_table,
    run_experiment,
    sweep,
    write_labels,
    write_predictions,
)
from .metrics import kendall_tau_b, paired_t_test, pearson
from .model import (
    Aggregation,
    EncoderSource,
    StoreSource,
    TrainConfig,
    init_encoder,
    init_predictor,
    predict_all,
    toy_encode,
    train,
)
from .baselines import z_scores
from .errors import DegenerateVarianceError
from .grouping import GroupingStrategy

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(parser: _Parser):
    """One flag per experiment-config field; unset flags fall back to the
    config file, then to defaults."""
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None)


def _merged_config(args) -> ExperimentConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(
            parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        )
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            mapping[f.name] = value
    return config_from_mapping(mapping)


def _write_or_print(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_ingest(args) -> int:
    run = parse_run(Path(args.run).read_text(encoding="utf-8"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.txt").write_text(serialize_run(run), encoding="utf-8")
    n_entries = sum(len(run.entries(q)) for q in run.qids)
    print(f"run: {len(run)} queries, {n_entries} entries")
    if args.qrels:
        qrels = parse_qrels(Path(args.qrels).read_text(encoding="utf-8"))
        from .synth import serialize_qrels

        (out / "qrels.txt").write_text(
            serialize_qrels(qrels), encoding="utf-8"
        )
        print(f"qrels: {len(qrels.records)} judgments")
    for name, src in (("queries", args.queries), ("docs", args.docs)):
        if src:
            table = load_id_text_tsv(src)
            (out / f"{name}.tsv").write_text(
                "".join(f"{k}\t{v}\n" for k, v in sorted(table.items())),
                encoding="utf-8",
            )
            print(f"{name}: {len(table)} records")
    return 0


def _cmd_embed(args) -> int:
    if args.import_file:
        store = load_embeddings(args.import_file)
        save_embeddings(store, args.out, format=args.format)
        print(
            f"imported {len(store)} vectors (dim {store.dim}) -> {args.out}"
        )
        return 0
    if not (args.run and args.queries and args.docs):
        raise UsageError(
            "embed needs --run, --queries and --docs (or --import-file)"
        )
    run = parse_run(Path(args.run).read_text(encoding="utf-8"))
    query_texts = load_id_text_tsv(args.queries)
    doc_texts = load_id_text_tsv(args.docs)
    encoder = init_encoder(
        d_model=args.d_model,
        d_embed=args.d_embed,
        vocab_size=args.vocab_size,
        rng=np.random.default_rng([args.seed, 5]),
    )
    store = PairEmbeddingStore(
        dim=args.d_model, encoder_name=f"toy-v{__version__}"
    )
    tape = Tape(record=False)
    for qid in run.qids:
        if qid not in query_texts:
            raise UsageError(f"no query text for {qid!r}")
        query = QueryRecord.from_text(qid, query_texts[qid])
        for rank, entry in enumerate(run.top(qid, args.depth), start=1):
            if entry.docid not in doc_texts:
                raise UsageError(f"no document text for {entry.docid!r}")
            tokens = tokenize(doc_texts[entry.docid])
            passages = slice_passages(tokens, args.window, args.stride)
            best = select_top_passage(query, passages)
            vec = toy_encode(
                tape, query, passages[best].tokens, encoder
            ).data[0]
            store.add(PairEmbedding(qid, entry.docid, rank, vec))
    save_embeddings(store, args.out, format=args.format)
    print(f"encoded {len(store)} pairs (dim {store.dim}) -> {args.out}")
    return 0


def _cmd_baseline(args) -> int:
    run = parse_run(Path(args.run).read_text(encoding="utf-8"))
    query_lengths = None
    if args.queries:
        query_lengths = {
            qid: max(len(tokenize(text)), 1)
            for qid, text in load_id_text_tsv(args.queries).items()
        }
    collection_scores = None
    if args.collection_scores:
        collection_scores = parse_collection_scores(
            Path(args.collection_scores).read_text(encoding="utf-8")
        )
    preds = predict_baseline(
        args.method,
        run,
        k=args.k,
        x_percent=args.x_percent,
        query_lengths=query_lengths,
        collection_scores=collection_scores,
    )
    _write_or_print(write_predictions(preds, args.method), args.out)
    return 0


def _pair_source(args, run):
    if args.embeddings:
        return StoreSource(load_embeddings(args.embeddings))
    if args.queries and args.docs:
        cfg = config_from_mapping(
            {
                "queries": args.queries,
                "docs": args.docs,
                "d_model": str(args.d_model),
                "d_embed": str(args.d_embed),
                "vocab_size": str(args.vocab_size),
                "seed": str(args.seed),
                "train_depth": str(args.train_depth),
                "infer_depth": str(args.infer_depth),
            }
        )
        return build_encoder_source(
            run,
            load_id_text_tsv(args.queries),
            load_id_text_tsv(args.docs),
            cfg,
        )
    raise UsageError(
        "need --embeddings or both --queries and --docs"
    )


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        group_size=args.group_size,
        lr_grid=tuple(float(v) for v in args.lr_grid.split(",")),
        train_depth=args.train_depth,
        infer_depth=args.infer_depth,
        strategy=GroupingStrategy.from_name(args.strategy),
        n_heads=args.n_heads,
        n_layers=args.n_layers,
        seed=args.seed,
        max_steps=args.max_steps or None,
        aggregation=(
            Aggregation.from_name(args.aggregation)
            if args.aggregation
            else None
        ),
        inference_order=(
            GroupingStrategy.from_name(args.inference_order)
            if args.inference_order != "auto"
            else None
        ),
    )


def _cmd_train(args) -> int:
    run = parse_run(Path(args.run).read_text(encoding="utf-8"))
    qrels = parse_qrels(Path(args.qrels).read_text(encoding="utf-8"))
    source = _pair_source(args, run)
    labels = compute_labels(run, qrels, args.label_kind, args.label_k)
    eligible = sorted(set(labels) & set(run.qids))
    run = run.restrict(eligible)
    cfg = _train_config_from_args(args)
    result = train(
        run, {q: labels[q].value for q in eligible}, source, cfg
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    named = dict(result.params.named())
    meta = {
        "version": __version__,
        "d_model": result.params.d_model,
        "n_heads": result.params.n_heads,
        "n_layers": len(result.params.layers),
        "max_positions": result.params.max_positions,
        "group_size": cfg.group_size,
        "strategy": cfg.strategy.value,
        "infer_depth": cfg.infer_depth,
        "lr": result.lr,
        "aggregation": result.aggregation.value,
        "label_kind": args.label_kind,
        "encoder": isinstance(source, EncoderSource),
    }
    if isinstance(source, EncoderSource):
        named.update(source.params.named())
        meta["vocab_size"] = source.params.vocab_size
        meta["d_embed"] = source.params.d_embed
        meta["token_limit"] = source.params.token_limit
    save_checkpoint(named, out / "model.qppm")
    (out / "train_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out / "training_log.txt").write_text(
        "".join(
            f"{step} {lr!r} {loss!r}\n" for step, lr, loss in result.log
        ),
        encoding="utf-8",
    )
    (out / "labels.txt").write_text(
        write_labels({q: labels[q] for q in eligible}), encoding="utf-8"
    )
    print(
        f"trained on {len(eligible)} queries: lr={result.lr}, "
        f"aggregation={result.aggregation.value} -> {out}"
    )
    return 0


def _load_model_bundle(checkpoint_dir):
    ckpt_dir = Path(checkpoint_dir)
    arrays = load_checkpoint(ckpt_dir / "model.qppm")
    meta = json.loads(
        (ckpt_dir / "train_meta.json").read_text(encoding="utf-8")
    )
    params = init_predictor(
        d_model=meta["d_model"],
        n_heads=meta["n_heads"],
        max_positions=meta["max_positions"],
        n_layers=meta["n_layers"],
        rng=np.random.default_rng(0),
    )
    for name, tensor in params.named().items():
        if name not in arrays:
            raise DataError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != tensor.data.shape:
            raise DataError(
                f"checkpoint parameter {name!r} has shape "
                f"{arrays[name].shape}, expected {tensor.data.shape}"
            )
        tensor.data = arrays[name].copy()
    encoder = None
    if meta.get("encoder"):
        encoder = init_encoder(
            d_model=meta["d_model"],
            d_embed=meta["d_embed"],
            vocab_size=meta["vocab_size"],
            rng=np.random.default_rng(0),
            token_limit=meta["token_limit"],
        )
        for name, tensor in encoder.named().items():
            tensor.data = arrays[name].copy()
    return params, encoder, meta


def _cmd_predict(args) -> int:
    run = parse_run(Path(args.run).read_text(encoding="utf-8"))
    params, encoder, meta = _load_model_bundle(args.checkpoint)
    if encoder is not None:
        if not (args.queries and args.docs):
            raise UsageError(
                "this checkpoint embeds with the toy encoder; "
                "pass --queries and --docs"
            )
        cfg_map = {
            "queries": args.queries,
            "docs": args.docs,
            "d_model": str(meta["d_model"]),
            "d_embed": str(meta["d_embed"]),
            "vocab_size": str(meta["vocab_size"]),
            "train_depth": str(args.infer_depth or meta["infer_depth"]),
            "infer_depth": str(args.infer_depth or meta["infer_depth"]),
        }
        source = build_encoder_source(
            run,
            load_id_text_tsv(args.queries),
            load_id_text_tsv(args.docs),
            config_from_mapping(cfg_map),
        )
        source.params = encoder
    elif args.embeddings:
        source = StoreSource(load_embeddings(args.embeddings))
    else:
        raise UsageError("need --embeddings for a store-based checkpoint")
    cfg = TrainConfig(
        group_size=args.group_size or meta["group_size"],
        infer_depth=args.infer_depth or meta["infer_depth"],
        strategy=GroupingStrategy.from_name(meta["strategy"]),
        n_heads=meta["n_heads"],
        n_layers=meta["n_layers"],
        seed=args.seed,
        inference_order=(
            GroupingStrategy.from_name(args.inference_order)
            if args.inference_order != "auto"
            else None
        ),
    )
    aggregation = Aggregation.from_name(
        args.aggregation or meta["aggregation"]
    )
    preds = predict_all(run, run.qids, params, source, cfg, aggregation)
    _write_or_print(write_predictions(preds, "model"), args.out)
    return 0


def _cmd_evaluate(args) -> int:
    labels = read_label_file(Path(args.labels).read_text(encoding="utf-8"))
    per_file: dict[str, dict[str, float]] = {}
    for pred_path in args.pred:
        preds = read_predictions(Path(pred_path).read_text(encoding="utf-8"))
        qids = sorted(set(preds) & set(labels))
        if len(qids) < 2:
            raise DataError(
                f"{pred_path}: fewer than 2 queries shared with labels"
            )
        xs = [preds[q] for q in qids]
        ys = [labels[q] for q in qids]
        per_file[pred_path] = {"preds": preds}
        print(
            f"{pred_path} pearson {pearson(xs, ys):.6f} "
            f"kendall {kendall_tau_b(xs, ys):.6f}"
        )
    names = list(per_file)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            pa, pb = per_file[a]["preds"], per_file[b]["preds"]
            qids = sorted(set(pa) & set(pb) & set(labels))
            if len(qids) < 2:
                continue
            zl = z_scores({q: labels[q] for q in qids})
            za = z_scores({q: pa[q] for q in qids})
            zb = z_scores({q: pb[q] for q in qids})
            # paired per-query prediction errors on the z-scored scale
            ea = [abs(za[q] - zl[q]) for q in qids]
            eb = [abs(zb[q] - zl[q]) for q in qids]
            try:
                t, p = paired_t_test(ea, eb)
                print(f"{a}|{b} t {t:.4f} p {p:.4f}")
            except DegenerateVarianceError:
                print(f"{a}|{b} t n/a p n/a")
    return 0


def _cmd_experiment(args) -> int:
    cfg = _merged_config(args)
    if not cfg.run or not cfg.qrels:
        raise UsageError("experiment needs --run and --qrels")
    report = run_experiment(cfg)
    sys.stdout.write(render_table(report))
    if args.dump_config:
        Path(args.dump_config).write_text(
            "".join(
                f"{k} = {v}\n" for k, v in sorted(config_to_mapping(cfg).items())
            ),
            encoding="utf-8",
        )
    return 0


def _cmd_sweep(args) -> int:
    cfg = _merged_config(args)
    if not cfg.run or not cfg.qrels:
        raise UsageError("sweep needs --run and --qrels")
    grid = None
    if args.grid:
        grid = [int(v) for v in args.grid.split(",") if v.strip()]
    result = sweep(cfg, args.axis, grid)
    for point in result["points"]:
        print(
            f"{args.axis}={point['value']} "
            f"kendall {point['mean_kendall']:.4f} "
            f"pearson {point['mean_pearson']:.4f}"
        )
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="groupqpp", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--log-level", default="WARNING", help="python logging level name"
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("ingest", help="validate and normalize input files")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels")
    p.add_argument("--queries")
    p.add_argument("--docs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser(
        "embed", help="encode pairs with the toy encoder or convert files"
    )
    p.add_argument("--run")
    p.add_argument("--queries")
    p.add_argument("--docs")
    p.add_argument("--import-file")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("binary", "text"), default="binary")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-embed", type=int, default=32)
    p.add_argument("--vocab-size", type=int, default=2**15)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--window", type=int, default=150)
    p.add_argument("--stride", type=int, default=75)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("baseline", help="score-distribution predictors")
    p.add_argument("--run", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--k", type=int, default=25)
    p.add_argument("--x-percent", type=float, default=50.0)
    p.add_argument("--queries")
    p.add_argument("--collection-scores")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_baseline)

    def add_model_source_flags(p):
        p.add_argument("--embeddings")
        p.add_argument("--queries")
        p.add_argument("--docs")
        p.add_argument("--d-model", type=int, default=64)
        p.add_argument("--d-embed", type=int, default=32)
        p.add_argument("--vocab-size", type=int, default=2**15)

    p = sub.add_parser("train", help="train the groupwise predictor")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    add_model_source_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--label-kind", default="AP@1000")
    p.add_argument("--label-k", type=int, default=10)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--lr-grid", default="1e-4,1e-5,1e-6")
    p.add_argument("--train-depth", type=int, default=100)
    p.add_argument("--infer-depth", type=int, default=25)
    p.add_argument("--strategy", default="rqd")
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=0)
    p.add_argument("--aggregation", default=None)
    p.add_argument("--inference-order", default="auto")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="apply a trained checkpoint")
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--queries")
    p.add_argument("--docs")
    p.add_argument("--out")
    p.add_argument("--aggregation")
    p.add_argument("--group-size", type=int, default=0)
    p.add_argument("--infer-depth", type=int, default=0)
    p.add_argument("--inference-order", default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser(
        "evaluate", help="correlations (and t-tests) for prediction files"
    )
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("experiment", help="full repeated 2-fold protocol")
    p.add_argument("--config")
    p.add_argument("--dump-config")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("sweep", help="repeat the experiment along one axis")
    p.add_argument("--config")
    p.add_argument("--axis", required=True)
    p.add_argument("--grid")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper())
        if not getattr(args, "func", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, IsADirectoryError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except QppError as e:
        # experiment failures carry their cause's category
        cause = e.__cause__
        code = 2 if isinstance(cause, DataError) else 3
        print(f"error: {e} ({cause})", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
