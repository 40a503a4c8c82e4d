"""Query performance prediction workbench.

Score-distribution baselines, a groupwise self-attention predictor
trained over ordered groups of (query, document) pair embeddings, and a
repeated 2-fold correlation evaluation protocol with significance tests.
"""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    PairEmbedding,
    PairEmbeddingStore,
    Qrels,
    QueryRecord,
    RetrievalRun,
    load_embeddings,
    parse_qrels,
    parse_run,
    save_embeddings,
    select_top_passage,
    slice_passages,
    tokenize,
)
from .metrics import (  # noqa: E402
    average_precision,
    kendall_tau_b,
    make_splits,
    paired_t_test,
    pearson,
    precision_at_k,
)
from .baselines import (  # noqa: E402
    InterpolationConfig,
    ScoreListContext,
    interpolate,
    n_sigma_x,
    nqc,
    predict_baseline,
    sigma_k,
    smv,
    wig,
)
from .autodiff import (  # noqa: E402
    AdamState,
    Tape,
    Tensor,
    adam_step,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from .grouping import Group, GroupingStrategy, build_groups, pad_group  # noqa: E402
from .model import (  # noqa: E402
    Aggregation,
    EncoderSource,
    StoreSource,
    TrainConfig,
    aggregate,
    fit,
    forward,
    init_encoder,
    init_predictor,
    mse_loss,
    predict_all,
    predict_query,
    toy_encode,
    train,
)
from .experiment import (  # noqa: E402
    ExperimentConfig,
    compute_labels,
    run_experiment,
    sweep,
)

__all__ = [
    "__version__",
    "PairEmbedding",
    "PairEmbeddingStore",
    "Qrels",
    "QueryRecord",
    "RetrievalRun",
    "load_embeddings",
    "parse_qrels",
    "parse_run",
    "save_embeddings",
    "select_top_passage",
    "slice_passages",
    "tokenize",
    "average_precision",
    "kendall_tau_b",
    "make_splits",
    "paired_t_test",
    "pearson",
    "precision_at_k",
    "InterpolationConfig",
    "ScoreListContext",
    "interpolate",
    "n_sigma_x",
    "nqc",
    "predict_baseline",
    "sigma_k",
    "smv",
    "wig",
    "AdamState",
    "Tape",
    "Tensor",
    "adam_step",
    "grad_check",
    "load_checkpoint",
    "save_checkpoint",
    "Group",
    "GroupingStrategy",
    "build_groups",
    "pad_group",
    "Aggregation",
    "EncoderSource",
    "StoreSource",
    "TrainConfig",
    "aggregate",
    "fit",
    "forward",
    "init_encoder",
    "init_predictor",
    "mse_loss",
    "predict_all",
    "predict_query",
    "toy_encode",
    "train",
    "ExperimentConfig",
    "compute_labels",
    "run_experiment",
    "sweep",
]
