import pytest
import torch
from transformers import BertConfig, BertForSequenceClassification, BertTokenizer

QUERIES = {
    "q1": "coffee export trade",
    "q2": "market growth rate",
}

DOCS = {
    "d1": "coffee export prices rise as trade volumes grow",
    "d2": "alpha beta gamma delta news report about coffee",
    "d3": "market growth rate slows while export trade holds",
    "d4": "news about market price growth and trade rate",
    "d5": "coffee trade " * 15,
}

RUN_LINES = [
    "q1 Q0 d1 1 9.0 t",
    "q1 Q0 d2 2 8.0 t",
    "q1 Q0 d3 3 7.0 t",
    "q2 Q0 d3 1 5.0 t",
    "q2 Q0 d4 2 4.5 t",
    "q2 Q0 d5 3 4.0 t",
]

_WORDS = sorted(
    {w for text in DOCS.values() for w in text.split()}
    | {w for text in QUERIES.values() for w in text.split()}
)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    d = tmp_path_factory.mktemp("ckpt")
    vocab = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + _WORDS
    (d / "vocab.txt").write_text("\n".join(vocab) + "\n")
    cfg = BertConfig(
        vocab_size=len(vocab),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
        num_labels=2,
    )
    torch.manual_seed(7)
    model = BertForSequenceClassification(cfg)
    model.save_pretrained(d)
    BertTokenizer(str(d / "vocab.txt")).save_pretrained(d)
    return str(d)


@pytest.fixture(scope="session")
def corpus_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    run = d / "run.txt"
    run.write_text("\n".join(RUN_LINES) + "\n")
    queries = d / "queries.tsv"
    queries.write_text(
        "".join(f"{q}\t{t}\n" for q, t in QUERIES.items())
    )
    docs = d / "docs.tsv"
    docs.write_text("".join(f"{k}\t{t}\n" for k, t in DOCS.items()))
    return {"run": str(run), "queries": str(queries), "corpus": str(docs)}
