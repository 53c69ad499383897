from .index import DenseIndex, IndexFormatError, InvertedIndex, index_kind, search_dense, search_sparse
from .io import read_qrels, read_run, run_rankings, write_qrels, write_run
from .metrics import evaluate, mrr_at_k, ndcg_at_k, recall_at_k
from .sparse import SparseVector

__all__ = [
    "DenseIndex",
    "IndexFormatError",
    "InvertedIndex",
    "index_kind",
    "SparseVector",
    "evaluate",
    "mrr_at_k",
    "ndcg_at_k",
    "read_qrels",
    "read_run",
    "recall_at_k",
    "run_rankings",
    "search_dense",
    "search_sparse",
    "write_qrels",
    "write_run",
]
