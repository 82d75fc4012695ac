"""Multi-layer vector index: construction, search, persistence."""

from .index import (
    ChnswIndex,
    LayerGraph,
    LayerScratch,
    SearchCounters,
    SearchResult,
    build_index,
    build_index_from_tree,
    exact_nn_positions,
)
from .io import FORMAT_VERSION, load_index, save_index

__all__ = [
    "ChnswIndex",
    "LayerGraph",
    "LayerScratch",
    "SearchCounters",
    "SearchResult",
    "build_index",
    "build_index_from_tree",
    "exact_nn_positions",
    "FORMAT_VERSION",
    "load_index",
    "save_index",
]
