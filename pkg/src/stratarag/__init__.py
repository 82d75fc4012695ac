"""Graph-indexed retrieval-augmented generation.

Builds a knowledge graph from a corpus, detects a hierarchy of attributed
communities over it, indexes every layer in one navigable small-world
structure, and answers questions by searching all layers at once.
"""

from .chnsw import (
    ChnswIndex,
    SearchCounters,
    SearchResult,
    build_index,
    build_index_from_tree,
    load_index,
    save_index,
)
from .cluster import (
    AttributedCommunity,
    ClusterParams,
    HierarchyTree,
    hierarchical_cluster,
    load_hierarchy,
    save_hierarchy,
)
from .config import RunConfig, load_config, make_gateway
from .gateway import (
    ChatRequest,
    ChatResult,
    EmbeddingVector,
    HttpGateway,
    LlmGateway,
    MockGateway,
    TokenUsage,
)
from .kg import KnowledgeGraph, build_kg, chunk_corpus, load_kg, read_corpus, save_kg
from .pipeline import BuildPipeline, run_build
from .query import Answer, QueryEngine, load_engine

__version__ = "0.1.0"

__all__ = [
    "Answer",
    "AttributedCommunity",
    "BuildPipeline",
    "ChatRequest",
    "ChatResult",
    "ChnswIndex",
    "ClusterParams",
    "EmbeddingVector",
    "HierarchyTree",
    "HttpGateway",
    "KnowledgeGraph",
    "LlmGateway",
    "MockGateway",
    "QueryEngine",
    "RunConfig",
    "SearchCounters",
    "SearchResult",
    "TokenUsage",
    "build_index",
    "build_index_from_tree",
    "build_kg",
    "chunk_corpus",
    "hierarchical_cluster",
    "load_config",
    "load_engine",
    "load_hierarchy",
    "load_index",
    "load_kg",
    "make_gateway",
    "read_corpus",
    "run_build",
    "save_hierarchy",
    "save_index",
    "save_kg",
    "__version__",
]
