"""Multi-layer navigable small-world index with inter-layer descent links.

Every node lives in exactly one layer (layer 0 = entities, upper layers =
community levels). Each layer is a flat neighborhood graph; each node of
layer i >= 1 additionally carries one link psi to a nearby node of layer
i - 1. A query enters at the top, and the best hit of each layer seeds the
search one layer down through psi, so lower layers start warm instead of
traversing from a random entry.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionMismatch, EmptyLayer, StartNotInLayer, ZeroVector
from . import kernels

METRIC = "unit_ip"  # d(x, q) = 1 - <x, q> on unit vectors


@dataclass
class LayerGraph:
    """One layer: ids ascending, float32 vectors, position-based adjacency."""

    node_ids: np.ndarray  # int64, strictly ascending
    vectors: np.ndarray  # float32 (n, d), unit rows
    adj: np.ndarray  # int64 (n, 2M), entries are positions
    deg: np.ndarray  # int64 (n,)

    @property
    def size(self) -> int:
        return int(self.node_ids.shape[0])

    def position_of(self, node_id: int) -> int:
        pos = int(np.searchsorted(self.node_ids, node_id))
        if pos >= self.size or int(self.node_ids[pos]) != node_id:
            raise StartNotInLayer(f"node {node_id} is not in this layer")
        return pos


class LayerScratch:
    """Reusable per-layer search buffers. Not safe to share across threads."""

    def __init__(self, n: int):
        self.visited = np.zeros(n, dtype=np.int64)
        self.stamp = 0
        self.cand_d = np.empty(n + 2, dtype=np.float64)
        self.cand_i = np.empty(n + 2, dtype=np.int64)
        self.res_d = np.empty(n + 2, dtype=np.float64)
        self.res_i = np.empty(n + 2, dtype=np.int64)
        self.out_d = np.empty(n + 2, dtype=np.float64)
        self.out_i = np.empty(n + 2, dtype=np.int64)


@dataclass
class SearchCounters:
    """Per-layer instrumentation for one or more searches."""

    dist_evals: dict[int, int] = field(default_factory=dict)
    millis: dict[int, float] = field(default_factory=dict)

    def add(self, layer: int, evals: int, ms: float = 0.0):
        self.dist_evals[layer] = self.dist_evals.get(layer, 0) + evals
        self.millis[layer] = self.millis.get(layer, 0.0) + ms

    @property
    def total_evals(self) -> int:
        return sum(self.dist_evals.values())


@dataclass
class SearchResult:
    """Ranked candidates per layer, ordered top layer first."""

    per_layer: list[tuple[int, list[tuple[int, float]]]]
    k: int

    def layer_hits(self, layer: int) -> list[tuple[int, float]]:
        for idx, hits in self.per_layer:
            if idx == layer:
                return hits
        raise KeyError(f"no results recorded for layer {layer}")


class ChnswIndex:
    def __init__(
        self,
        layers: list[LayerGraph],
        psi: list[np.ndarray],
        m: int,
        ef_construction: int,
        ef_search: int,
        seed: int,
        entry_point: int,
    ):
        self.layers = layers  # index 0 = bottom
        self.psi = psi  # psi[i]: positions into layer i-1; psi[0] is empty
        self.m = m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed
        self.entry_point = entry_point  # position in the top layer
        self._scratch: list[LayerScratch | None] = [None] * len(layers)

    # -- basic properties ------------------------------------------------------

    @property
    def top(self) -> int:
        return len(self.layers) - 1

    @property
    def dimension(self) -> int:
        return int(self.layers[0].vectors.shape[1])

    @property
    def layer_sizes(self) -> list[int]:
        return [layer.size for layer in self.layers]

    def make_scratch(self) -> list[LayerScratch]:
        """Fresh buffers for one thread of searches."""
        return [LayerScratch(layer.size) for layer in self.layers]

    def _shared_scratch(self, layer_index: int) -> LayerScratch:
        if self._scratch[layer_index] is None:
            self._scratch[layer_index] = LayerScratch(self.layers[layer_index].size)
        return self._scratch[layer_index]

    def psi_pairs(self) -> list[list[tuple[int, int]]]:
        """Inter-layer links as (node_id, target_id) per layer 1..top."""
        out: list[list[tuple[int, int]]] = []
        for i in range(1, len(self.layers)):
            upper, lower = self.layers[i], self.layers[i - 1]
            pairs = []
            for pos in range(upper.size):
                tgt = int(self.psi[i][pos])
                pairs.append(
                    (
                        int(upper.node_ids[pos]),
                        int(lower.node_ids[tgt]) if tgt >= 0 else -1,
                    )
                )
            out.append(pairs)
        return out

    def psi_total(self) -> bool:
        return all(
            int(self.psi[i].min(initial=0)) >= 0 for i in range(1, len(self.layers))
        )

    # -- searches ---------------------------------------------------------------

    def _check_query(self, q: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(q, dtype=np.float32)
        if q.ndim != 1 or q.shape[0] != self.dimension:
            raise DimensionMismatch(
                f"query has shape {q.shape}, index dimension is {self.dimension}"
            )
        return q

    def _search_raw(
        self,
        layer: LayerGraph,
        scratch: LayerScratch,
        q: np.ndarray,
        start_pos: int,
        beam: int,
    ) -> tuple[np.ndarray, np.ndarray, int]:
        return _raw_search(layer, scratch, q, start_pos, beam)

    def search_layer(
        self,
        layer_index: int,
        q: np.ndarray,
        start_id: int,
        k: int,
        ef: int | None = None,
        counters: SearchCounters | None = None,
        scratch: list[LayerScratch] | None = None,
    ) -> list[tuple[int, float]]:
        """Greedy beam search within one layer from an explicit start node.

        The traversal keeps max(ef, k) candidates and returns the k nearest,
        ascending by (distance, node id). k larger than the layer returns the
        whole layer.
        """
        if not 0 <= layer_index < len(self.layers):
            raise IndexError(f"layer {layer_index} out of range")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._check_query(q)
        layer = self.layers[layer_index]
        start_pos = layer.position_of(start_id)
        beam = max(ef if ef is not None else self.ef_search, k)
        sc = scratch[layer_index] if scratch is not None else self._shared_scratch(layer_index)
        t0 = time.perf_counter()
        positions, dists, evals = self._search_raw(layer, sc, q, start_pos, beam)
        if counters is not None:
            counters.add(layer_index, evals, (time.perf_counter() - t0) * 1000.0)
        take = min(k, positions.shape[0])
        return [
            (int(layer.node_ids[positions[t]]), float(dists[t])) for t in range(take)
        ]

    def hierarchical_search(
        self,
        q: np.ndarray,
        k: int = 5,
        ef: int | None = None,
        counters: SearchCounters | None = None,
        scratch: list[LayerScratch] | None = None,
    ) -> SearchResult:
        """Top-down search: each layer's best hit seeds the next through psi.

        Each per-layer pass keeps a result set of size k, so the work per layer
        stays proportional to k rather than ef_search. Pass ef to widen the
        beam when higher per-layer recall matters more than latency.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self._check_query(q)
        beam = max(ef, k) if ef is not None else k
        start = self.entry_point
        per_layer: list[tuple[int, list[tuple[int, float]]]] = []
        for li in range(self.top, -1, -1):
            layer = self.layers[li]
            sc = scratch[li] if scratch is not None else self._shared_scratch(li)
            t0 = time.perf_counter()
            positions, dists, evals = self._search_raw(layer, sc, q, start, beam)
            if counters is not None:
                counters.add(li, evals, (time.perf_counter() - t0) * 1000.0)
            take = min(k, positions.shape[0])
            per_layer.append(
                (
                    li,
                    [
                        (int(layer.node_ids[positions[t]]), float(dists[t]))
                        for t in range(take)
                    ],
                )
            )
            if li > 0:
                start = int(self.psi[li][int(positions[0])])
        return SearchResult(per_layer=per_layer, k=k)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _prepare_layer(ids, vectors, max_deg: int) -> LayerGraph:
    node_ids = np.ascontiguousarray(ids, dtype=np.int64)
    if node_ids.ndim != 1 or node_ids.size == 0:
        raise EmptyLayer("every index layer needs at least one node")
    if node_ids.size > 1 and not np.all(np.diff(node_ids) > 0):
        order = np.argsort(node_ids, kind="stable")
        node_ids = node_ids[order]
        vectors = np.asarray(vectors)[order]
        if not np.all(np.diff(node_ids) > 0):
            raise ValueError("layer node ids must be unique")
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] != node_ids.size:
        raise DimensionMismatch(
            f"layer has {node_ids.size} ids but vector block {vectors.shape}"
        )
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector("layer contains a zero vector")
    vectors = np.ascontiguousarray(
        (vectors.astype(np.float64) / norms[:, None]).astype(np.float32)
    )
    n = node_ids.size
    return LayerGraph(
        node_ids=node_ids,
        vectors=vectors,
        adj=np.zeros((n, max_deg), dtype=np.int64),
        deg=np.zeros(n, dtype=np.int64),
    )


def exact_nn_positions(queries: np.ndarray, base: np.ndarray, block: int = 1024) -> np.ndarray:
    """Exact nearest base position per query row; ties -> lowest position."""
    out = np.empty(queries.shape[0], dtype=np.int64)
    for lo in range(0, queries.shape[0], block):
        sims = queries[lo : lo + block].astype(np.float32) @ base.astype(np.float32).T
        out[lo : lo + block] = np.argmax(sims, axis=1)
    return out


def build_index(
    layer_data: list[tuple[np.ndarray, np.ndarray]],
    m: int = 32,
    ef_construction: int = 100,
    ef_search: int = 100,
    seed: int = 0,
) -> ChnswIndex:
    """Build the index from (ids, vectors) per layer, bottom first.

    Layers are populated top-down. Inserting v into layer i < top first runs
    the query-style descent down to layer i+1, widening the final leg to beam
    m; every upper candidate that search returns has its descent link updated
    to v when v is closer than the link's current target. The pre-update link
    of the nearest candidate seeds the layer-i search. Once the upper layer is
    no larger than m this saturates, so desk-scale descent links are exact.
    Layers whose size fits the degree cap are built as complete graphs, making
    greedy search on them exact. After a layer is finished, any node of the
    layer above still lacking a descent link gets its exact nearest neighbor.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if not layer_data:
        raise EmptyLayer("index needs at least one layer")
    max_deg = 2 * m
    layers = [_prepare_layer(ids, vecs, max_deg) for ids, vecs in layer_data]
    dims = {layer.vectors.shape[1] for layer in layers}
    if len(dims) != 1:
        raise DimensionMismatch(f"layers disagree on dimension: {sorted(dims)}")
    top = len(layers) - 1
    rng = np.random.default_rng(seed)
    beam = max(ef_construction, m)
    scratch = [LayerScratch(layer.size) for layer in layers]
    psi: list[np.ndarray] = [np.empty(0, dtype=np.int64)]
    psi.extend(np.full(layers[i].size, -1, dtype=np.int64) for i in range(1, top + 1))

    for li in range(top, -1, -1):
        layer = layers[li]
        sc = scratch[li]
        # Layers small enough to fit the degree cap are built complete, which
        # makes greedy search on them exact from any entry point.
        complete = layer.size - 1 <= max_deg
        if complete and layer.size > 1:
            all_pos = np.arange(layer.size, dtype=np.int64)
            for pos in range(layer.size):
                others = np.concatenate([all_pos[:pos], all_pos[pos + 1 :]])
                layer.adj[pos, : layer.size - 1] = others
            layer.deg[:] = layer.size - 1
        for pos in range(layer.size):
            q = layer.vectors[pos]
            entry: int | None = None
            if li < top:
                # Descend from the top to locate v's nearest nodes one layer up.
                s = int(rng.integers(0, layers[top].size))
                positions = dists = None
                for lj in range(top, li, -1):
                    upper = layers[lj]
                    width = 1 if lj - 1 > li else m
                    positions, dists, _ = _raw_search(upper, scratch[lj], q, s, width)
                    if lj - 1 > li:
                        s = int(psi[lj][int(positions[0])])
                upper = layers[li + 1]
                old_c = int(psi[li + 1][int(positions[0])])
                if old_c >= 0:
                    entry = old_c
                for ui in range(positions.shape[0]):
                    u = int(positions[ui])
                    old = int(psi[li + 1][u])
                    if old < 0 or float(dists[ui]) < float(
                        kernels._dist(layer.vectors, old, upper.vectors[u])
                    ):
                        psi[li + 1][u] = pos
            if complete or pos == 0:
                continue  # adjacency already final, or nothing to link to yet
            if entry is None or entry >= pos:
                entry = int(rng.integers(0, pos))
            positions, dists, _ = _raw_search(layer, sc, q, entry, beam)
            kernels.connect_node(
                layer.vectors,
                layer.adj,
                layer.deg,
                pos,
                np.ascontiguousarray(positions),
                np.ascontiguousarray(dists),
                positions.shape[0],
                m,
                max_deg,
            )
        if li < top:
            missing = np.flatnonzero(psi[li + 1] < 0)
            if missing.size:
                psi[li + 1][missing] = exact_nn_positions(
                    layers[li + 1].vectors[missing], layer.vectors
                )
    entry_point = int(rng.integers(0, layers[top].size))
    return ChnswIndex(
        layers=layers,
        psi=psi,
        m=m,
        ef_construction=ef_construction,
        ef_search=ef_search,
        seed=seed,
        entry_point=entry_point,
    )


def _raw_search(
    layer: LayerGraph, scratch: LayerScratch, q: np.ndarray, start_pos: int, beam: int
) -> tuple[np.ndarray, np.ndarray, int]:
    scratch.stamp += 1
    count, evals = kernels.search_layer(
        layer.vectors,
        layer.adj,
        layer.deg,
        q,
        start_pos,
        beam,
        scratch.visited,
        scratch.stamp,
        scratch.cand_d,
        scratch.cand_i,
        scratch.res_d,
        scratch.res_i,
        scratch.out_d,
        scratch.out_i,
    )
    return scratch.out_i[:count], scratch.out_d[:count], evals


def build_index_from_tree(tree, kg, m=32, ef_construction=100, ef_search=100, seed=0):
    """Assemble layer data from a knowledge graph + community hierarchy."""
    layer_data: list[tuple[np.ndarray, np.ndarray]] = [
        (
            np.asarray([e.entity_id for e in kg.entities], dtype=np.int64),
            kg.vectors,
        )
    ]
    for level in range(1, tree.depth + 1):
        ids = np.asarray(tree.layers[level], dtype=np.int64)
        layer_data.append((ids, tree.community_vectors(level)))
    return build_index(
        layer_data, m=m, ef_construction=ef_construction, ef_search=ef_search, seed=seed
    )
