"""Evaluation and benchmarking: QA metrics, cluster-quality metrics, synthetic
hierarchies, a conventional per-layer HNSW baseline, and the benchmark runner
that compares it against the multi-layer index on instrumented distance counts.
"""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chnsw import ChnswIndex, SearchCounters, build_index
from .chnsw.index import LayerGraph, LayerScratch, _raw_search
from .chnsw import kernels
from .cluster import Edge, WeightedGraph
from .text import canonical_text, word_tokens
from .errors import ConfigError, DegenerateDispersion, SingleCluster, ZeroVector

# ---------------------------------------------------------------------------
# QA metrics
# ---------------------------------------------------------------------------


def qa_accuracy(gold: str, generated: str) -> float:
    """1.0 when the canonicalized gold string occurs in the canonicalized
    generated text, else 0.0."""
    gold_c = canonical_text(gold)
    if not gold_c:
        return 0.0
    return 1.0 if gold_c in canonical_text(generated) else 0.0


def qa_recall(gold: str, generated: str) -> float:
    """Token-set overlap |gold & generated| / |gold|.

    Forced to 0.0 whenever either side contains a standalone "yes" or "no";
    overlap arithmetic on polar answers rewards the wrong thing.
    """
    gold_tokens = set(word_tokens(gold))
    gen_tokens = set(word_tokens(generated))
    if not gold_tokens:
        return 0.0
    polar = {"yes", "no"}
    if (gold_tokens & polar) or (gen_tokens & polar):
        return 0.0
    return len(gold_tokens & gen_tokens) / len(gold_tokens)


# ---------------------------------------------------------------------------
# Cluster-quality metrics
# ---------------------------------------------------------------------------


def _grouped(X: np.ndarray, labels) -> list[np.ndarray]:
    labels = np.asarray(labels)
    if labels.shape[0] != X.shape[0]:
        raise ValueError("labels and rows disagree in length")
    groups = []
    for lab in sorted(set(labels.tolist())):
        groups.append(np.flatnonzero(labels == lab))
    return groups


def calinski_harabasz(X: np.ndarray, labels) -> float:
    """Between/within dispersion ratio scaled by (N-C)/(C-1)."""
    X = np.asarray(X, dtype=np.float64)
    groups = _grouped(X, labels)
    n, c = X.shape[0], len(groups)
    if c < 2:
        raise SingleCluster("dispersion ratio needs at least two clusters")
    overall = X.mean(axis=0)
    between = 0.0
    within = 0.0
    for idx in groups:
        centroid = X[idx].mean(axis=0)
        between += idx.size * float(np.sum((centroid - overall) ** 2))
        within += float(np.sum((X[idx] - centroid) ** 2))
    if within == 0.0:
        raise DegenerateDispersion("zero within-cluster dispersion")
    return (n - c) / (c - 1) * between / within


def mean_cosine_sim(X: np.ndarray, labels) -> float:
    """Average cosine between each point and its cluster centroid."""
    X = np.asarray(X, dtype=np.float64)
    groups = _grouped(X, labels)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVector("a point has zero norm")
    total = 0.0
    for idx in groups:
        centroid = X[idx].mean(axis=0)
        c_norm = float(np.linalg.norm(centroid))
        if c_norm == 0.0:
            raise ZeroVector("a cluster centroid has zero norm")
        total += float(np.sum((X[idx] @ centroid) / (norms[idx] * c_norm)))
    return total / X.shape[0]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticHierarchy:
    layer_sizes: list[int]  # bottom first
    dimension: int
    seed: int
    divisors: list[int]
    vectors: list[np.ndarray]  # unit float32, bottom first

    def layer_data(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (np.arange(v.shape[0], dtype=np.int64), v) for v in self.vectors
        ]


def _unit_uniform(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    vecs = rng.uniform(-1.0, 1.0, size=(n, dim))
    norms = np.linalg.norm(vecs, axis=1)
    zero = norms == 0.0
    if np.any(zero):  # probability ~0; keep the generator total
        vecs[zero, 0] = 1.0
        norms[zero] = 1.0
    return (vecs / norms[:, None]).astype(np.float32)


def gen_synthetic_hierarchy(
    bottom_size: int,
    dimension: int,
    seed: int = 0,
    max_layers: int | None = None,
    divisor_chooser=None,
) -> SyntheticHierarchy:
    """Layer sizes fall by a seeded divisor of 3 or 4 per step; the first size
    below 8 is kept as the top. `max_layers` caps the count for benchmarks,
    `divisor_chooser(step) -> int` pins divisors for tests."""
    if bottom_size < 1:
        raise ValueError("bottom_size must be >= 1")
    if dimension < 1:
        raise ValueError("dimension must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = [bottom_size]
    divisors: list[int] = []
    while sizes[-1] >= 8 and (max_layers is None or len(sizes) < max_layers):
        div = int(divisor_chooser(len(divisors))) if divisor_chooser else int(rng.integers(3, 5))
        if div not in (3, 4):
            raise ValueError("divisors must be 3 or 4")
        divisors.append(div)
        sizes.append(sizes[-1] // div)
    vectors = [_unit_uniform(rng, n, dimension) for n in sizes]
    return SyntheticHierarchy(
        layer_sizes=sizes,
        dimension=dimension,
        seed=seed,
        divisors=divisors,
        vectors=vectors,
    )


def gen_queries(
    base: np.ndarray, count: int, seed: int, mix: float = 0.5
) -> np.ndarray:
    """Benchmark queries: a seeded pick of a stored vector blended with a
    fresh uniform direction, then renormalized. This mirrors the engine's
    workload, where a question embedding lands near stored embeddings without
    duplicating any of them; independent uniform draws would instead measure
    the intrinsic hardness of random directions."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not 0.0 <= mix < 1.0:
        raise ValueError("mix must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, base.shape[0], size=count)
    noise = _unit_uniform(rng, count, base.shape[1]).astype(np.float64)
    q = base[picks].astype(np.float64) + mix * noise
    q /= np.linalg.norm(q, axis=1)[:, None]
    return q.astype(np.float32)


def exact_knn(base: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force top-k by 1 - <x, q>, float64, ties toward the lower id.
    Returns (ids (m, k), dists (m, k))."""
    base64 = np.asarray(base, dtype=np.float64)
    q64 = np.asarray(queries, dtype=np.float64)
    k = min(k, base64.shape[0])
    ids = np.empty((q64.shape[0], k), dtype=np.int64)
    dists = np.empty((q64.shape[0], k), dtype=np.float64)
    block = max(1, int(2e7) // max(base64.shape[0], 1))
    for lo in range(0, q64.shape[0], block):
        d = 1.0 - q64[lo : lo + block] @ base64.T
        for r in range(d.shape[0]):
            order = np.argsort(d[r], kind="stable")[:k]
            ids[lo + r] = order
            dists[lo + r] = d[r][order]
    return ids, dists


def gen_planted_graph(
    seed: int,
    groups: int = 2,
    subgroups: int = 2,
    per_subgroup: int = 6,
    dimension: int = 16,
    noise: float = 0.05,
    bridges: int = 2,
) -> tuple[WeightedGraph, np.ndarray]:
    """Structure/attribute tension fixture: `groups` dense structural blocks,
    each containing `subgroups` embedding-cohesive subgroups around mutually
    orthogonal directions. Returns the graph and the subgroup labels."""
    total_sub = groups * subgroups
    if dimension < total_sub:
        raise ValueError("dimension must cover one axis per subgroup")
    rng = np.random.default_rng(seed)
    n = groups * subgroups * per_subgroup
    vectors = np.zeros((n, dimension), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for g in range(groups):
        for s in range(subgroups):
            sub = g * subgroups + s
            base = np.zeros(dimension)
            base[sub] = 1.0
            for t in range(per_subgroup):
                row = sub * per_subgroup + t
                vec = base + noise * rng.standard_normal(dimension)
                vectors[row] = vec / np.linalg.norm(vec)
                labels[row] = sub
    edges: dict[tuple[int, int], Edge] = {}
    block = subgroups * per_subgroup
    for g in range(groups):
        members = range(g * block, (g + 1) * block)
        for u in members:
            for v in members:
                if u < v:
                    edges[(u, v)] = Edge(weight=1.0, augmented=False)
    for b in range(bridges):  # sparse ties between structural blocks
        for g in range(groups - 1):
            u = g * block + b
            v = (g + 1) * block + b
            edges[(min(u, v), max(u, v))] = Edge(weight=1.0, augmented=False)
    graph = WeightedGraph(
        node_ids=list(range(n)), vectors=vectors.astype(np.float32), edges=edges
    )
    return graph, labels


# ---------------------------------------------------------------------------
# Per-layer flat HNSW baseline
# ---------------------------------------------------------------------------


class BaselineHnsw:
    """A conventional HNSW over one vector set: every node enters level 0,
    levels above are sampled with multiplier 1/ln(M), and a query descends the
    internal hierarchy greedily before the beam search at level 0. Used as the
    per-layer baseline the multi-layer index is compared against."""

    def __init__(
        self, vectors: np.ndarray, m: int = 32, ef_construction: int = 100, seed: int = 0
    ):
        self.m = m
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        n = vectors.shape[0]
        rng = np.random.default_rng(seed)
        ml = 1.0 / math.log(m) if m > 1 else 1.0
        uniform = rng.uniform(1e-12, 1.0, size=n)
        node_levels = np.floor(-np.log(uniform) * ml).astype(np.int64)
        self.max_level = int(node_levels.max(initial=0))
        self.node_levels = node_levels
        # Level 0 holds everyone; upper levels hold sampled subsets.
        self.levels: list[LayerGraph] = []
        self.members: list[np.ndarray] = []
        for lv in range(self.max_level + 1):
            members = np.flatnonzero(node_levels >= lv).astype(np.int64)
            level_vecs = vectors if lv == 0 else np.ascontiguousarray(vectors[members])
            max_deg = 2 * m if lv == 0 else m
            self.levels.append(
                LayerGraph(
                    node_ids=members,
                    vectors=level_vecs,
                    adj=np.zeros((members.size, max_deg), dtype=np.int64),
                    deg=np.zeros(members.size, dtype=np.int64),
                )
            )
            self.members.append(members)
        self._build(vectors, ef_construction, rng)

    def _local(self, lv: int, node: int) -> int:
        return int(np.searchsorted(self.members[lv], node))

    def _build(self, vectors: np.ndarray, ef_construction: int, rng) -> None:
        beam = max(ef_construction, self.m)
        scratch = [LayerScratch(g.size) for g in self.levels]
        inserted_top = -1  # highest level among inserted nodes
        entry = -1  # global id of the current entry point
        for v in range(vectors.shape[0]):
            lv = int(self.node_levels[v])
            q = vectors[v]
            if entry < 0:
                inserted_top, entry = lv, v
                continue
            cur = entry
            for level in range(inserted_top, lv, -1):
                g = self.levels[level]
                pos, _, _ = kernels.greedy_descend(
                    g.vectors, g.adj, g.deg, q, self._local(level, cur)
                )
                cur = int(g.node_ids[pos])
            for level in range(min(lv, inserted_top), -1, -1):
                g = self.levels[level]
                positions, dists, _ = _raw_search(
                    g, scratch[level], q, self._local(level, cur), beam
                )
                kernels.connect_node(
                    g.vectors,
                    g.adj,
                    g.deg,
                    self._local(level, v),
                    np.ascontiguousarray(positions),
                    np.ascontiguousarray(dists),
                    positions.shape[0],
                    self.m,
                    g.adj.shape[1],
                )
                cur = int(g.node_ids[positions[0]])
            if lv > inserted_top:
                inserted_top, entry = lv, v
        self.entry = entry

    def make_scratch(self) -> list[LayerScratch]:
        return [LayerScratch(g.size) for g in self.levels]

    def search(
        self,
        q: np.ndarray,
        k: int,
        ef: int,
        scratch: list[LayerScratch] | None = None,
    ) -> tuple[np.ndarray, np.ndarray, int]:
        """Returns (ids, dists, distance_evals) for the k nearest."""
        q = np.ascontiguousarray(q, dtype=np.float32)
        scratch = scratch if scratch is not None else self._default_scratch()
        evals = 0
        cur = self.entry
        for level in range(self.max_level, 0, -1):
            g = self.levels[level]
            pos, _, e = kernels.greedy_descend(
                g.vectors, g.adj, g.deg, q, self._local(level, cur)
            )
            evals += e
            cur = int(g.node_ids[pos])
        g = self.levels[0]
        positions, dists, e = _raw_search(g, scratch[0], q, cur, max(ef, k))
        evals += e
        take = min(k, positions.shape[0])
        return positions[:take].copy(), dists[:take].copy(), evals

    def _default_scratch(self) -> list[LayerScratch]:
        if not hasattr(self, "_scratch"):
            self._scratch = self.make_scratch()
        return self._scratch


# ---------------------------------------------------------------------------
# Benchmark runner
# ---------------------------------------------------------------------------


@dataclass
class BenchConfig:
    bottom_size: int = 100_000
    dimension: int = 256
    max_layers: int = 5
    queries: int = 200
    k: int = 5
    m: int = 32
    ef_construction: int = 100
    ef_search: int = 100
    seed: int = 0
    workers: int = 1


@dataclass
class BenchRow:
    layer: str  # "0".."L" or "all"
    system: str  # "chnsw" or "base_hnsw"
    queries: int
    mean_ms: float
    dist_evals: float  # mean per query (summed over layers for "all")
    recall: float


@dataclass
class BenchReport:
    config: BenchConfig
    layer_sizes: list[int]
    rows: list[BenchRow] = field(default_factory=list)

    def row(self, layer: str, system: str) -> BenchRow:
        for r in self.rows:
            if r.layer == layer and r.system == system:
                return r
        raise KeyError((layer, system))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "system", "queries", "mean_ms", "dist_evals", "recall"])
        for r in self.rows:
            writer.writerow(
                [
                    r.layer,
                    r.system,
                    r.queries,
                    f"{r.mean_ms:.4f}",
                    f"{r.dist_evals:.2f}",
                    f"{r.recall:.4f}",
                ]
            )
        return buf.getvalue()


def run_benchmark(cfg: BenchConfig | None = None, progress=None) -> BenchReport:
    """Build both systems over one synthetic hierarchy and measure per-layer
    recall, latency, and exact distance-evaluation counts on shared queries."""
    cfg = cfg or BenchConfig()
    for name in (
        "bottom_size",
        "dimension",
        "max_layers",
        "queries",
        "k",
        "m",
        "ef_construction",
        "ef_search",
        "workers",
    ):
        value = getattr(cfg, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    say = progress if progress is not None else (lambda msg: None)
    synth = gen_synthetic_hierarchy(
        cfg.bottom_size, cfg.dimension, seed=cfg.seed, max_layers=cfg.max_layers
    )
    say(f"synthetic hierarchy layers: {synth.layer_sizes}")
    queries = gen_queries(synth.vectors[0], cfg.queries, seed=cfg.seed + 1)
    n_layers = len(synth.layer_sizes)

    say("building multi-layer index")
    index = build_index(
        synth.layer_data(),
        m=cfg.m,
        ef_construction=cfg.ef_construction,
        ef_search=cfg.ef_search,
        seed=cfg.seed,
    )
    say("building per-layer baseline indexes")
    baselines = [
        BaselineHnsw(vecs, m=cfg.m, ef_construction=cfg.ef_construction, seed=cfg.seed + li)
        for li, vecs in enumerate(synth.vectors)
    ]

    say("computing exact ground truth")
    truth = [exact_knn(vecs, queries, cfg.k)[0] for vecs in synth.vectors]

    # --- multi-layer system ---------------------------------------------------
    ch_evals = np.zeros((cfg.queries, n_layers), dtype=np.int64)
    ch_ms = np.zeros((cfg.queries, n_layers), dtype=np.float64)
    ch_hits = np.zeros((cfg.queries, n_layers), dtype=np.float64)

    def run_chnsw(qi: int, scratch) -> None:
        counters = SearchCounters()
        result = index.hierarchical_search(
            queries[qi], k=cfg.k, counters=counters, scratch=scratch
        )
        for li, hits in result.per_layer:
            got = {node_id for node_id, _ in hits}
            ch_hits[qi, li] = len(got & set(truth[li][qi].tolist())) / cfg.k
            ch_evals[qi, li] = counters.dist_evals[li]
            ch_ms[qi, li] = counters.millis[li]

    # --- baseline ----------------------------------------------------------------
    bh_evals = np.zeros((cfg.queries, n_layers), dtype=np.int64)
    bh_ms = np.zeros((cfg.queries, n_layers), dtype=np.float64)
    bh_hits = np.zeros((cfg.queries, n_layers), dtype=np.float64)

    def run_base(qi: int, scratches) -> None:
        for li, baseline in enumerate(baselines):
            t0 = time.perf_counter()
            ids, _, evals = baseline.search(
                queries[qi], k=cfg.k, ef=cfg.ef_search, scratch=scratches[li]
            )
            bh_ms[qi, li] = (time.perf_counter() - t0) * 1000.0
            bh_evals[qi, li] = evals
            got = set(ids.tolist())
            bh_hits[qi, li] = len(got & set(truth[li][qi].tolist())) / cfg.k

    say("running queries")
    if cfg.workers > 1:
        def chnsw_block(bounds):
            lo, hi = bounds
            scratch = index.make_scratch()
            for qi in range(lo, hi):
                run_chnsw(qi, scratch)

        def base_block(bounds):
            lo, hi = bounds
            scratches = [b.make_scratch() for b in baselines]
            for qi in range(lo, hi):
                run_base(qi, scratches)

        step = math.ceil(cfg.queries / cfg.workers)
        blocks = [(lo, min(lo + step, cfg.queries)) for lo in range(0, cfg.queries, step)]
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(chnsw_block, blocks))
            list(pool.map(base_block, blocks))
    else:
        scratch = index.make_scratch()
        base_scratches = [b.make_scratch() for b in baselines]
        for qi in range(cfg.queries):
            run_chnsw(qi, scratch)
            run_base(qi, base_scratches)

    report = BenchReport(config=cfg, layer_sizes=synth.layer_sizes)
    for li in range(n_layers):
        report.rows.append(
            BenchRow(
                layer=str(li),
                system="chnsw",
                queries=cfg.queries,
                mean_ms=float(ch_ms[:, li].mean()),
                dist_evals=float(ch_evals[:, li].mean()),
                recall=float(ch_hits[:, li].mean()),
            )
        )
        report.rows.append(
            BenchRow(
                layer=str(li),
                system="base_hnsw",
                queries=cfg.queries,
                mean_ms=float(bh_ms[:, li].mean()),
                dist_evals=float(bh_evals[:, li].mean()),
                recall=float(bh_hits[:, li].mean()),
            )
        )
    report.rows.append(
        BenchRow(
            layer="all",
            system="chnsw",
            queries=cfg.queries,
            mean_ms=float(ch_ms.sum(axis=1).mean()),
            dist_evals=float(ch_evals.sum(axis=1).mean()),
            recall=float(ch_hits.mean()),
        )
    )
    report.rows.append(
        BenchRow(
            layer="all",
            system="base_hnsw",
            queries=cfg.queries,
            mean_ms=float(bh_ms.sum(axis=1).mean()),
            dist_evals=float(bh_evals.sum(axis=1).mean()),
            recall=float(bh_hits.mean()),
        )
    )
    return report


def plot_benchmark(report: BenchReport, path) -> None:
    """Write one SVG: per-layer distance evaluations and recall, both systems."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    layers = [r.layer for r in report.rows if r.system == "chnsw" and r.layer != "all"]
    x = np.arange(len(layers))
    ch = [report.row(l, "chnsw") for l in layers]
    bh = [report.row(l, "base_hnsw") for l in layers]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    width = 0.38
    ax1.bar(x - width / 2, [r.dist_evals for r in ch], width, label="chnsw")
    ax1.bar(x + width / 2, [r.dist_evals for r in bh], width, label="base_hnsw")
    ax1.set_xticks(x, layers)
    ax1.set_xlabel("layer")
    ax1.set_ylabel("mean distance evals / query")
    ax1.legend()
    ax2.plot(x, [r.recall for r in ch], marker="o", label="chnsw")
    ax2.plot(x, [r.recall for r in bh], marker="s", label="base_hnsw")
    ax2.set_xticks(x, layers)
    ax2.set_xlabel("layer")
    ax2.set_ylabel(f"recall@{report.config.k}")
    ax2.set_ylim(0.0, 1.05)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
