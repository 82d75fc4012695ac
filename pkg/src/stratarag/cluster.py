"""Attributed hierarchical clustering over the knowledge graph.

Each round augments the current graph with embedding-KNN edges, re-weights
every edge from embedding cosine, clusters with a weighted community backend,
summarizes each community with one LLM call, and lifts the result into a
smaller community graph. Rounds stop when the graph is too small, the layer
cap is reached, or everything collapses into one community.

Both clustering backends are implemented here rather than taken from a graph
library: community assignment must be bit-for-bit reproducible under a fixed
seed, with equal-gain ties always resolved toward the community holding the
lowest original node id.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingEmbedding, NetworkError, MalformedResponse, BudgetExceeded
from .gateway import ChatRequest, LlmGateway
from .kg import KnowledgeGraph
from .prompts import load_template, render

log = logging.getLogger(__name__)

BACKENDS = ("weighted_leiden", "label_propagation")
WEIGHT_POLICIES = ("affinity", "distance")
_DETAIL_CAP = 600  # chars per member detail line in the summary prompt


@dataclass
class Edge:
    weight: float
    augmented: bool  # False for edges present before KNN augmentation


@dataclass
class WeightedGraph:
    """Undirected attributed graph: nodes carry embeddings, edges carry weights."""

    node_ids: list[int]  # ascending
    vectors: np.ndarray  # float32, row i embeds node_ids[i]
    edges: dict[tuple[int, int], Edge] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.node_ids) != self.vectors.shape[0]:
            raise MissingEmbedding(
                f"{len(self.node_ids)} nodes but {self.vectors.shape[0]} embedding rows"
            )

    @property
    def index_of(self) -> dict[int, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    def average_degree(self) -> float:
        if not self.node_ids:
            return 0.0
        return 2.0 * len(self.edges) / len(self.node_ids)

    def neighbor_map(self) -> dict[int, dict[int, float]]:
        adj: dict[int, dict[int, float]] = {nid: {} for nid in self.node_ids}
        for (u, v), edge in self.edges.items():
            adj[u][v] = edge.weight
            adj[v][u] = edge.weight
        return adj


@dataclass
class AttributedCommunity:
    community_id: int
    layer: int  # 1-based; layer 0 is the entity layer
    members: list[int]  # entity ids (layer 1) or community ids (layer > 1)
    summary: str
    embedding: np.ndarray  # unit float32, the embedding of the summary text
    parent: int | None = None


@dataclass
class HierarchyTree:
    """layers[0] holds entity ids; layers[l >= 1] hold community ids."""

    layers: list[list[int]]
    communities: dict[int, AttributedCommunity]

    @property
    def depth(self) -> int:
        """Number of community layers (0 when clustering never ran)."""
        return len(self.layers) - 1

    def community_vectors(self, layer: int) -> np.ndarray:
        return np.stack(
            [self.communities[cid].embedding for cid in self.layers[layer]]
        ).astype(np.float32)


@dataclass
class ClusterParams:
    max_layers: int = 3
    min_nodes: int = 10
    knn_k: int | None = None  # None: round(average degree) of the input graph
    similarity_floor: float = 0.0
    weight_policy: str = "affinity"
    backend: str = "weighted_leiden"
    resolution: float = 1.0
    seed: int = 0
    workers: int = 10

    def __post_init__(self):
        if self.max_layers < 1:
            raise ValueError("max_layers must be >= 1")
        if self.min_nodes < 1:
            raise ValueError("min_nodes must be >= 1")
        if self.weight_policy not in WEIGHT_POLICIES:
            raise ValueError(f"weight_policy must be one of {WEIGHT_POLICIES}")
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")


# ---------------------------------------------------------------------------
# Graph construction, augmentation, weighting
# ---------------------------------------------------------------------------


def graph_from_kg(kg: KnowledgeGraph) -> WeightedGraph:
    """Entity graph: relation endpoints become undirected unit-weight edges."""
    node_ids = [e.entity_id for e in kg.entities]
    edges: dict[tuple[int, int], Edge] = {}
    for rel in kg.relations:
        key = (min(rel.head, rel.tail), max(rel.head, rel.tail))
        if key[0] != key[1] and key not in edges:
            edges[key] = Edge(weight=1.0, augmented=False)
    return WeightedGraph(node_ids=node_ids, vectors=kg.vectors, edges=edges)


def _unit_rows(graph: WeightedGraph) -> np.ndarray:
    if graph.vectors.size == 0 and graph.node_ids:
        raise MissingEmbedding("graph nodes have no embedding rows")
    norms = np.linalg.norm(graph.vectors, axis=1)
    if np.any(norms == 0):
        bad = graph.node_ids[int(np.argmin(norms))]
        raise MissingEmbedding(f"node {bad} has a zero embedding")
    return graph.vectors / norms[:, None]


def augment_knn(
    graph: WeightedGraph, k: int | None = None, floor: float = 0.0
) -> WeightedGraph:
    """Add embedding-KNN edges (flagged augmented) on top of the existing ones.

    k defaults to round(average degree), never below 1. An augmented edge is
    added only when cosine >= floor.
    """
    n = len(graph.node_ids)
    if k is None:
        k = max(1, round(graph.average_degree()))
    edges = {key: Edge(e.weight, e.augmented) for key, e in graph.edges.items()}
    if n > 1:
        unit = _unit_rows(graph)
        sims = unit @ unit.T
        np.fill_diagonal(sims, -np.inf)
        take = min(k, n - 1)
        for i, u in enumerate(graph.node_ids):
            # Top `take` neighbors; ties broken toward the lower node id.
            order = np.lexsort((graph.node_ids, -sims[i]))[:take]
            for j in order:
                cos = float(sims[i, j])
                if cos < floor:
                    break
                v = graph.node_ids[int(j)]
                key = (min(u, v), max(u, v))
                if key not in edges:
                    edges[key] = Edge(weight=cos, augmented=True)
    return WeightedGraph(node_ids=list(graph.node_ids), vectors=graph.vectors, edges=edges)


def weight_edges(graph: WeightedGraph, policy: str = "affinity") -> WeightedGraph:
    """Reweight every edge from endpoint cosine.

    affinity: w = max(cos, 0); distance: w = clip(1 - cos, 0, 1).
    """
    if policy not in WEIGHT_POLICIES:
        raise ValueError(f"unknown weight policy {policy!r}")
    unit = _unit_rows(graph) if graph.node_ids else graph.vectors
    idx = graph.index_of
    edges: dict[tuple[int, int], Edge] = {}
    for (u, v), edge in graph.edges.items():
        cos = float(unit[idx[u]] @ unit[idx[v]])
        if policy == "affinity":
            w = max(cos, 0.0)
        else:
            w = min(max(1.0 - cos, 0.0), 1.0)
        edges[(u, v)] = Edge(weight=w, augmented=edge.augmented)
    return WeightedGraph(node_ids=list(graph.node_ids), vectors=graph.vectors, edges=edges)


# ---------------------------------------------------------------------------
# Clustering backends
# ---------------------------------------------------------------------------


def cluster(
    graph: WeightedGraph,
    backend: str = "weighted_leiden",
    seed: int = 0,
    resolution: float = 1.0,
) -> list[list[int]]:
    """Partition the graph; returns communities as sorted id lists, ordered by
    their lowest member. Zero-total-weight graphs fall back to singletons."""
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    adj = {
        nid: {} for nid in sorted(graph.node_ids)
    }  # type: dict[int, dict[int, float]]
    for (u, v), edge in graph.edges.items():
        if edge.weight > 0.0:
            adj[u][v] = adj[u].get(v, 0.0) + edge.weight
            adj[v][u] = adj[v].get(u, 0.0) + edge.weight
    if backend == "weighted_leiden":
        labels = _leiden(adj, seed=seed, resolution=resolution)
    else:
        labels = _label_propagation(adj, seed=seed)
    groups: dict[int, list[int]] = {}
    for node, label in labels.items():
        groups.setdefault(label, []).append(node)
    parts = [sorted(members) for members in groups.values()]
    parts.sort(key=lambda p: p[0])
    return parts


def _label_propagation(adj: dict[int, dict[int, float]], seed: int) -> dict[int, int]:
    """Seeded asynchronous weighted label propagation; ties -> lowest label."""
    rng = np.random.default_rng(seed)
    nodes = sorted(adj)
    labels = {u: u for u in nodes}
    for _ in range(100):
        changed = False
        order = [nodes[i] for i in rng.permutation(len(nodes))]
        for u in order:
            if not adj[u]:
                continue
            tally: dict[int, float] = {}
            for v, w in adj[u].items():
                tally[labels[v]] = tally.get(labels[v], 0.0) + w
            best = min(tally, key=lambda lab: (-tally[lab], lab))
            if tally[best] > tally.get(labels[u], 0.0) or (
                tally[best] == tally.get(labels[u], 0.0) and best < labels[u]
            ):
                if labels[u] != best:
                    labels[u] = best
                    changed = True
        if not changed:
            break
    return labels


class _AggGraph:
    """Aggregated working graph for the Leiden loop.

    Each node tracks the original ids it absorbed; `low[u]` (the minimum
    original id) is the deterministic tie-break key.
    """

    def __init__(self, adj: dict[int, dict[int, float]]):
        self.nodes = sorted(adj)
        self.adj = {u: dict(adj[u]) for u in self.nodes}
        self.self_w = {u: 0.0 for u in self.nodes}
        self.members = {u: [u] for u in self.nodes}
        self.low = {u: u for u in self.nodes}
        self._recompute()

    def _recompute(self):
        self.deg = {
            u: sum(self.adj[u].values()) + 2.0 * self.self_w[u] for u in self.nodes
        }
        self.m = sum(self.deg.values()) / 2.0


_EPS = 1e-12


def _local_move(
    g: _AggGraph,
    labels: dict[int, int],
    label_low: dict[int, int],
    rng: np.random.Generator,
    resolution: float,
    restrict: dict[int, int] | None = None,
) -> bool:
    """One queue-driven local-moving pass over modularity gain.

    Mutates `labels`; returns True if any node moved. A node moves only for a
    strictly better gain, or an equal gain toward the community whose lowest
    original id is strictly smaller. `restrict` confines candidate targets to
    nodes sharing the same restrict value (the refinement phase). Becoming a
    fresh singleton (gain 0) is always a candidate.
    """
    m = g.m
    if m <= 0:
        return False
    tot: dict[int, float] = {}
    for u in g.nodes:
        tot[labels[u]] = tot.get(labels[u], 0.0) + g.deg[u]
    order = [g.nodes[i] for i in rng.permutation(len(g.nodes))]
    queued = {u: True for u in order}
    queue = list(order)
    moved_any = False
    fresh = -1  # fresh singleton labels count down; visit order is seeded
    head = 0
    while head < len(queue):
        u = queue[head]
        head += 1
        queued[u] = False
        cur = labels[u]
        k_u = g.deg[u]
        to_comm: dict[int, float] = {}
        for v, w in g.adj[u].items():
            if restrict is not None and restrict[v] != restrict[u]:
                continue
            to_comm[labels[v]] = to_comm.get(labels[v], 0.0) + w
        tot[cur] -= k_u  # evaluate gains with u lifted out of the graph

        def gain_of(lab: int) -> float:
            return to_comm.get(lab, 0.0) / m - resolution * k_u * tot.get(
                lab, 0.0
            ) / (2.0 * m * m)

        cur_alone = tot[cur] == 0.0
        best_label = cur
        best_gain = gain_of(cur)
        best_low = g.low[u] if cur_alone else min(label_low[cur], g.low[u])
        for lab in sorted(to_comm, key=lambda lb: label_low[lb]):
            if lab == cur:
                continue
            gain = gain_of(lab)
            low = label_low[lab]
            if gain > best_gain + _EPS or (gain >= best_gain - _EPS and low < best_low):
                best_label, best_gain, best_low = lab, gain, low
        if not cur_alone and (0.0 > best_gain + _EPS):
            best_label, best_gain, best_low = fresh, 0.0, g.low[u]
        if best_label == cur:
            tot[cur] += k_u
            continue
        if best_label == fresh:
            labels[u] = fresh
            label_low[fresh] = g.low[u]
            tot[fresh] = k_u
            fresh -= 1
        else:
            labels[u] = best_label
            tot[best_label] = tot.get(best_label, 0.0) + k_u
            label_low[best_label] = min(label_low[best_label], g.low[u])
        moved_any = True
        remaining = [g.low[v] for v in g.nodes if labels[v] == cur]
        label_low[cur] = min(remaining) if remaining else 1 << 62
        for v in g.adj[u]:
            if not queued[v] and labels[v] != labels[u]:
                queue.append(v)
                queued[v] = True
    return moved_any


def _leiden(
    adj: dict[int, dict[int, float]], seed: int, resolution: float
) -> dict[int, int]:
    """Weighted Leiden-style optimization: local moving, refinement inside each
    community, aggregation on the refined partition; repeats until stable."""
    nodes = sorted(adj)
    if not nodes:
        return {}
    total_w = sum(sum(nbrs.values()) for nbrs in adj.values()) / 2.0
    if total_w <= 0.0:
        return {u: u for u in nodes}
    rng = np.random.default_rng(seed)
    g = _AggGraph(adj)
    final: dict[int, int] = {u: u for u in nodes}
    for _ in range(20):
        labels = {u: u for u in g.nodes}
        label_low = {u: g.low[u] for u in g.nodes}
        moved = _local_move(g, labels, label_low, rng, resolution)
        # Refinement: re-cluster from singletons, moves confined within the
        # communities found above.
        refined = {u: u for u in g.nodes}
        refined_low = {u: g.low[u] for u in g.nodes}
        _local_move(g, refined, refined_low, rng, resolution, restrict=labels)
        # Record the coarse assignment for the original nodes.
        for u in g.nodes:
            for orig in g.members[u]:
                final[orig] = labels[u]
        n_refined = len(set(refined.values()))
        if not moved or n_refined == len(g.nodes):
            break
        g = _aggregate(g, refined)
    # Relabel communities by their lowest original member id.
    groups: dict[int, list[int]] = {}
    for node, label in final.items():
        groups.setdefault(label, []).append(node)
    out: dict[int, int] = {}
    for members in groups.values():
        low = min(members)
        for node in members:
            out[node] = low
    return out


def _aggregate(g: _AggGraph, refined: dict[int, int]) -> _AggGraph:
    comm_nodes: dict[int, list[int]] = {}
    for u in g.nodes:
        comm_nodes.setdefault(refined[u], []).append(u)
    # New node key: lowest original id in the refined community.
    key_of = {lab: min(g.low[u] for u in us) for lab, us in comm_nodes.items()}
    new = _AggGraph.__new__(_AggGraph)
    new.nodes = sorted(key_of[lab] for lab in comm_nodes)
    new.adj = {u: {} for u in new.nodes}
    new.self_w = {u: 0.0 for u in new.nodes}
    new.members = {u: [] for u in new.nodes}
    new.low = {u: u for u in new.nodes}
    node_key = {}
    for lab, us in comm_nodes.items():
        for u in us:
            node_key[u] = key_of[lab]
    for lab, us in comm_nodes.items():
        k = key_of[lab]
        for u in us:
            new.members[k].extend(g.members[u])
            new.self_w[k] += g.self_w[u]
            for v, w in g.adj[u].items():
                kv = node_key[v]
                if kv == k:
                    new.self_w[k] += w / 2.0  # each internal edge seen twice
                else:
                    new.adj[k][kv] = new.adj[k].get(kv, 0.0) + w
    for k in new.nodes:
        new.members[k].sort()
    new._recompute()
    return new


# ---------------------------------------------------------------------------
# Summaries and the layer loop
# ---------------------------------------------------------------------------


def summarize_community(
    gateway: LlmGateway,
    member_names: list[str],
    member_details: list[str],
    template: str | None = None,
) -> str:
    """One summarization call; transport failure falls back to joined names."""
    template = template if template is not None else load_template("summarize")
    details = "\n".join(
        f"- {name}: {detail[:_DETAIL_CAP]}"
        for name, detail in zip(member_names, member_details)
    )
    prompt = render(
        template, member_names=", ".join(member_names), member_details=details
    )
    try:
        text = gateway.chat(ChatRequest(prompt_text=prompt)).text.strip()
        return text if text else "; ".join(member_names)
    except BudgetExceeded:
        raise
    except (NetworkError, MalformedResponse) as exc:
        log.warning("summarization failed (%s); joining member names", exc)
        return "; ".join(member_names)


def build_next_layer(
    graph: WeightedGraph,
    parts: list[list[int]],
    community_ids: list[int],
    embeddings: np.ndarray,
) -> WeightedGraph:
    """Lift the clustered graph one level: one node per community, an edge
    wherever any current edge (original or augmented) crosses communities.
    Lifted edges start unweighted; the next round reweights them."""
    comm_of: dict[int, int] = {}
    for cid, members in zip(community_ids, parts):
        for node in members:
            comm_of[node] = cid
    edges: dict[tuple[int, int], Edge] = {}
    for (u, v) in graph.edges:
        cu, cv = comm_of[u], comm_of[v]
        if cu == cv:
            continue
        key = (min(cu, cv), max(cu, cv))
        if key not in edges:
            edges[key] = Edge(weight=1.0, augmented=False)
    return WeightedGraph(
        node_ids=list(community_ids), vectors=embeddings, edges=edges
    )


def hierarchical_cluster(
    gateway: LlmGateway, kg: KnowledgeGraph, params: ClusterParams | None = None
) -> HierarchyTree:
    params = params or ClusterParams()
    current = graph_from_kg(kg)
    layers: list[list[int]] = [list(current.node_ids)]
    communities: dict[int, AttributedCommunity] = {}
    member_name = {e.entity_id: e.name for e in kg.entities}
    member_text = {
        e.entity_id: (e.description if e.description else e.name) for e in kg.entities
    }
    template = load_template("summarize")
    next_cid = 0
    level = 0
    while True:
        n = len(current.node_ids)
        if n < params.min_nodes or level >= params.max_layers:
            break
        augmented = augment_knn(current, params.knn_k, params.similarity_floor)
        weighted = weight_edges(augmented, params.weight_policy)
        parts = cluster(
            weighted,
            backend=params.backend,
            seed=params.seed + level,
            resolution=params.resolution,
        )
        if len(parts) >= n:
            log.info("clustering did not shrink layer %d (%d nodes); stopping", level, n)
            break

        def summarize(members: list[int]) -> str:
            names = [member_name[m] for m in members]
            details = [member_text[m] for m in members]
            return summarize_community(gateway, names, details, template)

        if params.workers > 1 and len(parts) > 1:
            with ThreadPoolExecutor(max_workers=params.workers) as pool:
                summaries = list(pool.map(summarize, parts))
        else:
            summaries = [summarize(p) for p in parts]
        vectors = gateway.embed(summaries)
        level += 1
        layer_ids: list[int] = []
        for members, summary, vec in zip(parts, summaries, vectors):
            cid = next_cid
            next_cid += 1
            layer_ids.append(cid)
            communities[cid] = AttributedCommunity(
                community_id=cid,
                layer=level,
                members=list(members),
                summary=summary,
                embedding=vec.values,
            )
            if level > 1:
                for m in members:
                    communities[m].parent = cid
            member_name[cid] = f"community {cid}"
            member_text[cid] = summary
        layers.append(layer_ids)
        if len(parts) == 1:
            break
        current = build_next_layer(
            weighted,
            parts,
            layer_ids,
            np.stack([v.values for v in vectors]).astype(np.float32),
        )
    return HierarchyTree(layers=layers, communities=communities)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_hierarchy(tree: HierarchyTree, workdir: str | Path):
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(tree.communities.values(), key=lambda c: c.community_id)
    with open(workdir / "communities.jsonl", "w", encoding="utf-8") as fh:
        for c in ordered:
            fh.write(
                json.dumps(
                    {
                        "community_id": c.community_id,
                        "layer": c.layer,
                        "members": c.members,
                        "summary": c.summary,
                        "parent": c.parent,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    if ordered:
        mat = np.stack([c.embedding for c in ordered]).astype("<f4")
    else:
        mat = np.zeros((0, 0), dtype="<f4")
    (workdir / "community_vectors.bin").write_bytes(np.ascontiguousarray(mat).tobytes())


def load_hierarchy(workdir: str | Path, entity_ids: list[int]) -> HierarchyTree:
    workdir = Path(workdir)
    records = []
    with open(workdir / "communities.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    records.sort(key=lambda r: r["community_id"])
    raw = (workdir / "community_vectors.bin").read_bytes()
    if records:
        dim = len(raw) // (4 * len(records))
        mat = np.frombuffer(raw, dtype="<f4").reshape(len(records), dim)
    else:
        mat = np.zeros((0, 0), dtype=np.float32)
    communities: dict[int, AttributedCommunity] = {}
    depth = 0
    for i, rec in enumerate(records):
        c = AttributedCommunity(
            community_id=int(rec["community_id"]),
            layer=int(rec["layer"]),
            members=[int(m) for m in rec["members"]],
            summary=rec["summary"],
            embedding=mat[i].copy(),
            parent=None if rec["parent"] is None else int(rec["parent"]),
        )
        communities[c.community_id] = c
        depth = max(depth, c.layer)
    layers: list[list[int]] = [list(entity_ids)]
    for level in range(1, depth + 1):
        layers.append(
            sorted(c.community_id for c in communities.values() if c.layer == level)
        )
    return HierarchyTree(layers=layers, communities=communities)
