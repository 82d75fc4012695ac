"""Corpus ingestion and knowledge-graph construction.

A corpus is chunked on approximate token boundaries, each chunk goes through
one extraction call, and the per-chunk subgraphs are merged by canonical
entity name. Entity embeddings are computed once, after the merge, from
"NAME: description" texts. Relation descriptions are not embedded.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BudgetExceeded, EmptyCorpus, MalformedResponse, NetworkError
from .gateway import ChatRequest, LlmGateway
from .prompts import load_template, render
from .text import canonical_name, canonical_text, token_spans

log = logging.getLogger(__name__)

EMBED_BATCH = 64


@dataclass(frozen=True)
class Chunk:
    """A contiguous slice of one document, sized in approximate tokens.

    char_start/char_end are offsets into the original document text, so
    overlapping chunks can be stitched back into the exact original.
    """

    chunk_id: int
    doc_id: str
    text: str
    token_count: int
    char_start: int
    char_end: int


@dataclass
class Entity:
    entity_id: int
    name: str  # canonical: trimmed, whitespace-collapsed, uppercased
    description: str
    source_chunks: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class Relation:
    head: int
    tail: int
    description: str
    source_chunks: tuple[int, ...] = ()


@dataclass
class KnowledgeGraph:
    entities: list[Entity]
    relations: list[Relation]
    vectors: np.ndarray  # float32, row i = embedding of entity_id i

    @property
    def name_to_id(self) -> dict[str, int]:
        return {e.name: e.entity_id for e in self.entities}

    @property
    def dimension(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.size else 0


# ---------------------------------------------------------------------------
# Corpus reading and chunking
# ---------------------------------------------------------------------------


def read_corpus(path: str | Path) -> list[tuple[str, str]]:
    """Load (doc_id, text) pairs from a .jsonl file, a .txt file, or a directory.

    Raises EmptyCorpus when the path is unreadable or yields no documents.
    """
    path = Path(path)
    docs: list[tuple[str, str]] = []
    try:
        if path.is_dir():
            for child in sorted(path.glob("*.txt")):
                docs.append((child.stem, child.read_text("utf-8")))
        elif path.suffix == ".jsonl":
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh):
                    line = line.strip()
                    if not line:
                        continue
                    record = json.loads(line)
                    docs.append((str(record["doc_id"]), str(record["text"])))
        elif path.is_file():
            docs.append((path.stem, path.read_text("utf-8")))
        else:
            raise FileNotFoundError(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise EmptyCorpus(f"cannot read corpus at {path}: {exc}") from exc
    docs = [(doc_id, text) for doc_id, text in docs if text.strip()]
    if not docs:
        raise EmptyCorpus(f"no readable documents under {path}")
    return sorted(docs, key=lambda pair: pair[0])


def chunk_corpus(
    documents: list[tuple[str, str]],
    chunk_size: int = 1200,
    overlap: int = 100,
) -> list[Chunk]:
    """Slice documents into chunks of at most `chunk_size` approximate tokens,
    consecutive chunks sharing `overlap` tokens."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not 0 <= overlap < chunk_size:
        raise ValueError("overlap must satisfy 0 <= overlap < chunk_size")
    if not documents:
        raise EmptyCorpus("no documents to chunk")
    stride = chunk_size - overlap
    chunks: list[Chunk] = []
    next_id = 0
    for doc_id, body in documents:
        spans = token_spans(body)
        total = len(spans)
        if total == 0:
            continue
        starts = [0]
        while starts[-1] + chunk_size < total:
            starts.append(starts[-1] + stride)
        for start_tok in starts:
            end_tok = min(start_tok + chunk_size, total)
            char_start = spans[start_tok][0]
            char_end = spans[end_tok - 1][1]
            chunks.append(
                Chunk(
                    chunk_id=next_id,
                    doc_id=doc_id,
                    text=body[char_start:char_end],
                    token_count=end_tok - start_tok,
                    char_start=char_start,
                    char_end=char_end,
                )
            )
            next_id += 1
    return chunks


# ---------------------------------------------------------------------------
# Extraction and merging
# ---------------------------------------------------------------------------


@dataclass
class RawSubgraph:
    """Extraction output for one chunk before the merge."""

    chunk_id: int
    entities: list[tuple[str, str]]  # (canonical name, description)
    relations: list[tuple[str, str, str]]  # (head name, tail name, description)


def extract_subgraph(
    gateway: LlmGateway, chunk: Chunk, template: str | None = None
) -> RawSubgraph:
    """Run one extraction call. A malformed response skips the chunk."""
    template = template if template is not None else load_template("extract")
    prompt = render(template, chunk_text=chunk.text)
    try:
        result = gateway.chat(
            ChatRequest(prompt_text=prompt, response_format="json_object")
        )
        payload = json.loads(result.text)
    except MalformedResponse:
        log.warning("extraction returned malformed JSON for chunk %d; skipped", chunk.chunk_id)
        return RawSubgraph(chunk.chunk_id, [], [])
    entities: list[tuple[str, str]] = []
    seen: set[str] = set()
    for item in payload.get("entities", []) or []:
        name = canonical_name(str(item.get("name", "")))
        if not name or name in seen:
            continue
        seen.add(name)
        entities.append((name, str(item.get("description", "")).strip()))
    relations: list[tuple[str, str, str]] = []
    for item in payload.get("relations", []) or []:
        head = canonical_name(str(item.get("head", "")))
        tail = canonical_name(str(item.get("tail", "")))
        if not head or not tail:
            continue
        relations.append((head, tail, str(item.get("description", "")).strip()))
        # Endpoint closure: a relation may name an entity the model forgot to list.
        for name in (head, tail):
            if name not in seen:
                seen.add(name)
                entities.append((name, ""))
    return RawSubgraph(chunk.chunk_id, entities, relations)


def _consolidate_descriptions(
    gateway: LlmGateway, name: str, descriptions: list[str]
) -> str:
    """Merge >1 distinct entity descriptions via one LLM call.

    Network or format failures fall back to plain concatenation; a blown
    token budget still propagates (the run is over either way).
    """
    template = load_template("consolidate")
    prompt = render(
        template,
        entity_name=name,
        descriptions="\n".join(f"- {d}" for d in descriptions),
    )
    try:
        return gateway.chat(ChatRequest(prompt_text=prompt)).text.strip()
    except BudgetExceeded:
        raise
    except (NetworkError, MalformedResponse) as exc:
        log.warning("consolidation failed for %s (%s); concatenating", name, exc)
        return " | ".join(descriptions)


def merge_subgraphs(
    gateway: LlmGateway, subgraphs: list[RawSubgraph]
) -> KnowledgeGraph:
    """Merge per-chunk subgraphs by canonical name and embed the entities."""
    order: list[str] = []
    descriptions: dict[str, list[str]] = {}
    sources: dict[str, set[int]] = {}
    for sub in subgraphs:
        for name, desc in sub.entities:
            if name not in descriptions:
                order.append(name)
                descriptions[name] = []
                sources[name] = set()
            if desc and desc not in descriptions[name]:
                descriptions[name].append(desc)
            sources[name].add(sub.chunk_id)

    entities: list[Entity] = []
    ids: dict[str, int] = {}
    for entity_id, name in enumerate(order):
        ids[name] = entity_id
        descs = descriptions[name]
        if len(descs) > 1:
            description = _consolidate_descriptions(gateway, name, descs)
        else:
            description = descs[0] if descs else ""
        entities.append(
            Entity(
                entity_id=entity_id,
                name=name,
                description=description,
                source_chunks=sorted(sources[name]),
            )
        )

    relations: list[Relation] = []
    rel_sources: dict[tuple[int, int, str], set[int]] = {}
    rel_desc: dict[tuple[int, int, str], str] = {}
    rel_order: list[tuple[int, int, str]] = []
    for sub in subgraphs:
        for head_name, tail_name, desc in sub.relations:
            head, tail = ids[head_name], ids[tail_name]
            if head == tail:
                log.debug("dropping self-loop relation on %s", head_name)
                continue
            key = (head, tail, canonical_text(desc))
            if key not in rel_sources:
                rel_order.append(key)
                rel_sources[key] = set()
                rel_desc[key] = desc
            rel_sources[key].add(sub.chunk_id)
    for key in rel_order:
        head, tail, _ = key
        relations.append(
            Relation(
                head=head,
                tail=tail,
                description=rel_desc[key],
                source_chunks=tuple(sorted(rel_sources[key])),
            )
        )

    vectors = embed_entities(gateway, entities)
    return KnowledgeGraph(entities=entities, relations=relations, vectors=vectors)


def embed_entities(gateway: LlmGateway, entities: list[Entity]) -> np.ndarray:
    texts = [
        f"{e.name}: {e.description}" if e.description else e.name for e in entities
    ]
    rows: list[np.ndarray] = []
    for i in range(0, len(texts), EMBED_BATCH):
        rows.extend(v.values for v in gateway.embed(texts[i : i + EMBED_BATCH]))
    if not rows:
        return np.zeros((0, 0), dtype=np.float32)
    return np.stack(rows).astype(np.float32)


def build_kg(
    gateway: LlmGateway,
    chunks: list[Chunk],
    workers: int = 10,
) -> KnowledgeGraph:
    """Extract every chunk (concurrently, order-preserving) and merge."""
    template = load_template("extract")
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            subgraphs = list(
                pool.map(lambda c: extract_subgraph(gateway, c, template), chunks)
            )
    else:
        subgraphs = [extract_subgraph(gateway, c, template) for c in chunks]
    return merge_subgraphs(gateway, subgraphs)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_chunks(chunks: list[Chunk], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for c in chunks:
            fh.write(
                json.dumps(
                    {
                        "chunk_id": c.chunk_id,
                        "doc_id": c.doc_id,
                        "text": c.text,
                        "token_count": c.token_count,
                        "char_start": c.char_start,
                        "char_end": c.char_end,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_chunks(path: str | Path) -> list[Chunk]:
    chunks: list[Chunk] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            chunks.append(
                Chunk(
                    chunk_id=int(rec["chunk_id"]),
                    doc_id=rec["doc_id"],
                    text=rec["text"],
                    token_count=int(rec["token_count"]),
                    char_start=int(rec["char_start"]),
                    char_end=int(rec["char_end"]),
                )
            )
    return chunks


def save_kg(kg: KnowledgeGraph, workdir: str | Path):
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    with open(workdir / "entities.jsonl", "w", encoding="utf-8") as fh:
        for e in sorted(kg.entities, key=lambda e: e.entity_id):
            fh.write(
                json.dumps(
                    {
                        "entity_id": e.entity_id,
                        "name": e.name,
                        "description": e.description,
                        "source_chunks": e.source_chunks,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    with open(workdir / "relations.jsonl", "w", encoding="utf-8") as fh:
        for r in kg.relations:
            fh.write(
                json.dumps(
                    {
                        "head": r.head,
                        "tail": r.tail,
                        "description": r.description,
                        "source_chunks": list(r.source_chunks),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    vectors = np.ascontiguousarray(kg.vectors, dtype="<f4")
    (workdir / "entity_vectors.bin").write_bytes(vectors.tobytes())


def load_kg(workdir: str | Path) -> KnowledgeGraph:
    workdir = Path(workdir)
    entities: list[Entity] = []
    with open(workdir / "entities.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            entities.append(
                Entity(
                    entity_id=int(rec["entity_id"]),
                    name=rec["name"],
                    description=rec["description"],
                    source_chunks=list(rec["source_chunks"]),
                )
            )
    entities.sort(key=lambda e: e.entity_id)
    relations: list[Relation] = []
    with open(workdir / "relations.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            relations.append(
                Relation(
                    head=int(rec["head"]),
                    tail=int(rec["tail"]),
                    description=rec["description"],
                    source_chunks=tuple(rec["source_chunks"]),
                )
            )
    raw = (workdir / "entity_vectors.bin").read_bytes()
    if entities:
        dim = len(raw) // (4 * len(entities))
        vectors = np.frombuffer(raw, dtype="<f4").reshape(len(entities), dim).copy()
    else:
        vectors = np.zeros((0, 0), dtype=np.float32)
    return KnowledgeGraph(entities=entities, relations=relations, vectors=vectors)
