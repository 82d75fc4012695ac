"""Question answering over the built artifacts.

A question is embedded once and run through the hierarchical index, giving the
k nearest nodes in every layer. Each layer's hits are rendered into a context
block, scored into a per-layer analysis report by the LLM, and the pooled
points are packed into a token budget before a final merge call writes the
answer.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .chnsw import ChnswIndex, load_index
from .cluster import HierarchyTree, load_hierarchy
from .errors import MalformedResponse, MissingArtifact
from .gateway import ChatRequest, LlmGateway, TokenUsage
from .kg import KnowledgeGraph, load_kg
from .prompts import load_template, render
from .text import count_tokens

log = logging.getLogger(__name__)

DEFAULT_TOKEN_BUDGET = 8000
DEFAULT_RESPONSE_FORMAT = "Multiple paragraphs of plain text."


@dataclass
class RetrievalBundle:
    """Per-layer hits (top layer first) plus the rendered context blocks."""

    per_layer: list[tuple[int, list[tuple[int, float]]]]
    context: dict[int, str]


@dataclass
class Point:
    description: str
    score: float
    layer: int
    rank_in_report: int


@dataclass
class AnalysisReport:
    layer: int
    points: list[Point] = field(default_factory=list)


@dataclass
class Answer:
    question: str
    text: str
    points: list[Point]  # packed points, merge order
    reports: list[AnalysisReport]
    retrieval: RetrievalBundle
    usage: TokenUsage
    packed_tokens: int


def _fmt_score(score: float) -> str:
    return f"{score:g}"


def render_point_line(rank: int, point: Point) -> str:
    return f"{rank}. (layer {point.layer}, score {_fmt_score(point.score)}) {point.description}"


class QueryEngine:
    def __init__(
        self,
        gateway: LlmGateway,
        index: ChnswIndex,
        kg: KnowledgeGraph,
        tree: HierarchyTree,
        k: int = 5,
        ef: int | None = None,
        token_budget: int = DEFAULT_TOKEN_BUDGET,
        response_format: str = DEFAULT_RESPONSE_FORMAT,
        workers: int = 4,
    ):
        if k < 1:
            raise ValueError("k must be >= 1")
        if token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        self.gateway = gateway
        self.index = index
        self.kg = kg
        self.tree = tree
        self.k = k
        self.ef = ef
        self.token_budget = token_budget
        self.response_format = response_format
        self.workers = max(1, workers)
        self._filter_template = load_template("filter")
        self._merge_template = load_template("merge")

    # -- retrieval --------------------------------------------------------------

    def retrieve(self, question: str) -> RetrievalBundle:
        if not question.strip():
            raise ValueError("question must be non-empty")
        vec = self.gateway.embed([question])[0]
        result = self.index.hierarchical_search(vec.values, k=self.k, ef=self.ef)
        context = {
            layer: self._render_context(layer, hits)
            for layer, hits in result.per_layer
        }
        return RetrievalBundle(per_layer=result.per_layer, context=context)

    def _render_context(self, layer: int, hits: list[tuple[int, float]]) -> str:
        if layer == 0:
            retrieved = [node_id for node_id, _ in hits]
            lines = []
            for eid in retrieved:
                ent = self.kg.entities[eid]
                lines.append(f"Entity {ent.entity_id}: {ent.name}: {ent.description}")
            present = set(retrieved)
            for rel in self.kg.relations:
                if rel.head in present and rel.tail in present:
                    head = self.kg.entities[rel.head].name
                    tail = self.kg.entities[rel.tail].name
                    lines.append(f"Relation: {head} -> {tail}: {rel.description}")
            return "\n".join(lines)
        lines = []
        for cid, _ in hits:
            comm = self.tree.communities[cid]
            lines.append(f"Community {cid}: {comm.summary}")
        return "\n".join(lines)

    # -- per-layer analysis -----------------------------------------------------

    def filter_reports(self, question: str, bundle: RetrievalBundle) -> list[AnalysisReport]:
        layers = [layer for layer, _ in bundle.per_layer]

        def one(layer: int) -> AnalysisReport:
            prompt = render(
                self._filter_template,
                context_data=bundle.context[layer],
                user_query=question,
            )
            try:
                result = self.gateway.chat(
                    ChatRequest(prompt_text=prompt, response_format="json_object")
                )
                return AnalysisReport(layer=layer, points=self._parse_points(layer, result.text))
            except MalformedResponse as exc:
                log.warning("layer %d analysis unusable, dropping it: %s", layer, exc)
                return AnalysisReport(layer=layer, points=[])

        if self.workers > 1 and len(layers) > 1:
            with ThreadPoolExecutor(max_workers=min(self.workers, len(layers))) as pool:
                return list(pool.map(one, layers))
        return [one(layer) for layer in layers]

    def _parse_points(self, layer: int, text: str) -> list[Point]:
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MalformedResponse(f"analysis is not JSON: {exc}") from exc
        raw = payload.get("points") if isinstance(payload, dict) else None
        if not isinstance(raw, list):
            raise MalformedResponse('analysis JSON lacks a "points" list')
        points = []
        for entry in raw:
            if not isinstance(entry, dict):
                continue
            desc = entry.get("description")
            score = entry.get("score")
            if not isinstance(desc, str) or not desc.strip():
                continue
            try:
                value = float(score)
            except (TypeError, ValueError):
                continue
            # clamp rather than reject: models wander slightly out of range
            value = round(min(100.0, max(0.0, value)), 2)
            points.append(
                Point(
                    description=desc.strip(),
                    score=value,
                    layer=layer,
                    rank_in_report=len(points),
                )
            )
        return points

    # -- packing and merge --------------------------------------------------------

    def pack_points(self, reports: list[AnalysisReport]) -> tuple[list[Point], str, int]:
        """Pool every point, order by (score desc, layer asc, report rank asc),
        and keep the longest prefix whose rendered lines fit the token budget."""
        pool = [p for report in reports for p in report.points]
        pool.sort(key=lambda p: (-p.score, p.layer, p.rank_in_report))
        packed: list[Point] = []
        lines: list[str] = []
        used = 0
        for point in pool:
            line = render_point_line(len(packed) + 1, point)
            cost = count_tokens(line)
            if used + cost > self.token_budget:
                break
            packed.append(point)
            lines.append(line)
            used += cost
        return packed, "\n".join(lines), used

    def merge_answer(self, question: str, report_data: str) -> tuple[str, TokenUsage]:
        prompt = render(
            self._merge_template,
            response_format=self.response_format,
            report_data=report_data,
            user_query=question,
        )
        result = self.gateway.chat(ChatRequest(prompt_text=prompt))
        return result.text, result.usage

    # -- end to end -----------------------------------------------------------

    def answer_question(self, question: str) -> Answer:
        before = self.gateway.usage_total
        bundle = self.retrieve(question)
        reports = self.filter_reports(question, bundle)
        packed, report_data, used = self.pack_points(reports)
        text, _ = self.merge_answer(question, report_data)
        after = self.gateway.usage_total
        usage = TokenUsage(
            prompt_tokens=after.prompt_tokens - before.prompt_tokens,
            completion_tokens=after.completion_tokens - before.completion_tokens,
        )
        return Answer(
            question=question,
            text=text,
            points=packed,
            reports=reports,
            retrieval=bundle,
            usage=usage,
            packed_tokens=used,
        )


def load_engine(
    workdir: str | Path,
    gateway: LlmGateway,
    k: int = 5,
    ef: int | None = None,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    response_format: str = DEFAULT_RESPONSE_FORMAT,
    workers: int = 4,
) -> QueryEngine:
    """Load kg/, hierarchy/, and index/ from a build directory."""
    workdir = Path(workdir)
    for sub in ("kg", "hierarchy", "index"):
        if not (workdir / sub).is_dir():
            raise MissingArtifact(f"missing artifact directory: {workdir / sub}")
    kg = load_kg(workdir / "kg")
    tree = load_hierarchy(
        workdir / "hierarchy", entity_ids=[e.entity_id for e in kg.entities]
    )
    index = load_index(workdir / "index")
    return QueryEngine(
        gateway,
        index,
        kg,
        tree,
        k=k,
        ef=ef,
        token_budget=token_budget,
        response_format=response_format,
        workers=workers,
    )
