"""HTTP front end over a built workdir.

The app loads the knowledge graph, hierarchy, and index once at startup and
serves questions from memory. Run it with:

    python -m stratarag.service --workdir workdir [--config run.ini] [--mock]
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .config import RunConfig, load_config, make_gateway
from .errors import StrataragError
from .evalbench import qa_accuracy, qa_recall
from .gateway import LlmGateway, TokenUsage
from .query import QueryEngine, load_engine


class UsageModel(BaseModel):
    prompt_tokens: int
    completion_tokens: int
    total_tokens: int

    @classmethod
    def from_usage(cls, usage: TokenUsage) -> "UsageModel":
        return cls(
            prompt_tokens=usage.prompt_tokens,
            completion_tokens=usage.completion_tokens,
            total_tokens=usage.total,
        )


class PointModel(BaseModel):
    description: str
    score: float
    layer: int


class QueryRequest(BaseModel):
    question: str = Field(min_length=1)
    k: int | None = Field(default=None, ge=1)


class QueryResponse(BaseModel):
    question: str
    answer: str
    points: list[PointModel]
    packed_tokens: int
    usage: UsageModel


class EvalRecord(BaseModel):
    question: str = Field(min_length=1)
    gold: str = Field(min_length=1)
    generated: str | None = None


class EvalRequest(BaseModel):
    records: list[EvalRecord] = Field(min_length=1)


class EvalResponse(BaseModel):
    questions: int
    mean_accuracy: float
    mean_recall: float
    usage: UsageModel


class HealthResponse(BaseModel):
    status: str
    workdir: str
    layers: int
    entities: int


def create_app(
    workdir: str | Path,
    config: RunConfig | None = None,
    gateway: LlmGateway | None = None,
) -> FastAPI:
    config = (config or RunConfig()).validate()
    gateway = gateway if gateway is not None else make_gateway(config)
    engine = load_engine(
        workdir,
        gateway,
        k=config.k,
        token_budget=config.query_token_budget,
        response_format=config.response_format,
        workers=config.workers,
    )
    app = FastAPI(title="stratarag", version="0.1.0")
    app.state.engine = engine

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok",
            workdir=str(workdir),
            layers=len(engine.index.layers),
            entities=len(engine.kg.entities),
        )

    @app.post("/query", response_model=QueryResponse)
    def query(request: QueryRequest) -> QueryResponse:
        eng = engine
        if request.k is not None and request.k != engine.k:
            eng = QueryEngine(
                gateway,
                engine.index,
                engine.kg,
                engine.tree,
                k=request.k,
                ef=engine.ef,
                token_budget=engine.token_budget,
                response_format=engine.response_format,
                workers=engine.workers,
            )
        try:
            answer = eng.answer_question(request.question)
        except StrataragError as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from exc
        return QueryResponse(
            question=answer.question,
            answer=answer.text,
            points=[
                PointModel(description=p.description, score=p.score, layer=p.layer)
                for p in answer.points
            ],
            packed_tokens=answer.packed_tokens,
            usage=UsageModel.from_usage(answer.usage),
        )

    @app.post("/eval", response_model=EvalResponse)
    def evaluate(request: EvalRequest) -> EvalResponse:
        before = gateway.usage_total
        accuracies = []
        recalls = []
        try:
            for rec in request.records:
                generated = rec.generated
                if not generated:
                    generated = engine.answer_question(rec.question).text
                accuracies.append(qa_accuracy(rec.gold, generated))
                recalls.append(qa_recall(rec.gold, generated))
        except StrataragError as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from exc
        after = gateway.usage_total
        usage = TokenUsage(
            prompt_tokens=after.prompt_tokens - before.prompt_tokens,
            completion_tokens=after.completion_tokens - before.completion_tokens,
        )
        return EvalResponse(
            questions=len(request.records),
            mean_accuracy=sum(accuracies) / len(accuracies),
            mean_recall=sum(recalls) / len(recalls),
            usage=UsageModel.from_usage(usage),
        )

    return app


def main(argv=None) -> int:
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(prog="python -m stratarag.service")
    parser.add_argument("--workdir", default="workdir")
    parser.add_argument("--config", default=None)
    parser.add_argument("--mock", action="store_true")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    args = parser.parse_args(argv)
    config = load_config(args.config)
    if args.mock:
        from .config import apply_overrides

        config = apply_overrides(config, gateway_mode="mock")
    app = create_app(args.workdir, config=config)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
