"""Command-line entry point.

Subcommands: build, query, eval, bench. Machine-readable output (JSON or CSV)
goes to stdout only; progress and warnings go to stderr. Exit codes: 0 on
success, 1 for usage or configuration problems, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, apply_overrides, load_config, make_gateway
from .errors import ConfigError, StrataragError
from .evalbench import (
    BenchConfig,
    plot_benchmark,
    qa_accuracy,
    qa_recall,
    run_benchmark,
)
from .gateway import TokenUsage
from .pipeline import run_build
from .query import load_engine

log = logging.getLogger("stratarag")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; this tool reserves 2 for runtime
    # failures and uses 1 for usage problems.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _usage_dict(usage: TokenUsage) -> dict:
    return {
        "prompt_tokens": usage.prompt_tokens,
        "completion_tokens": usage.completion_tokens,
        "total_tokens": usage.total,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stratarag", description=__doc__)
    parser.add_argument("--config", metavar="FILE", help="INI config file")
    parser.add_argument(
        "--workdir", metavar="DIR", default="workdir", help="artifact directory"
    )
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument(
        "--mock",
        action="store_true",
        help="force the deterministic offline gateway",
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true", help="progress logs on stderr"
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_build = sub.add_parser("build", help="run the offline pipeline end to end")
    p_build.add_argument(
        "--corpus", metavar="PATH", default=None, help="override corpus.path"
    )
    p_build.set_defaults(func=cmd_build)

    p_query = sub.add_parser("query", help="answer one question from a built workdir")
    p_query.add_argument("question")
    p_query.add_argument("-k", type=int, default=None, help="hits per layer")
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", help="score a QA set against the built artifacts")
    p_eval.add_argument("qa_file", metavar="QA_JSONL")
    p_eval.add_argument("-k", type=int, default=None, help="hits per layer")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser(
        "bench", help="compare hierarchical search against flat per-layer HNSW"
    )
    p_bench.add_argument("--bottom-size", type=int, default=100_000)
    p_bench.add_argument("--dimension", type=int, default=256)
    p_bench.add_argument("--max-layers", type=int, default=5)
    p_bench.add_argument("--queries", type=int, default=200)
    p_bench.add_argument("--k", type=int, default=5)
    p_bench.add_argument("--workers", type=int, default=1)
    p_bench.add_argument("--csv", metavar="PATH", help="also write the CSV here")
    p_bench.add_argument("--plot", metavar="PATH", help="write an SVG plot here")
    p_bench.set_defaults(func=cmd_bench)

    return parser


def _load_run_config(args) -> RunConfig:
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mock:
        overrides["gateway_mode"] = "mock"
    if getattr(args, "corpus", None):
        overrides["corpus_path"] = args.corpus
    return apply_overrides(config, **overrides)


def cmd_build(args) -> int:
    config = _load_run_config(args)
    gateway = make_gateway(config)
    results = run_build(config, args.workdir, gateway=gateway, progress=log.info)
    payload = {
        "workdir": str(Path(args.workdir)),
        "stages": [{"stage": r.stage, "skipped": r.skipped} for r in results],
        "usage": _usage_dict(gateway.usage_total),
        "network_ops": gateway.network_ops,
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_query(args) -> int:
    config = _load_run_config(args)
    gateway = make_gateway(config)
    engine = load_engine(
        args.workdir,
        gateway,
        k=args.k if args.k is not None else config.k,
        token_budget=config.query_token_budget,
        response_format=config.response_format,
        workers=config.workers,
    )
    answer = engine.answer_question(args.question)
    payload = {
        "question": answer.question,
        "answer": answer.text,
        "points": [
            {"description": p.description, "score": p.score, "layer": p.layer}
            for p in answer.points
        ],
        "packed_tokens": answer.packed_tokens,
        "usage": _usage_dict(answer.usage),
        "network_ops": gateway.network_ops,
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def _read_qa_records(path: Path) -> tuple[list[dict], int]:
    records: list[dict] = []
    skipped = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                log.warning("%s:%d: skipping malformed line (%s)", path, lineno, exc)
                skipped += 1
                continue
            if (
                not isinstance(rec, dict)
                or not isinstance(rec.get("question"), str)
                or not isinstance(rec.get("gold"), str)
                or not rec["question"].strip()
                or not rec["gold"].strip()
            ):
                log.warning(
                    "%s:%d: skipping record without question/gold strings", path, lineno
                )
                skipped += 1
                continue
            records.append(rec)
    return records, skipped


def cmd_eval(args) -> int:
    config = _load_run_config(args)
    path = Path(args.qa_file)
    if not path.is_file():
        raise StrataragError(f"QA file not found: {path}")
    records, skipped = _read_qa_records(path)
    if not records:
        raise StrataragError(f"no usable QA records in {path}")
    gateway = make_gateway(config)
    engine = None
    accuracies = []
    recalls = []
    for rec in records:
        generated = rec.get("generated")
        if not isinstance(generated, str) or not generated:
            if engine is None:
                engine = load_engine(
                    args.workdir,
                    gateway,
                    k=args.k if args.k is not None else config.k,
                    token_budget=config.query_token_budget,
                    response_format=config.response_format,
                    workers=config.workers,
                )
            generated = engine.answer_question(rec["question"]).text
        accuracies.append(qa_accuracy(rec["gold"], generated))
        recalls.append(qa_recall(rec["gold"], generated))
    payload = {
        "questions": len(records),
        "skipped_malformed": skipped,
        "mean_accuracy": sum(accuracies) / len(accuracies),
        "mean_recall": sum(recalls) / len(recalls),
        "usage": _usage_dict(gateway.usage_total),
        "network_ops": gateway.network_ops,
    }
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    config = _load_run_config(args)
    bench = BenchConfig(
        bottom_size=args.bottom_size,
        dimension=args.dimension,
        max_layers=args.max_layers,
        queries=args.queries,
        k=args.k,
        m=config.m,
        ef_construction=config.ef_construction,
        ef_search=config.ef_search,
        seed=config.seed,
        workers=args.workers,
    )
    if bench.bottom_size < 1 or bench.queries < 1 or bench.k < 1:
        raise ConfigError("bench sizes must be positive")
    if bench.max_layers < 1 or bench.dimension < 1 or bench.workers < 1:
        raise ConfigError("bench sizes must be positive")
    report = run_benchmark(bench, progress=log.info)
    csv_text = report.to_csv()
    sys.stdout.write(csv_text)
    if args.csv:
        Path(args.csv).write_text(csv_text, encoding="utf-8")
    if args.plot:
        plot_benchmark(report, args.plot)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except StrataragError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
