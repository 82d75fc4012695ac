"""Staged offline build: ingest -> extract -> cluster -> index.

Each stage writes its artifacts under the workdir and records a fingerprint of
its inputs plus checksums of its outputs in build_manifest.json. A re-run
skips any stage whose fingerprint and outputs are unchanged; checksums, not
timestamps, decide staleness, so rebuilds are deterministic. A failed stage
leaves earlier artifacts in place for resume.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .chnsw import build_index_from_tree, save_index
from .cluster import (
    ClusterParams,
    hierarchical_cluster,
    load_hierarchy,
    save_hierarchy,
)
from .config import RunConfig, make_gateway
from .errors import ConfigError, StageFailure, StrataragError
from .gateway import LlmGateway
from .kg import (
    build_kg,
    chunk_corpus,
    load_chunks,
    load_kg,
    read_corpus,
    save_chunks,
    save_kg,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "build_manifest.json"
MANIFEST_VERSION = 1
STAGES = ("ingest", "extract", "cluster", "index")


@dataclass
class StageResult:
    stage: str
    skipped: bool
    outputs: dict[str, str]  # relative path -> sha256


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _fingerprint(payload: dict) -> str:
    return _sha256_bytes(json.dumps(payload, sort_keys=True).encode("utf-8"))


class BuildPipeline:
    def __init__(
        self,
        config: RunConfig,
        workdir: str | Path,
        gateway: LlmGateway | None = None,
        progress=None,
    ):
        self.config = config.validate()
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.gateway = gateway if gateway is not None else make_gateway(config)
        self._say = progress if progress is not None else (lambda msg: None)
        self._manifest = self._load_manifest()
        # In-memory hand-off between stages; reloaded from disk after a skip.
        self._chunks = None
        self._kg = None
        self._tree = None

    # -- manifest ----------------------------------------------------------------

    def _manifest_path(self) -> Path:
        return self.workdir / MANIFEST_NAME

    def _load_manifest(self) -> dict:
        path = self._manifest_path()
        if path.is_file():
            try:
                data = json.loads(path.read_text(encoding="utf-8"))
                if data.get("manifest_version") == MANIFEST_VERSION:
                    return data
                log.warning("ignoring manifest with unknown version at %s", path)
            except (json.JSONDecodeError, OSError) as exc:
                log.warning("ignoring unreadable manifest at %s: %s", path, exc)
        return {"manifest_version": MANIFEST_VERSION, "stages": {}}

    def _write_manifest(self):
        text = json.dumps(self._manifest, sort_keys=True, indent=2) + "\n"
        self._manifest_path().write_text(text, encoding="utf-8")

    def _record_stage(self, stage: str, fingerprint: str, outputs: dict[str, str]):
        usage = self.gateway.usage_total
        self._manifest["stages"][stage] = {
            "fingerprint": fingerprint,
            "outputs": outputs,
            "usage_prompt_tokens": usage.prompt_tokens,
            "usage_completion_tokens": usage.completion_tokens,
            "network_ops": self.gateway.network_ops,
        }
        self._write_manifest()

    def _stage_current(self, stage: str, fingerprint: str) -> bool:
        entry = self._manifest["stages"].get(stage)
        if not entry or entry.get("fingerprint") != fingerprint:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            path = self.workdir / rel
            if not path.is_file() or _sha256_file(path) != digest:
                return False
        return True

    def _checksum_outputs(self, paths: list[Path]) -> dict[str, str]:
        out = {}
        for path in sorted(paths):
            out[path.relative_to(self.workdir).as_posix()] = _sha256_file(path)
        return out

    def _dir_files(self, sub: str) -> list[Path]:
        root = self.workdir / sub
        return [p for p in root.rglob("*") if p.is_file()]

    # -- fingerprints --------------------------------------------------------------

    def _gateway_fingerprint(self) -> dict:
        c = self.config
        fp = {
            "mode": c.gateway_mode,
            "seed": c.seed,
            "embed_dim": c.embed_dim,
            "chat_model": c.chat_model,
            "embed_model": c.embed_model,
            "endpoint": c.endpoint,
        }
        if c.fixtures:
            fp["fixtures"] = _sha256_file(Path(c.fixtures))
        return fp

    def _corpus_fingerprint(self) -> str:
        docs = read_corpus(self.config.corpus_path)
        blob = "\x1e".join(f"{doc_id}\x1f{text}" for doc_id, text in docs)
        return _sha256_bytes(blob.encode("utf-8"))

    # -- stages -------------------------------------------------------------------

    def _run_ingest(self) -> StageResult:
        fp = _fingerprint(
            {
                "corpus": self._corpus_fingerprint(),
                "chunk_size": self.config.chunk_size,
                "overlap": self.config.chunk_overlap,
            }
        )
        out_path = self.workdir / "corpus" / "chunks.jsonl"
        if self._stage_current("ingest", fp):
            self._say("ingest: up to date")
            return StageResult("ingest", True, self._manifest["stages"]["ingest"]["outputs"])
        docs = read_corpus(self.config.corpus_path)
        chunks = chunk_corpus(
            docs, chunk_size=self.config.chunk_size, overlap=self.config.chunk_overlap
        )
        save_chunks(chunks, out_path)
        self._chunks = chunks
        outputs = self._checksum_outputs([out_path])
        self._record_stage("ingest", fp, outputs)
        self._say(f"ingest: {len(docs)} docs -> {len(chunks)} chunks")
        return StageResult("ingest", False, outputs)

    def _run_extract(self) -> StageResult:
        fp = _fingerprint(
            {
                "inputs": self._manifest["stages"]["ingest"]["outputs"],
                "gateway": self._gateway_fingerprint(),
                "workers": self.config.workers,
            }
        )
        if self._stage_current("extract", fp):
            self._say("extract: up to date")
            return StageResult("extract", True, self._manifest["stages"]["extract"]["outputs"])
        if self._chunks is None:
            self._chunks = load_chunks(self.workdir / "corpus" / "chunks.jsonl")
        kg = build_kg(self.gateway, self._chunks, workers=self.config.workers)
        save_kg(kg, self.workdir / "kg")
        self._kg = kg
        outputs = self._checksum_outputs(self._dir_files("kg"))
        self._record_stage("extract", fp, outputs)
        self._say(f"extract: {len(kg.entities)} entities, {len(kg.relations)} relations")
        return StageResult("extract", False, outputs)

    def _cluster_params(self) -> ClusterParams:
        c = self.config
        return ClusterParams(
            max_layers=c.max_layers,
            min_nodes=c.min_nodes,
            knn_k=c.knn_k or None,
            similarity_floor=c.similarity_floor,
            weight_policy=c.weight_policy,
            backend=c.cluster_backend,
            resolution=c.resolution,
            seed=c.seed,
            workers=c.workers,
        )

    def _run_cluster(self) -> StageResult:
        params = self._cluster_params()
        fp = _fingerprint(
            {
                "inputs": self._manifest["stages"]["extract"]["outputs"],
                "gateway": self._gateway_fingerprint(),
                "params": {
                    "max_layers": params.max_layers,
                    "min_nodes": params.min_nodes,
                    "knn_k": params.knn_k,
                    "similarity_floor": params.similarity_floor,
                    "weight_policy": params.weight_policy,
                    "backend": params.backend,
                    "resolution": params.resolution,
                    "seed": params.seed,
                },
            }
        )
        if self._stage_current("cluster", fp):
            self._say("cluster: up to date")
            return StageResult("cluster", True, self._manifest["stages"]["cluster"]["outputs"])
        if self._kg is None:
            self._kg = load_kg(self.workdir / "kg")
        tree = hierarchical_cluster(self.gateway, self._kg, params)
        save_hierarchy(tree, self.workdir / "hierarchy")
        self._tree = tree
        outputs = self._checksum_outputs(self._dir_files("hierarchy"))
        self._record_stage("cluster", fp, outputs)
        self._say(
            "cluster: layer sizes "
            + str([len(layer) for layer in tree.layers])
        )
        return StageResult("cluster", False, outputs)

    def _run_index(self) -> StageResult:
        c = self.config
        fp = _fingerprint(
            {
                "inputs": self._manifest["stages"]["cluster"]["outputs"],
                "kg": self._manifest["stages"]["extract"]["outputs"],
                "params": {
                    "m": c.m,
                    "ef_construction": c.ef_construction,
                    "ef_search": c.ef_search,
                    "seed": c.seed,
                },
            }
        )
        if self._stage_current("index", fp):
            self._say("index: up to date")
            return StageResult("index", True, self._manifest["stages"]["index"]["outputs"])
        if self._kg is None:
            self._kg = load_kg(self.workdir / "kg")
        if self._tree is None:
            self._tree = load_hierarchy(
                self.workdir / "hierarchy",
                entity_ids=[e.entity_id for e in self._kg.entities],
            )
        index = build_index_from_tree(
            self._tree,
            self._kg,
            m=c.m,
            ef_construction=c.ef_construction,
            ef_search=c.ef_search,
            seed=c.seed,
        )
        save_index(index, self.workdir / "index")
        outputs = self._checksum_outputs(self._dir_files("index"))
        self._record_stage("index", fp, outputs)
        self._say(f"index: {len(index.layers)} layers")
        return StageResult("index", False, outputs)

    # -- driver ---------------------------------------------------------------

    def run(self) -> list[StageResult]:
        if not self.config.corpus_path:
            raise ConfigError("corpus.path is required for a build")
        runners = {
            "ingest": self._run_ingest,
            "extract": self._run_extract,
            "cluster": self._run_cluster,
            "index": self._run_index,
        }
        results = []
        for stage in STAGES:
            try:
                results.append(runners[stage]())
            except StageFailure:
                raise
            except StrataragError as exc:
                raise StageFailure(stage, str(exc)) from exc
            except (OSError, ValueError) as exc:
                raise StageFailure(stage, str(exc)) from exc
        return results


def run_build(
    config: RunConfig,
    workdir: str | Path,
    gateway: LlmGateway | None = None,
    progress=None,
) -> list[StageResult]:
    return BuildPipeline(config, workdir, gateway=gateway, progress=progress).run()
