"""On-disk format for the multi-layer index.

Layout under the index directory:

    manifest.json          version, parameters, per-layer counts, checksums
    inter.bin              descent-link pairs (node_id, target_id), int64 LE,
                           grouped by layer 1..top in nodes.bin order
    layer_<i>/nodes.bin    node ids, int64 LE, ascending
    layer_<i>/vectors.bin  float32 LE, row-major, one row per node
    layer_<i>/adj.bin      per node: int64 degree, then that many neighbor ids

All integers are little-endian. Checksums are sha256 over file bytes; any
mismatch (including truncation) raises CorruptIndex, and a manifest written
by a different format version raises VersionMismatch before checksums are
looked at.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import CorruptIndex, VersionMismatch
from .index import ChnswIndex, LayerGraph, METRIC

FORMAT_VERSION = 1


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_index(index: ChnswIndex, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    checksums: dict[str, str] = {}

    for li, layer in enumerate(index.layers):
        layer_dir = root / f"layer_{li}"
        layer_dir.mkdir(exist_ok=True)
        nodes = np.ascontiguousarray(layer.node_ids, dtype="<i8").tobytes()
        vectors = np.ascontiguousarray(layer.vectors, dtype="<f4").tobytes()
        parts = []
        for pos in range(layer.size):
            d = int(layer.deg[pos])
            row = np.empty(d + 1, dtype="<i8")
            row[0] = d
            row[1:] = layer.node_ids[layer.adj[pos, :d]]
            parts.append(row.tobytes())
        adj = b"".join(parts)
        for name, blob in (("nodes.bin", nodes), ("vectors.bin", vectors), ("adj.bin", adj)):
            (layer_dir / name).write_bytes(blob)
            checksums[f"layer_{li}/{name}"] = _sha256(blob)

    inter_parts = []
    for li in range(1, len(index.layers)):
        upper, lower = index.layers[li], index.layers[li - 1]
        pairs = np.empty((upper.size, 2), dtype="<i8")
        pairs[:, 0] = upper.node_ids
        pairs[:, 1] = lower.node_ids[index.psi[li]]
        inter_parts.append(pairs.tobytes())
    inter = b"".join(inter_parts)
    (root / "inter.bin").write_bytes(inter)
    checksums["inter.bin"] = _sha256(inter)

    manifest = {
        "format_version": FORMAT_VERSION,
        "metric": METRIC,
        "dimension": index.dimension,
        "m": index.m,
        "ef_construction": index.ef_construction,
        "ef_search": index.ef_search,
        "seed": index.seed,
        "entry_point": int(index.layers[index.top].node_ids[index.entry_point]),
        "layer_count": len(index.layers),
        "layers": [{"index": li, "nodes": layer.size} for li, layer in enumerate(index.layers)],
        "checksums": checksums,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _read_checked(root: Path, rel: str, checksums: dict[str, str]) -> bytes:
    path = root / rel
    if not path.is_file():
        raise CorruptIndex(f"missing index file {rel}")
    blob = path.read_bytes()
    expected = checksums.get(rel)
    if expected is None:
        raise CorruptIndex(f"manifest lists no checksum for {rel}")
    if _sha256(blob) != expected:
        raise CorruptIndex(f"checksum mismatch for {rel}")
    return blob


def load_index(path: str | Path) -> ChnswIndex:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CorruptIndex(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise CorruptIndex(f"manifest.json is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"index format version {version}, this build reads {FORMAT_VERSION}"
        )
    checksums = manifest["checksums"]
    dimension = int(manifest["dimension"])
    m = int(manifest["m"])
    max_deg = 2 * m

    layers: list[LayerGraph] = []
    for spec in manifest["layers"]:
        li = int(spec["index"])
        n = int(spec["nodes"])
        node_ids = np.frombuffer(
            _read_checked(root, f"layer_{li}/nodes.bin", checksums), dtype="<i8"
        ).astype(np.int64)
        vec_blob = _read_checked(root, f"layer_{li}/vectors.bin", checksums)
        if len(node_ids) != n or len(vec_blob) != n * dimension * 4:
            raise CorruptIndex(f"layer {li} sizes disagree with manifest")
        vectors = np.ascontiguousarray(
            np.frombuffer(vec_blob, dtype="<f4").reshape(n, dimension), dtype=np.float32
        )
        flat = np.frombuffer(
            _read_checked(root, f"layer_{li}/adj.bin", checksums), dtype="<i8"
        )
        adj = np.zeros((n, max_deg), dtype=np.int64)
        deg = np.zeros(n, dtype=np.int64)
        cursor = 0
        for pos in range(n):
            if cursor >= flat.size:
                raise CorruptIndex(f"adjacency for layer {li} is truncated")
            d = int(flat[cursor])
            cursor += 1
            if d > max_deg or cursor + d > flat.size:
                raise CorruptIndex(f"bad adjacency record in layer {li}")
            neighbor_ids = flat[cursor : cursor + d]
            cursor += d
            positions = np.searchsorted(node_ids, neighbor_ids)
            if np.any(positions >= n) or np.any(node_ids[positions] != neighbor_ids):
                raise CorruptIndex(f"layer {li} references unknown node ids")
            adj[pos, :d] = positions
            deg[pos] = d
        if cursor != flat.size:
            raise CorruptIndex(f"trailing bytes in adjacency of layer {li}")
        layers.append(LayerGraph(node_ids=node_ids, vectors=vectors, adj=adj, deg=deg))

    inter = np.frombuffer(_read_checked(root, "inter.bin", checksums), dtype="<i8")
    expected_pairs = sum(layer.size for layer in layers[1:])
    if inter.size != expected_pairs * 2:
        raise CorruptIndex("inter.bin size disagrees with layer counts")
    psi: list[np.ndarray] = [np.empty(0, dtype=np.int64)]
    cursor = 0
    for li in range(1, len(layers)):
        upper, lower = layers[li], layers[li - 1]
        block = inter[cursor : cursor + upper.size * 2].reshape(upper.size, 2)
        cursor += upper.size * 2
        if np.any(block[:, 0] != upper.node_ids):
            raise CorruptIndex(f"inter.bin pair order broken at layer {li}")
        positions = np.searchsorted(lower.node_ids, block[:, 1])
        if np.any(positions >= lower.size) or np.any(
            lower.node_ids[positions] != block[:, 1]
        ):
            raise CorruptIndex(f"inter.bin targets unknown nodes below layer {li}")
        psi.append(positions.astype(np.int64))

    entry_id = int(manifest["entry_point"])
    entry_point = layers[-1].position_of(entry_id)
    return ChnswIndex(
        layers=layers,
        psi=psi,
        m=m,
        ef_construction=int(manifest["ef_construction"]),
        ef_search=int(manifest["ef_search"]),
        seed=int(manifest["seed"]),
        entry_point=entry_point,
    )
