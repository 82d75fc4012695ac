"""Multi-layer proximity index: construction, per-layer search, hierarchy,
persistence. Oracles are brute-force scans over small layers."""

import numpy as np
import pytest

from stratarag.chnsw import (
    ChnswIndex,
    SearchCounters,
    build_index,
    load_index,
    save_index,
)
from stratarag.errors import (
    CorruptIndex,
    DimensionMismatch,
    EmptyLayer,
    StartNotInLayer,
    VersionMismatch,
)


def _unit_rows(rng, n, dim) -> np.ndarray:
    mat = rng.uniform(-1.0, 1.0, size=(n, dim))
    mat /= np.linalg.norm(mat, axis=1)[:, None]
    return mat.astype(np.float32)


def _layer_stack(rng, sizes, dim, id_offsets=None):
    """Bottom-first (ids, vectors) pairs; ids ascending but not contiguous."""
    data = []
    for li, n in enumerate(sizes):
        offset = 0 if id_offsets is None else id_offsets[li]
        ids = np.arange(n, dtype=np.int64) * 2 + offset  # even spacing
        data.append((ids, _unit_rows(rng, n, dim)))
    return data


def _brute_top_k(vectors, ids, q, k):
    d = 1.0 - vectors.astype(np.float64) @ q.astype(np.float64)
    order = np.lexsort((ids, d))[:k]
    return [(int(ids[i]), float(d[i])) for i in order]


class TestBuildValidation:
    def test_empty_layer_list_rejected(self):
        with pytest.raises(EmptyLayer):
            build_index([])

    def test_zero_node_layer_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(EmptyLayer):
            build_index(
                [
                    (np.arange(4, dtype=np.int64), _unit_rows(rng, 4, 8)),
                    (np.arange(0, dtype=np.int64), np.zeros((0, 8), dtype=np.float32)),
                ]
            )

    def test_dimension_disagreement_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(DimensionMismatch):
            build_index(
                [
                    (np.arange(4, dtype=np.int64), _unit_rows(rng, 4, 8)),
                    (np.arange(2, dtype=np.int64), _unit_rows(rng, 2, 16)),
                ]
            )

    def test_bad_m_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            build_index([(np.arange(2, dtype=np.int64), _unit_rows(rng, 2, 8))], m=0)


class TestConstructionInvariants:
    def test_psi_total_and_in_codomain(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            sizes = sorted(rng.integers(2, 30, size=3).tolist(), reverse=True)
            index = build_index(_layer_stack(rng, sizes, 8), m=4, seed=trial)
            assert index.psi_total()
            for li in range(1, len(index.layers)):
                targets = index.psi[li]
                assert targets.shape[0] == index.layers[li].size
                assert np.all(targets >= 0)
                assert np.all(targets < index.layers[li - 1].size)

    def test_intra_layer_symmetry_and_degree_bounds(self):
        rng = np.random.default_rng(2)
        index = build_index(_layer_stack(rng, [60, 20, 5], 8), m=4)
        for layer in index.layers:
            n = layer.size
            for pos in range(n):
                d = int(layer.deg[pos])
                assert d <= 2 * index.m
                if n > 1:
                    assert d >= min(index.m, n - 1)
                neigh = layer.adj[pos, :d]
                assert pos not in neigh
                assert len(set(neigh.tolist())) == d
                for other in neigh:
                    od = int(layer.deg[other])
                    assert pos in layer.adj[other, :od]

    def test_three_layer_toy_psi_is_exact_nearest(self):
        # Sizes 4/2/1 bottom to top; small enough for an exhaustive check.
        rng = np.random.default_rng(3)
        stack = _layer_stack(rng, [4, 2, 1], 8)
        index = build_index(stack, m=2)
        for li in (1, 2):
            upper_ids, upper_vecs = stack[li]
            lower_ids, lower_vecs = stack[li - 1]
            for pos in range(len(upper_ids)):
                expected_id, _ = _brute_top_k(lower_vecs, lower_ids, upper_vecs[pos], 1)[0]
                got = int(lower_ids[index.psi[li][pos]])
                assert got == expected_id

    def test_duplicate_vectors_tie_to_lowest_id(self):
        vec = np.array([0.6, 0.8, 0.0, 0.0], dtype=np.float32)
        vectors = np.stack([vec] * 4 + [np.array([0.0, 0.0, 1.0, 0.0], dtype=np.float32)])
        ids = np.array([5, 7, 9, 11, 13], dtype=np.int64)
        index = build_index([(ids, vectors)], m=2)
        hits = index.search_layer(0, vec, start_id=13, k=3, ef=5)
        assert [h[0] for h in hits] == [5, 7, 9]  # equal distances, id order


class TestSearchLayer:
    def test_exact_at_saturation_50_random_layers(self):
        rng = np.random.default_rng(4)
        for trial in range(50):
            n = int(rng.integers(2, 65))
            dim = int(rng.integers(4, 17))
            ids = np.sort(rng.choice(1000, size=n, replace=False)).astype(np.int64)
            index = build_index([(ids, _unit_rows(rng, n, dim))], m=8, seed=trial)
            q = _unit_rows(rng, 1, dim)[0]
            start = int(ids[rng.integers(0, n)])
            for k in (1, 3, 5):
                got = index.search_layer(0, q, start_id=start, k=k, ef=n)
                want = _brute_top_k(index.layers[0].vectors, ids, q, k)
                assert [g[0] for g in got] == [w[0] for w in want]

    def test_results_sorted_ascending(self):
        rng = np.random.default_rng(5)
        ids = np.arange(40, dtype=np.int64)
        index = build_index([(ids, _unit_rows(rng, 40, 8))], m=4)
        hits = index.search_layer(0, _unit_rows(rng, 1, 8)[0], start_id=0, k=10)
        dists = [d for _, d in hits]
        assert dists == sorted(dists)

    def test_k_larger_than_layer_returns_whole_layer(self):
        rng = np.random.default_rng(6)
        ids = np.arange(5, dtype=np.int64)
        index = build_index([(ids, _unit_rows(rng, 5, 8))], m=2)
        hits = index.search_layer(0, _unit_rows(rng, 1, 8)[0], start_id=2, k=50)
        assert sorted(h[0] for h in hits) == list(range(5))

    def test_visited_once_bounds_evaluations(self):
        rng = np.random.default_rng(7)
        n = 64
        ids = np.arange(n, dtype=np.int64)
        index = build_index([(ids, _unit_rows(rng, n, 8))], m=4)
        counters = SearchCounters()
        index.search_layer(
            0, _unit_rows(rng, 1, 8)[0], start_id=0, k=5, ef=n, counters=counters
        )
        assert 0 < counters.total_evals <= n

    def test_start_not_in_layer(self):
        rng = np.random.default_rng(8)
        ids = np.array([0, 2, 4], dtype=np.int64)
        index = build_index([(ids, _unit_rows(rng, 3, 8))], m=2)
        with pytest.raises(StartNotInLayer):
            index.search_layer(0, _unit_rows(rng, 1, 8)[0], start_id=3, k=1)

    def test_layer_out_of_range(self):
        rng = np.random.default_rng(9)
        index = build_index([(np.arange(3, dtype=np.int64), _unit_rows(rng, 3, 8))], m=2)
        with pytest.raises(IndexError):
            index.search_layer(1, _unit_rows(rng, 1, 8)[0], start_id=0, k=1)

    def test_bad_k_rejected(self):
        rng = np.random.default_rng(10)
        index = build_index([(np.arange(3, dtype=np.int64), _unit_rows(rng, 3, 8))], m=2)
        with pytest.raises(ValueError):
            index.search_layer(0, _unit_rows(rng, 1, 8)[0], start_id=0, k=0)

    def test_query_dimension_checked(self):
        rng = np.random.default_rng(11)
        index = build_index([(np.arange(3, dtype=np.int64), _unit_rows(rng, 3, 8))], m=2)
        with pytest.raises(DimensionMismatch):
            index.search_layer(0, _unit_rows(rng, 1, 4)[0], start_id=0, k=1)


class TestHierarchicalSearch:
    def test_single_layer_matches_search_layer(self):
        rng = np.random.default_rng(12)
        ids = np.arange(30, dtype=np.int64)
        index = build_index([(ids, _unit_rows(rng, 30, 8))], m=4)
        q = _unit_rows(rng, 1, 8)[0]
        result = index.hierarchical_search(q, k=5)
        entry_id = int(index.layers[0].node_ids[index.entry_point])
        direct = index.search_layer(0, q, start_id=entry_id, k=5, ef=5)
        assert result.per_layer == [(0, direct)]

    def test_three_layer_toy_k1_matches_brute_force(self):
        rng = np.random.default_rng(13)
        stack = _layer_stack(rng, [4, 2, 1], 8)
        index = build_index(stack, m=2)
        for _ in range(20):
            q = _unit_rows(rng, 1, 8)[0]
            result = index.hierarchical_search(q, k=1)
            for li, hits in result.per_layer:
                ids, vecs = stack[li]
                assert hits[0][0] == _brute_top_k(vecs, ids, q, 1)[0][0]

    def test_reuse_chain_replays_search_layer(self):
        rng = np.random.default_rng(14)
        index = build_index(_layer_stack(rng, [50, 12, 3], 8), m=4)
        for trial in range(10):
            q = _unit_rows(rng, 1, 8)[0]
            result = index.hierarchical_search(q, k=3)
            start_id = int(index.layers[index.top].node_ids[index.entry_point])
            for li in range(index.top, -1, -1):
                expected = index.search_layer(li, q, start_id=start_id, k=3, ef=3)
                assert result.layer_hits(li) == expected
                if li > 0:
                    layer = index.layers[li]
                    nearest_pos = layer.position_of(expected[0][0])
                    below_pos = int(index.psi[li][nearest_pos])
                    start_id = int(index.layers[li - 1].node_ids[below_pos])

    def test_never_reenters_higher_layer(self):
        rng = np.random.default_rng(15)
        index = build_index(_layer_stack(rng, [40, 10, 3], 8), m=4)
        result = index.hierarchical_search(_unit_rows(rng, 1, 8)[0], k=2)
        assert [li for li, _ in result.per_layer] == [2, 1, 0]

    def test_k_exceeding_layer_returns_whole_layer(self):
        rng = np.random.default_rng(16)
        index = build_index(_layer_stack(rng, [12, 4, 2], 8), m=2)
        result = index.hierarchical_search(_unit_rows(rng, 1, 8)[0], k=6)
        assert len(result.layer_hits(2)) == 2
        assert len(result.layer_hits(1)) == 4
        assert len(result.layer_hits(0)) == 6

    def test_deterministic_across_calls(self):
        rng = np.random.default_rng(17)
        index = build_index(_layer_stack(rng, [40, 10], 8), m=4)
        q = _unit_rows(rng, 1, 8)[0]
        assert index.hierarchical_search(q, k=4).per_layer == (
            index.hierarchical_search(q, k=4).per_layer
        )


class TestPersistence:
    def _random_index(self, seed):
        rng = np.random.default_rng(seed)
        depth = int(rng.integers(1, 4))
        sizes = sorted(rng.integers(2, 40, size=depth).tolist(), reverse=True)
        return build_index(_layer_stack(rng, sizes, 8), m=4, seed=seed), rng

    def test_round_trip_searches_identical(self, tmp_path):
        index, rng = self._random_index(20)
        save_index(index, tmp_path / "idx")
        loaded = load_index(tmp_path / "idx")
        for _ in range(20):
            q = _unit_rows(rng, 1, 8)[0]
            a = index.hierarchical_search(q, k=5)
            b = loaded.hierarchical_search(q, k=5)
            for (la, hits_a), (lb, hits_b) in zip(a.per_layer, b.per_layer):
                assert la == lb
                assert [h[0] for h in hits_a] == [h[0] for h in hits_b]
                for (_, da), (_, db) in zip(hits_a, hits_b):
                    assert abs(da - db) <= 1e-6

    def test_truncated_file_raises(self, tmp_path):
        index, _ = self._random_index(21)
        save_index(index, tmp_path / "idx")
        victim = tmp_path / "idx" / "layer_0" / "vectors.bin"
        victim.write_bytes(victim.read_bytes()[:-8])
        with pytest.raises(CorruptIndex):
            load_index(tmp_path / "idx")

    def test_flipped_byte_raises(self, tmp_path):
        index, _ = self._random_index(22)
        save_index(index, tmp_path / "idx")
        victim = tmp_path / "idx" / "layer_0" / "nodes.bin"
        blob = bytearray(victim.read_bytes())
        blob[0] ^= 0xFF
        victim.write_bytes(bytes(blob))
        with pytest.raises(CorruptIndex):
            load_index(tmp_path / "idx")

    def test_version_bump_raises(self, tmp_path):
        import json

        index, _ = self._random_index(23)
        save_index(index, tmp_path / "idx")
        manifest_path = tmp_path / "idx" / "manifest.json"
        manifest = json.loads(manifest_path.read_text("utf-8"))
        manifest["format_version"] = 999
        manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(VersionMismatch):
            load_index(tmp_path / "idx")

    def test_missing_file_raises(self, tmp_path):
        index, _ = self._random_index(24)
        save_index(index, tmp_path / "idx")
        (tmp_path / "idx" / "inter.bin").unlink()
        with pytest.raises(CorruptIndex):
            load_index(tmp_path / "idx")
