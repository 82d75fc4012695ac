"""Numba kernels shared by the multi-layer index and the flat-graph baseline.

Everything operates on positions (0..n-1 within one layer); id mapping stays
in the Python wrappers. Distances are 1 - <x, q> on unit vectors, accumulated
in float64 from float32 inputs. All orderings compare (distance, position)
lexicographically so equal distances resolve toward the lower position, which
is the lower node id because layers store ids in ascending order.
"""

from __future__ import annotations

import numpy as np
from numba import njit

NO_NODE = np.int64(-1)


@njit(cache=True, nogil=True, inline="always")
def _dist(vecs, i, q):
    acc = 0.0
    for j in range(q.shape[0]):
        acc += np.float64(vecs[i, j]) * np.float64(q[j])
    return 1.0 - acc


# -- binary heaps over parallel arrays ---------------------------------------
# Min-heap: root is the nearest (smallest (d, i)). Max-heap: root is the
# furthest (largest (d, i)).


@njit(cache=True, nogil=True, inline="always")
def _less(d_a, i_a, d_b, i_b):
    return d_a < d_b or (d_a == d_b and i_a < i_b)


@njit(cache=True, nogil=True)
def _push_min(hd, hi, size, d, i):
    pos = size
    hd[pos] = d
    hi[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(hd[pos], hi[pos], hd[parent], hi[parent]):
            hd[pos], hd[parent] = hd[parent], hd[pos]
            hi[pos], hi[parent] = hi[parent], hi[pos]
            pos = parent
        else:
            break
    return size + 1


@njit(cache=True, nogil=True)
def _pop_min(hd, hi, size):
    top_d = hd[0]
    top_i = hi[0]
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and _less(hd[right], hi[right], hd[left], hi[left]):
            child = right
        if _less(hd[child], hi[child], hd[pos], hi[pos]):
            hd[pos], hd[child] = hd[child], hd[pos]
            hi[pos], hi[child] = hi[child], hi[pos]
            pos = child
        else:
            break
    return top_d, top_i, size


@njit(cache=True, nogil=True)
def _push_max(hd, hi, size, d, i):
    pos = size
    hd[pos] = d
    hi[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(hd[parent], hi[parent], hd[pos], hi[pos]):
            hd[pos], hd[parent] = hd[parent], hd[pos]
            hi[pos], hi[parent] = hi[parent], hi[pos]
            pos = parent
        else:
            break
    return size + 1


@njit(cache=True, nogil=True)
def _pop_max(hd, hi, size):
    top_d = hd[0]
    top_i = hi[0]
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and _less(hd[left], hi[left], hd[right], hi[right]):
            child = right
        if _less(hd[pos], hi[pos], hd[child], hi[child]):
            hd[pos], hd[child] = hd[child], hd[pos]
            hi[pos], hi[child] = hi[child], hi[pos]
            pos = child
        else:
            break
    return top_d, top_i, size


@njit(cache=True, nogil=True)
def search_layer(
    vecs,
    adj,
    deg,
    q,
    start,
    beam,
    visited,
    stamp,
    cand_d,
    cand_i,
    res_d,
    res_i,
    out_d,
    out_i,
):
    """Greedy best-first traversal from `start` with a result set capped at
    `beam`. Fills out_d/out_i ascending by (distance, position) and returns
    (result_count, distance_evaluations).

    A popped candidate stops the loop when it is strictly farther than the
    furthest kept result; a neighbor is admitted while the result set is not
    full or when it is strictly nearer than the furthest kept result.
    """
    evals = 0
    visited[start] = stamp
    d0 = _dist(vecs, start, q)
    evals += 1
    cand_size = _push_min(cand_d, cand_i, 0, d0, start)
    res_size = _push_max(res_d, res_i, 0, d0, start)
    while cand_size > 0:
        cd, ci, cand_size = _pop_min(cand_d, cand_i, cand_size)
        if cd > res_d[0]:
            break
        for t in range(deg[ci]):
            x = adj[ci, t]
            if visited[x] == stamp:
                continue
            visited[x] = stamp
            dx = _dist(vecs, x, q)
            evals += 1
            if res_size < beam or dx < res_d[0]:
                cand_size = _push_min(cand_d, cand_i, cand_size, dx, x)
                res_size = _push_max(res_d, res_i, res_size, dx, x)
                if res_size > beam:
                    _, _, res_size = _pop_max(res_d, res_i, res_size)
    count = res_size
    idx = count - 1
    while res_size > 0:
        d, i, res_size = _pop_max(res_d, res_i, res_size)
        out_d[idx] = d
        out_i[idx] = i
        idx -= 1
    return count, evals


@njit(cache=True, nogil=True)
def connect_node(vecs, adj, deg, v, cand_i, cand_d, cand_count, m, max_deg):
    """Link the fresh node v bidirectionally to `m` diversified candidates.

    Selection walks the candidates in ascending distance order and keeps one
    only if it is closer to v than to every candidate kept so far; remaining
    slots are refilled from the skipped candidates, nearest first, so v still
    gets min(m, cand_count) links. The spread keeps neighbor lists from
    collapsing into one tight ball, which starves the beam search of long
    edges.

    A neighbor list overflowing `max_deg` is pruned by dropping the furthest
    member whose own degree stays above m after the drop (both directions
    removed, keeping adjacency symmetric); if no member qualifies, the
    furthest is dropped regardless.
    """
    links = m if cand_count > m else cand_count
    sel_i = np.empty(links, dtype=np.int64)
    sel_d = np.empty(links, dtype=np.float64)
    skip_i = np.empty(cand_count, dtype=np.int64)
    skip_d = np.empty(cand_count, dtype=np.float64)
    kept = 0
    n_skip = 0
    for t in range(cand_count):
        if kept == links:
            break
        c = cand_i[t]
        dc = cand_d[t]
        good = True
        for s in range(kept):
            if _dist(vecs, c, vecs[sel_i[s]]) < dc:
                good = False
                break
        if good:
            sel_i[kept] = c
            sel_d[kept] = dc
            kept += 1
        else:
            skip_i[n_skip] = c
            skip_d[n_skip] = dc
            n_skip += 1
    f = 0
    while kept < links and f < n_skip:
        sel_i[kept] = skip_i[f]
        sel_d[kept] = skip_d[f]
        kept += 1
        f += 1
    cand_i = sel_i
    cand_d = sel_d
    for t in range(links):
        w = cand_i[t]
        adj[v, deg[v]] = w
        deg[v] += 1
        if deg[w] < max_deg:
            adj[w, deg[w]] = v
            deg[w] += 1
            continue
        # Overflow: rank w's neighbors plus v by distance from w.
        total = deg[w] + 1
        dists = np.empty(total, dtype=np.float64)
        nodes = np.empty(total, dtype=np.int64)
        for s in range(deg[w]):
            nodes[s] = adj[w, s]
            dists[s] = _dist(vecs, adj[w, s], vecs[w])
        nodes[total - 1] = v
        dists[total - 1] = cand_d[t]
        # Insertion sort ascending by (distance, position).
        for a in range(1, total):
            kd = dists[a]
            ki = nodes[a]
            b = a - 1
            while b >= 0 and _less(kd, ki, dists[b], nodes[b]):
                dists[b + 1] = dists[b]
                nodes[b + 1] = nodes[b]
                b -= 1
            dists[b + 1] = kd
            nodes[b + 1] = ki
        drop = -1
        for a in range(total - 1, -1, -1):
            x = nodes[a]
            if x == v:
                if deg[v] > m:  # never starve the node being inserted
                    drop = a
                    break
                continue
            if deg[x] > m:
                drop = a
                break
        if drop < 0:
            drop = total - 1
        dropped = nodes[drop]
        # Rebuild w's list without the dropped member (v sits at the end).
        size = 0
        for a in range(total):
            if a == drop:
                continue
            adj[w, size] = nodes[a]
            size += 1
        deg[w] = size
        if dropped == v:
            # The new edge lost: remove w from v's freshly built list too.
            for s in range(deg[v]):
                if adj[v, s] == w:
                    for r in range(s, deg[v] - 1):
                        adj[v, r] = adj[v, r + 1]
                    deg[v] -= 1
                    break
        else:
            # Symmetric removal of the dropped edge on the other side.
            for s in range(deg[dropped]):
                if adj[dropped, s] == w:
                    for r in range(s, deg[dropped] - 1):
                        adj[dropped, r] = adj[dropped, r + 1]
                    deg[dropped] -= 1
                    break


@njit(cache=True, nogil=True)
def greedy_descend(vecs, adj, deg, q, start):
    """Pure greedy walk to a local minimum; returns (position, distance, evals).

    Used for the internal descent of the flat-graph baseline's upper levels.
    """
    cur = start
    cur_d = _dist(vecs, cur, q)
    evals = 1
    improved = True
    while improved:
        improved = False
        for t in range(deg[cur]):
            x = adj[cur, t]
            dx = _dist(vecs, x, q)
            evals += 1
            if _less(dx, x, cur_d, cur):
                cur = x
                cur_d = dx
                improved = True
    return cur, cur_d, evals
