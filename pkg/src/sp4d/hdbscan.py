"""Hierarchical density clustering (HDBSCAN with excess-of-mass selection).

Core distances count the point itself, i.e. the core distance of ``x`` is
its distance to the ``(min_samples - 1)``-th nearest other point.
"""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy.spatial import cKDTree


def core_distances(X: np.ndarray, min_samples: int) -> np.ndarray:
    k = min(min_samples, len(X))
    if k <= 1:
        return np.zeros(len(X))
    d, _ = cKDTree(X).query(X, k=k)
    return d[:, -1]


def mutual_reachability_mst(X: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Prim's algorithm over the implicit complete mutual-reachability graph.

    Returns (n - 1, 3) rows ``(a, b, distance)``. Memory is O(n); each step
    computes one row of distances.
    """
    n = len(X)
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    src = np.zeros(n, dtype=np.int64)
    edges = np.empty((max(n - 1, 0), 3))
    cur = 0
    in_tree[0] = True
    for i in range(n - 1):
        d = np.sqrt(((X - X[cur]) ** 2).sum(axis=1))
        mr = np.maximum(np.maximum(d, core), core[cur])
        upd = (~in_tree) & (mr < best)
        best[upd] = mr[upd]
        src[upd] = cur
        cand = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(cand))
        edges[i] = (src[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        cur = nxt
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Dendrogram rows ``(left, right, distance, size)``; node ``n + i`` is
    created by row ``i``."""
    order = np.argsort(mst[:, 2], kind="stable")
    parent = np.arange(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    out = np.zeros((n - 1, 4))
    for i, e in enumerate(order):
        a, b, d = int(mst[e, 0]), int(mst[e, 1]), mst[e, 2]
        ra, rb = find(a), find(b)
        node = n + i
        out[i] = (ra, rb, d, size[ra] + size[rb])
        parent[ra] = parent[rb] = node
        size[node] = size[ra] + size[rb]
    return out


def _leaves(hier: np.ndarray, node: int, n: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        if x < n:
            out.append(x)
        else:
            l, r = hier[x - n, :2]
            stack.append(int(l))
            stack.append(int(r))
    return out


def condense_tree(hier: np.ndarray, min_cluster_size: int) -> list[tuple[int, int, float, int]]:
    """Rows ``(parent_cluster, child, lambda, child_size)``; points are
    ``0..n-1``, clusters are numbered from ``n`` (the root)."""
    n = len(hier) + 1
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows = []
    queue = deque([root])
    while queue:
        node = queue.popleft()
        if node < n:
            continue
        left, right, dist, _ = hier[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0 else np.inf
        lc = int(hier[left - n, 3]) if left >= n else 1
        rc = int(hier[right - n, 3]) if right >= n else 1
        if lc >= min_cluster_size and rc >= min_cluster_size:
            for child, cnt in ((left, lc), (right, rc)):
                relabel[child] = next_label
                next_label += 1
                rows.append((relabel[node], relabel[child], lam, cnt))
                queue.append(child)
        elif lc < min_cluster_size and rc < min_cluster_size:
            for child in (left, right):
                rows.extend((relabel[node], p, lam, 1) for p in _leaves(hier, child, n))
        elif lc < min_cluster_size:
            relabel[right] = relabel[node]
            rows.extend((relabel[node], p, lam, 1) for p in _leaves(hier, left, n))
            queue.append(right)
        else:
            relabel[left] = relabel[node]
            rows.extend((relabel[node], p, lam, 1) for p in _leaves(hier, right, n))
            queue.append(left)
    return rows


def _stability(rows, root: int) -> dict[int, float]:
    births = {root: 0.0}
    for p, c, lam, sz in rows:
        births[c] = lam
    stab: dict[int, float] = {}
    for p, c, lam, sz in rows:
        stab[p] = stab.get(p, 0.0) + (lam - births[p]) * sz
    return stab


def hdbscan(X, min_cluster_size: int = 5, min_samples: int | None = None,
            allow_single_cluster: bool = True) -> np.ndarray:
    """Cluster labels for the rows of ``X``; ``-1`` marks noise.

    Fewer samples than ``min_cluster_size`` yields all noise.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be >= 2")
    if n < min_cluster_size or n < 2:
        return np.full(n, -1, dtype=np.int64)
    ms = min_cluster_size if min_samples is None else min_samples
    core = core_distances(X, ms)
    hier = single_linkage(mutual_reachability_mst(X, core), n)
    rows = condense_tree(hier, min_cluster_size)
    root = n
    stab = _stability(rows, root)

    children: dict[int, list[int]] = {}
    for p, c, lam, sz in rows:
        if sz > 1:
            children.setdefault(p, []).append(c)
    nodes = sorted(stab, reverse=True)
    if not allow_single_cluster:
        nodes = [c for c in nodes if c != root]
    is_cluster = {c: True for c in nodes}
    for node in nodes:
        sub = sum(stab.get(ch, 0.0) for ch in children.get(node, []))
        if sub > stab[node]:
            is_cluster[node] = False
            stab[node] = sub
        else:
            stack = list(children.get(node, []))
            while stack:
                x = stack.pop()
                is_cluster[x] = False
                stack.extend(children.get(x, []))
    clusters = sorted(c for c, v in is_cluster.items() if v)
    label_of = {c: i for i, c in enumerate(clusters)}

    # union every (parent, child) edge whose child is not a selected cluster
    uf = {}

    def find(x):
        while uf.get(x, x) != x:
            x = uf[x]
        return x

    for p, c, lam, sz in rows:
        if c not in label_of:
            rp, rc = find(p), find(c)
            if rp != rc:
                uf[rc] = rp
    point_lambda = {c: lam for p, c, lam, sz in rows if c < n}
    root_max = max((lam for p, c, lam, sz in rows if p == root), default=np.inf)
    labels = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        cl = find(i)
        if cl != root:
            labels[i] = label_of[cl]
        elif len(clusters) == 1 and allow_single_cluster and root in label_of:
            if point_lambda[i] >= root_max:
                labels[i] = label_of[root]
    return labels


def canonical_labels(labels) -> np.ndarray:
    """Relabel clusters by order of first occurrence; noise stays -1."""
    labels = np.asarray(labels)
    out = np.full(labels.shape, -1, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, v in enumerate(labels.tolist()):
        if v < 0:
            continue
        if v not in mapping:
            mapping[v] = len(mapping)
        out[i] = mapping[v]
    return out
