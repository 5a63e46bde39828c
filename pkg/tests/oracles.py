"""Independent brute-force oracles shared by unit and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np


def brute_assignment(cost, maximize=False):
    """Best total over all injective row->column (or column->row) maps."""
    C = np.asarray(cost, dtype=float)
    n, m = C.shape
    best = None
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            s = sum(C[i, c] for i, c in enumerate(cols))
            if best is None or (s > best if maximize else s < best):
                best = s
    else:
        for rows in itertools.permutations(range(n), m):
            s = sum(C[r, j] for j, r in enumerate(rows))
            if best is None or (s > best if maximize else s < best):
                best = s
    return best


def naive_counts(pred, gt, pid, gid, excluded=()):
    """Per-pixel loop: (intersection, pred size on non-excluded, gt size)."""
    inter = ps = gs = 0
    for P, G in zip(pred, gt):
        for y in range(P.shape[0]):
            for x in range(P.shape[1]):
                p, g = int(P[y, x]), int(G[y, x])
                if g in excluded:
                    continue
                if p == pid:
                    ps += 1
                if g == gid:
                    gs += 1
                if p == pid and g == gid:
                    inter += 1
    return inter, ps, gs


def naive_ari(a, b):
    """Pair-counting ARI with O(n^2) loops."""
    a = list(a)
    b = list(b)
    n = len(a)
    if n <= 1:
        return 1.0
    both = same_a = same_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = a[i] == a[j]
            sb = b[i] == b[j]
            same_a += sa
            same_b += sb
            both += sa and sb
    total = n * (n - 1) / 2
    expected = same_a * same_b / total
    mx = (same_a + same_b) / 2
    if mx == expected:
        return 1.0
    return (both - expected) / (mx - expected)


def naive_metrics(pred, gt, first_image_filter=True):
    """All optimal matchings by enumeration; returns a list of metric dicts,
    one per optimal assignment (several when total IoU ties)."""
    gt_present = sorted({int(v) for G in gt for v in np.unique(G) if v != 0})
    first = {int(v) for v in np.unique(gt[0])}
    keep = [g for g in gt_present if g in first] if first_image_filter else gt_present
    excluded = tuple(g for g in gt_present if g not in keep)
    pred_ids = sorted({int(v) for P, G in zip(pred, gt) for v in P[~np.isin(G, excluded)] if v != 0})
    iou = {}
    for p in pred_ids:
        for g in keep:
            i, ps, gs = naive_counts(pred, gt, p, g, excluded)
            u = ps + gs - i
            iou[p, g] = i / u if u else 0.0
    # ARI over GT-foreground, non-excluded pixels
    fa, fb = [], []
    for P, G in zip(pred, gt):
        for y in range(P.shape[0]):
            for x in range(P.shape[1]):
                g = int(G[y, x])
                if g != 0 and g not in excluded:
                    fa.append(int(P[y, x]))
                    fb.append(g)
    ari = naive_ari(fa, fb)
    results = []
    cands = []
    if len(keep) <= len(pred_ids):
        for psel in itertools.permutations(pred_ids, len(keep)):
            cands.append(dict(zip(keep, psel)))
    else:
        for gsel in itertools.permutations(keep, len(pred_ids)):
            cands.append(dict(zip(gsel, pred_ids)))
    totals = [sum(iou[p, g] for g, p in c.items()) for c in cands]
    top = max(totals) if totals else 0.0
    for c, t in zip(cands, totals):
        if abs(t - top) > 1e-12:
            continue
        ious, f1s, accs = [], [], []
        for g in keep:
            if g in c:
                i, ps, gs = naive_counts(pred, gt, c[g], g, excluded)
                u = ps + gs - i
                pr = i / ps if ps else 0.0
                rc = i / gs if gs else 0.0
                ious.append(i / u if u else 0.0)
                f1s.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
                accs.append(rc)
            else:
                ious.append(0.0)
                f1s.append(0.0)
                accs.append(0.0)
        results.append({"miou": np.mean(ious), "f1": np.mean(f1s), "macc": np.mean(accs), "ari": ari})
    return results


def dense_harmonic(L, labels, part, edges):
    """Dense Dirichlet solve. Boundary vertices are the endpoints of mesh
    edges whose labels differ."""
    L = np.asarray(L, dtype=float)
    n = len(L)
    bnd = sorted({int(v) for a, b in edges if labels[a] != labels[b] for v in (a, b)})
    inner = [i for i in range(n) if i not in set(bnd)]
    w = np.zeros(n)
    w[bnd] = [1.0 if labels[i] == part else 0.0 for i in bnd]
    if inner:
        A = L[np.ix_(inner, inner)]
        rhs = -L[np.ix_(inner, bnd)] @ w[bnd]
        w[inner] = np.linalg.solve(A, rhs)
    return w
