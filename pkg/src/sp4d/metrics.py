"""Label-free segmentation metrics with Hungarian part matching.

One global matching is computed per sequence of label maps. Unmatched
ground-truth parts score 0 in mIoU, F1 and mAcc (they are averaged over all
ground-truth parts). Background (label 0 in the ground truth) is excluded
from the ARI partition.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateError, DomainError, ShapeError
from .tensorio import read_labelmap

log = logging.getLogger(__name__)

UNMATCHED_NOTE = "mIoU/F1/mAcc average over all ground-truth parts; unmatched parts score 0"


def hungarian(cost, maximize: bool = False) -> list[tuple[int, int]]:
    """Optimal one-to-one assignment covering ``min(rows, cols)`` pairs.

    Shortest augmenting paths with row/column potentials, O(n^2 m).
    Returns ``(row, col)`` pairs sorted by row.
    """
    C = np.asarray(cost, dtype=np.float64)
    if C.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {C.shape}")
    if C.size == 0:
        return []
    if not np.all(np.isfinite(C)):
        raise DomainError("cost matrix has non-finite entries")
    if maximize:
        C = -C
    transposed = C.shape[0] > C.shape[1]
    if transposed:
        C = C.T
    n, m = C.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)    # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            um = used.copy()
            u[p[um]] += delta
            v[um] -= delta
            minv[~um] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    if transposed:
        pairs = [(c, r) for r, c in pairs]
    return sorted(pairs)


@dataclass
class Matching:
    pairs: list                      # (pred_id, gt_id)
    unmatched_gt: list
    unmatched_pred: list
    iou: dict = field(default_factory=dict)   # (pred_id, gt_id) -> IoU
    gt_ids: list = field(default_factory=list)
    excluded_gt: list = field(default_factory=list)


@dataclass
class MetricReport:
    miou: float
    ari: float
    f1: float
    macc: float
    per_part: list = field(default_factory=list)
    setting: str | None = None
    note: str = UNMATCHED_NOTE

    def to_dict(self) -> dict:
        return asdict(self)


def _stack(maps: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(m) for m in maps]).astype(np.int64)


def _check(pred, gt):
    if len(pred) != len(gt):
        raise ShapeError(f"sequence lengths differ: pred {len(pred)} vs gt {len(gt)}")
    for i, (a, b) in enumerate(zip(pred, gt)):
        if np.shape(a) != np.shape(b):
            raise ShapeError(f"image {i}: pred shape {np.shape(a)} != gt shape {np.shape(b)}")
    if len(gt) == 0:
        raise ShapeError("empty sequence")


def _contingency(p: np.ndarray, g: np.ndarray):
    """Counts of (pred, gt) label pairs: returns (pred_ids, gt_ids, table)."""
    pu, pi = np.unique(p, return_inverse=True)
    gu, gi = np.unique(g, return_inverse=True)
    table = np.zeros((len(pu), len(gu)), dtype=np.int64)
    np.add.at(table, (pi.ravel(), gi.ravel()), 1)
    return pu, gu, table


def _valid_gt(G: np.ndarray, first_image_filter: bool):
    present = [int(x) for x in np.unique(G) if x != 0]
    if first_image_filter:
        first = set(np.unique(G[0]).tolist())
        keep = [g for g in present if g in first]
    else:
        keep = present
    excluded = [g for g in present if g not in keep]
    return keep, excluded


def match_parts(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                first_image_filter: bool = True) -> Matching:
    """Match predicted to ground-truth parts by IoU pooled over the sequence.

    With ``first_image_filter`` ground-truth parts absent from the first
    image are excluded from matching and from all metrics.
    """
    _check(pred, gt)
    P, G = _stack(pred), _stack(gt)
    keep, excluded = _valid_gt(G, first_image_filter)
    # pixels of excluded parts are removed from consideration entirely
    valid = ~np.isin(G, excluded)
    Pv, Gv = P[valid], G[valid]
    pred_ids = [int(x) for x in np.unique(Pv) if x != 0]
    if not keep or not pred_ids:
        return Matching([], list(keep), pred_ids, {}, list(keep), excluded)
    pu, gu, table = _contingency(Pv, Gv)
    prow = {int(x): i for i, x in enumerate(pu)}
    gcol = {int(x): j for j, x in enumerate(gu)}
    psize = table.sum(axis=1)
    gsize = table.sum(axis=0)
    iou = np.zeros((len(pred_ids), len(keep)))
    for a, pid in enumerate(pred_ids):
        for b, gid in enumerate(keep):
            inter = table[prow[pid], gcol[gid]]
            union = psize[prow[pid]] + gsize[gcol[gid]] - inter
            iou[a, b] = inter / union if union else 0.0
    pairs = [(pred_ids[a], keep[b]) for a, b in hungarian(iou, maximize=True)]
    used_p = {p for p, _ in pairs}
    used_g = {g for _, g in pairs}
    ious = {(pred_ids[a], keep[b]): float(iou[a, b]) for a in range(len(pred_ids)) for b in range(len(keep))}
    return Matching(
        pairs=pairs,
        unmatched_gt=[g for g in keep if g not in used_g],
        unmatched_pred=[p for p in pred_ids if p not in used_p],
        iou={k: ious[k] for k in pairs},
        gt_ids=list(keep),
        excluded_gt=excluded,
    )


def _comb2(x):
    x = np.asarray(x, dtype=np.int64)
    return x * (x - 1) // 2


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """ARI of two flat labelings (contingency-table formula)."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    n = a.size
    if n <= 1:
        return 1.0
    _, _, table = _contingency(a, b)
    index = int(_comb2(table).sum())
    sa = int(_comb2(table.sum(axis=1)).sum())
    sb = int(_comb2(table.sum(axis=0)).sum())
    total = n * (n - 1) // 2
    expected = sa * sb / total
    max_index = (sa + sb) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def compute_metrics(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], matching: Matching,
                    setting: str | None = None) -> MetricReport:
    _check(pred, gt)
    gt_ids = matching.gt_ids
    if not gt_ids:
        raise DegenerateError("no ground-truth parts left after filtering; report undefined")
    P, G = _stack(pred), _stack(gt)
    fg = (G != 0) & ~np.isin(G, matching.excluded_gt)
    ari = adjusted_rand_index(P[fg], G[fg])
    matched = {g: p for p, g in matching.pairs}
    per_part, ious, f1s, accs = [], [], [], []
    for g in gt_ids:
        gmask = G == g
        if g in matched:
            pmask = P == matched[g]
            inter = int(np.sum(pmask & gmask))
            # predicted pixels on excluded GT parts do not count against precision
            psize = int(np.sum(pmask & ~np.isin(G, matching.excluded_gt)))
            gsize = int(gmask.sum())
            union = psize + gsize - inter
            iou = inter / union if union else 0.0
            prec = inter / psize if psize else 0.0
            rec = inter / gsize if gsize else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        else:
            iou = prec = rec = f1 = 0.0
        per_part.append({"gt_id": int(g), "pred_id": matched.get(g), "iou": iou,
                         "precision": prec, "recall": rec, "f1": f1})
        ious.append(iou)
        f1s.append(f1)
        accs.append(rec)
    k = len(gt_ids)
    return MetricReport(miou=sum(ious) / k, ari=ari, f1=sum(f1s) / k, macc=sum(accs) / k,
                        per_part=per_part, setting=setting)


def evaluate(pred, gt, first_image_filter: bool = True, setting: str | None = None) -> MetricReport:
    return compute_metrics(pred, gt, match_parts(pred, gt, first_image_filter), setting)


def mean_report(reports: Sequence[MetricReport], setting: str | None = None) -> MetricReport:
    """Unweighted mean of scalar metrics."""
    if not reports:
        raise DegenerateError("nothing to aggregate")
    k = len(reports)
    return MetricReport(
        miou=sum(r.miou for r in reports) / k,
        ari=sum(r.ari for r in reports) / k,
        f1=sum(r.f1 for r in reports) / k,
        macc=sum(r.macc for r in reports) / k,
        per_part=[],
        setting=setting,
    )


SETTINGS = ("multi-view", "multi-frame")


def label_path(obj_dir: Path, view: int, frame: int) -> Path:
    return Path(obj_dir) / "labels" / f"v{view:02d}_f{frame:02d}.png"


def load_dataset_manifest(path) -> list[dict]:
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        if line.strip():
            row = json.loads(line)
            row["_dir"] = (path.parent / row["dir"]).resolve()
            rows.append(row)
    return rows


def evaluate_object(gt_dir, pred_dir, views: int, frames: int, setting: str,
                    first_image_filter: bool = True) -> MetricReport:
    """Average over all fixed frames (multi-view) or fixed views (multi-frame)."""
    if setting not in SETTINGS:
        raise DomainError(f"setting must be one of {SETTINGS}, got {setting!r}")
    seqs = []
    if setting == "multi-view":
        for f in range(frames):
            seqs.append([(v, f) for v in range(views)])
    else:
        for v in range(views):
            seqs.append([(v, f) for f in range(frames)])
    reports = []
    for seq in seqs:
        gt = [read_labelmap(label_path(gt_dir, v, f)) for v, f in seq]
        pr = [read_labelmap(label_path(pred_dir, v, f)) for v, f in seq]
        reports.append(evaluate(pr, gt, first_image_filter, setting))
    return mean_report(reports, setting)


@dataclass
class SuiteReport:
    aggregate: MetricReport | None
    objects: dict
    missing: list
    setting: str

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "note": UNMATCHED_NOTE,
            "aggregate": None if self.aggregate is None else self.aggregate.to_dict(),
            "objects": {k: v.to_dict() for k, v in self.objects.items()},
            "missing": self.missing,
        }


def evaluate_suite(manifest, predictions_dir, setting: str, first_image_filter: bool = True) -> SuiteReport:
    """Evaluate every kept object in a dataset manifest against predictions
    stored as ``<predictions_dir>/<object>/labels/vVV_fFF.png``."""
    rows = sorted(load_dataset_manifest(manifest), key=lambda r: r["object"])
    reports, missing = {}, []
    for row in rows:
        if row.get("status", "kept") != "kept":
            continue
        name = row["object"]
        pdir = Path(predictions_dir) / name
        need = [label_path(pdir, v, f) for v in range(row["views"]) for f in range(row["frames"])]
        absent = [str(p) for p in need if not p.exists()]
        if absent:
            log.warning("object %s: %d prediction file(s) missing, skipped", name, len(absent))
            missing.append({"object": name, "files": absent})
            continue
        reports[name] = evaluate_object(row["_dir"], pdir, row["views"], row["frames"], setting,
                                        first_image_filter)
    agg = mean_report(list(reports.values()), setting) if reports else None
    return SuiteReport(agg, reports, missing, setting)


def write_suite_report(rep: SuiteReport, out_dir, csv_rows: bool = True, extra: dict | None = None) -> Path:
    """``metrics_<setting>.json`` (plus ``extra`` top-level keys) and a
    per-object CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"metrics_{rep.setting}.json"
    doc = rep.to_dict()
    doc.update(extra or {})
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if csv_rows:
        with open(out_dir / f"metrics_{rep.setting}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["object", "miou", "ari", "f1", "macc"])
            for name, r in rep.objects.items():
                w.writerow([name, repr(r.miou), repr(r.ari), repr(r.f1), repr(r.macc)])
    return path
