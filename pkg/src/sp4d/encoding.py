"""Spatial color encoding of part label maps and the inverse back-mapping.

A part's color is its normalized first-frame 3-D center, so one palette
serves every view and frame. Back-mapping recovers discrete labels from
(possibly noisy) color images: segment proposals are flattened to their
modal color, then modal colors from all images are clustered jointly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import CollisionError, DegenerateError, DomainError
from .hdbscan import hdbscan
from .tensorio import part_ids, read_labelmap, write_labelmap

log = logging.getLogger(__name__)

BACKGROUND = np.array([1.0, 1.0, 1.0])
QUANT_LEVELS = 64
COLLISION_TOL = 1.0 / 256

Palette = dict  # part_id -> np.ndarray(3,)


def build_palette(centers: Mapping[int, Sequence[float]], bbox_min, bbox_max) -> Palette:
    """Map each part's first-frame center to a color in the unit cube."""
    lo = np.asarray(bbox_min, dtype=np.float64)
    hi = np.asarray(bbox_max, dtype=np.float64)
    extent = hi - lo
    if np.any(extent <= 0):
        raise DomainError(f"bounding box needs positive extent on every axis, got {extent}")
    palette = {}
    for pid in sorted(centers):
        c = np.asarray(centers[pid], dtype=np.float64)
        if np.any(c < lo) or np.any(c > hi):
            raise DomainError(f"center of part {pid} {c} lies outside the bounding box")
        if pid == 0:
            raise DomainError("part id 0 is reserved for background")
        palette[pid] = (c - lo) / extent
    ids = list(palette)
    for i, a in enumerate(ids):
        if np.max(np.abs(palette[a] - BACKGROUND)) < COLLISION_TOL:
            raise CollisionError(f"part {a} color collides with the background color")
        for b in ids[i + 1:]:
            if np.max(np.abs(palette[a] - palette[b])) < COLLISION_TOL:
                raise CollisionError(f"parts {a} and {b} have colors closer than 1/256 on every axis")
    return palette


def encode(labels: np.ndarray, palette: Palette) -> np.ndarray:
    labels = np.asarray(labels)
    missing = [p for p in part_ids(labels) if p not in palette]
    if missing:
        raise KeyError(f"part ids {missing} have no palette entry")
    lut_ids = np.array([0] + sorted(palette), dtype=np.int64)
    lut = np.vstack([BACKGROUND] + [palette[p] for p in sorted(palette)])
    idx = np.searchsorted(lut_ids, labels)
    return lut[idx]


def decode_exact(img: np.ndarray, palette: Palette) -> np.ndarray:
    """Inverse of :func:`encode` for noiseless images. Unknown colors -> 0."""
    out = np.zeros(img.shape[:2], dtype=np.int32)
    for pid, col in palette.items():
        out[np.all(img == col, axis=-1)] = pid
    return out


def quantize(img: np.ndarray) -> np.ndarray:
    """Integer lattice coordinates on the 64^3 grid, shape (..., 3)."""
    return np.clip(np.floor(np.asarray(img) * QUANT_LEVELS), 0, QUANT_LEVELS - 1).astype(np.int64)


def _keys(q: np.ndarray) -> np.ndarray:
    # lexicographic (r, g, b) order == integer order of these keys
    return (q[..., 0] * QUANT_LEVELS + q[..., 1]) * QUANT_LEVELS + q[..., 2]


def is_background(img: np.ndarray, bg_tol: float) -> np.ndarray:
    return np.max(np.abs(np.asarray(img) - BACKGROUND), axis=-1) <= bg_tol


@dataclass
class SegmentProposal:
    mask: np.ndarray
    source: str = "external"  # or "fallback"


@dataclass
class CleanupResult:
    image: np.ndarray
    modal_colors: list  # per segment; None for skipped (empty) segments
    skipped: int = 0


def _check_proposals(shape, segments: Sequence[SegmentProposal]) -> None:
    used = np.zeros(shape, dtype=bool)
    for s in segments:
        if s.mask.shape != shape:
            raise DomainError(f"segment mask shape {s.mask.shape} != image shape {shape}")
        if np.any(used & s.mask):
            raise DomainError("segment proposals overlap")
        used |= s.mask


def modal_color(pixels: np.ndarray) -> np.ndarray:
    """Mean color of the most populated 64^3 bin; ties go to the smallest bin."""
    keys = _keys(quantize(pixels))
    uniq, counts = np.unique(keys, return_counts=True)
    best = uniq[np.argmax(counts)]
    sel = pixels[keys == best]
    if np.all(sel == sel[0]):
        return sel[0].copy()
    return sel.mean(axis=0)


def mode_cleanup(img: np.ndarray, segments: Sequence[SegmentProposal]) -> CleanupResult:
    img = np.asarray(img, dtype=np.float64)
    _check_proposals(img.shape[:2], segments)
    out = img.copy()
    colors, skipped = [], 0
    for s in segments:
        if not s.mask.any():
            skipped += 1
            colors.append(None)
            continue
        c = modal_color(img[s.mask])
        out[s.mask] = c
        colors.append(c)
    if skipped:
        log.warning("mode_cleanup: skipped %d empty segment(s)", skipped)
    return CleanupResult(out, colors, skipped)


def _components(fg: np.ndarray, link_h: np.ndarray, link_v: np.ndarray) -> np.ndarray:
    """4-connected component ids (scan order of first pixel), -1 off ``fg``."""
    H, W = fg.shape
    idx = np.arange(H * W).reshape(H, W)
    rows = np.concatenate([idx[:, :-1][link_h], idx[:-1, :][link_v]])
    cols = np.concatenate([idx[:, 1:][link_h], idx[1:, :][link_v]])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(H * W, H * W))
    _, lab = connected_components(g, directed=False)
    lab = lab.reshape(H, W)
    out = np.full((H, W), -1, dtype=np.int64)
    flat_fg = fg.ravel()
    flat_lab = lab.ravel()
    remap: dict[int, int] = {}
    res = out.ravel()
    for p in np.flatnonzero(flat_fg):
        l = flat_lab[p]
        if l not in remap:
            remap[l] = len(remap)
        res[p] = remap[l]
    return res.reshape(H, W)


FRAGMENT_JOIN = 4.0   # fragment join tolerance in units of color_tol


def _absorb_small(comp: np.ndarray, min_area: int, n_fg: int | None = None,
                  img: np.ndarray | None = None, join_tol: float = 0.0) -> np.ndarray:
    """Merge components smaller than ``min_area`` into the neighbor sharing the
    longest border (ties: larger, then lower id); isolated ones are dropped.
    With ``n_fg`` and ``img``, ids below ``n_fg`` are foreground, and a small
    foreground component whose mean color is within ``join_tol`` (per channel)
    of a foreground neighbor's joins the closest such neighbor instead."""
    comp = comp.copy()
    H, W = comp.shape
    while True:
        ids, sizes = np.unique(comp[comp >= 0], return_counts=True)
        small = [(s, i) for i, s in zip(ids.tolist(), sizes.tolist()) if s < min_area]
        if not small:
            return comp
        size_of = dict(zip(ids.tolist(), sizes.tolist()))
        _, cid = min(small)
        mask = comp == cid
        border: dict[int, int] = {}
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            src = mask[max(0, -dy):H - max(0, dy), max(0, -dx):W - max(0, dx)]
            nb = comp[max(0, dy):H - max(0, -dy), max(0, dx):W - max(0, -dx)][src]
            for v in nb[(nb >= 0) & (nb != cid)].tolist():
                border[v] = border.get(v, 0) + 1
        if n_fg is not None and cid < n_fg and any(v < n_fg for v in border):
            mine = img[mask].mean(axis=0)
            dist = {v: float(np.abs(img[comp == v].mean(axis=0) - mine).max()) for v in border if v < n_fg}
            best = min(dist, key=lambda v: (dist[v], -border[v], v))
            if dist[best] <= join_tol:
                comp[mask] = best
                continue
        if border:
            tgt = min(border, key=lambda v: (-border[v], -size_of[v], v))
            comp[mask] = tgt
        else:
            comp[mask] = -1


def fallback_segments(img: np.ndarray, color_tol: float = 0.0, min_area: int = 1,
                      bg_tol: float = 0.1) -> list[SegmentProposal]:
    """Connected regions of similar quantized color, background excluded.

    Two 4-neighbors are linked when their quantized colors (bin centers)
    differ by at most ``color_tol`` on every channel. With ``min_area > 1``
    regions below that size are folded into their dominant neighbor.
    """
    if color_tol < 0:
        raise DomainError("color_tol must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    fg = ~is_background(img, bg_tol)
    qc = (quantize(img) + 0.5) / QUANT_LEVELS
    eps = 1e-12
    link_h = fg[:, :-1] & fg[:, 1:] & (np.max(np.abs(qc[:, :-1] - qc[:, 1:]), axis=-1) <= color_tol + eps)
    link_v = fg[:-1, :] & fg[1:, :] & (np.max(np.abs(qc[:-1] - qc[1:]), axis=-1) <= color_tol + eps)
    comp = _components(fg, link_h, link_v)
    if min_area > 1:
        # background regions compete too: specks that mostly touch background
        # are dropped and small background holes inside a part are filled.
        # Fragments close in color to a neighboring part join it (noise
        # specks with arbitrary colors rarely are).
        n_fg = int(comp.max()) + 1
        bg = _components(~fg, ~fg[:, :-1] & ~fg[:, 1:], ~fg[:-1, :] & ~fg[1:, :])
        comp = _absorb_small(np.where(fg, comp, bg + n_fg), min_area, n_fg, img, FRAGMENT_JOIN * color_tol)
        comp[comp >= n_fg] = -1
    ids = []
    seen = set()
    for v in comp.ravel().tolist():
        if v >= 0 and v not in seen:
            seen.add(v)
            ids.append(v)
    return [SegmentProposal(comp == i, "fallback") for i in ids]


def cluster_colors(samples, min_cluster_size: int = 5) -> np.ndarray:
    """Density clustering of color samples (Euclidean RGB); -1 is noise.

    Selection excludes the root; if that leaves no cluster, the root is
    allowed. Backmap sends noise to the nearest cluster, so a one-part
    object still yields one part."""
    if min_cluster_size < 2:
        raise DomainError("min_cluster_size must be >= 2")
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    # the root wins excess of mass too easily when parts differ along one
    # color axis only, so a single cluster is only the fallback
    labels = hdbscan(samples, min_cluster_size=min_cluster_size, allow_single_cluster=False)
    if labels.max(initial=-1) < 0:
        labels = hdbscan(samples, min_cluster_size=min_cluster_size, allow_single_cluster=True)
    return labels


@dataclass
class BackmapResult:
    labels: list
    palette: Palette
    n_noise_segments: int = 0
    cleaned: list = field(default_factory=list)


def backmap(images: Sequence[np.ndarray], segments: Sequence[Sequence[SegmentProposal]] | None = None,
            min_cluster_size: int = 3, color_tol: float = 1.0 / 64, min_area: int = 4,
            bg_tol: float = 0.1) -> BackmapResult:
    """Recover label maps shared across all ``images``.

    Cluster ``k`` (ordered by centroid color) becomes part id ``k + 1``.
    Pixels outside every non-background segment are labeled 0.
    """
    if len(images) == 0:
        raise DomainError("backmap needs at least one image")
    if segments is not None and len(segments) != len(images):
        raise DomainError("need one segment list per image")
    per_image, samples, owners = [], [], []
    cleaned = []
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        segs = segments[i] if segments is not None else fallback_segments(img, color_tol, min_area, bg_tol)
        res = mode_cleanup(img, segs)
        cleaned.append(res.image)
        kept = []
        for s, c in zip(segs, res.modal_colors):
            if c is None or np.max(np.abs(c - BACKGROUND)) <= bg_tol:
                continue
            owners.append((i, len(kept)))
            kept.append(s.mask)
            samples.append(c)
        per_image.append(kept)
    if not samples:
        raise DegenerateError("no foreground segments to cluster")
    X = np.array(samples)
    lab = cluster_colors(X, min_cluster_size) if len(X) >= min_cluster_size else np.full(len(X), -1)
    found = sorted(set(lab.tolist()) - {-1})
    if not found:
        raise DegenerateError("density clustering found zero clusters")
    cents = np.array([X[lab == k].mean(axis=0) for k in found])
    order = sorted(range(len(found)), key=lambda j: tuple(cents[j]))
    rank = {found[j]: r for r, j in enumerate(order)}
    cents = cents[order]
    n_noise = 0
    assign = np.empty(len(X), dtype=np.int64)
    for s in range(len(X)):
        if lab[s] >= 0:
            assign[s] = rank[lab[s]]
        else:
            n_noise += 1
            assign[s] = int(np.argmin(((cents - X[s]) ** 2).sum(axis=1)))
    out = [np.zeros(np.asarray(img).shape[:2], dtype=np.int32) for img in images]
    for s, (i, j) in enumerate(owners):
        out[i][per_image[i][j]] = assign[s] + 1
    palette = {k + 1: cents[k] for k in range(len(cents))}
    return BackmapResult(out, palette, n_noise, cleaned)


# segment-proposal interchange: 16-bit PNG, pixel value = 1 + segment index


def write_segments(segments: Sequence[SegmentProposal], shape, path) -> None:
    _check_proposals(tuple(shape), segments)
    lab = np.zeros(shape, dtype=np.int64)
    for k, s in enumerate(segments):
        lab[s.mask] = k + 1
    write_labelmap(lab, path)


def read_segments(path) -> list[SegmentProposal]:
    lab = read_labelmap(path)
    return [SegmentProposal(lab == k, "external") for k in part_ids(lab)]
