"""Contrastive part-consistency loss.

Part features are mean-pooled over each part's pixels, projected and
L2-normalized. The InfoNCE objective treats features with the same part
identity from a different (view, frame) as positives and every other
feature as a negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

log = logging.getLogger(__name__)

TAU = 0.07


@dataclass
class PartFeature:
    vector: np.ndarray
    identity: int
    origin: tuple


@dataclass
class ContrastConfig:
    tau: float = TAU
    embed_dim: int = 16

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError(f"tau must be > 0, got {self.tau}")


@dataclass
class InfoNCEResult:
    loss: float
    grad: np.ndarray        # d loss / d vectors, same shape as the input stack
    n_pairs: int
    degenerate: bool        # True when no positive pair existed


def part_masks(lm: np.ndarray) -> tuple[list[int], np.ndarray]:
    """Part ids and a (P, H*W) row-normalized averaging matrix."""
    ids = [int(v) for v in np.unique(lm) if v != 0]
    flat = lm.reshape(-1)
    M = np.zeros((len(ids), flat.size))
    for r, p in enumerate(ids):
        m = flat == p
        M[r, m] = 1.0 / m.sum()
    return ids, M


def pool_part_features(feature_map: np.ndarray, lm: np.ndarray, proj: np.ndarray,
                       bias: np.ndarray | None = None, origin=(0, 0)) -> list[PartFeature]:
    """Mean-pool a C x H x W map over every part of ``lm``, project with the
    E x C matrix ``proj`` and normalize."""
    fm = np.asarray(feature_map, dtype=np.float64)
    lm = np.asarray(lm)
    if fm.ndim != 3 or fm.shape[1:] != lm.shape:
        raise ShapeError(f"feature map {fm.shape} does not match label map {lm.shape}")
    ids, M = part_masks(lm)
    if not ids:
        return []
    pooled = M @ fm.reshape(fm.shape[0], -1).T           # (P, C)
    z = pooled @ np.asarray(proj, dtype=np.float64).T
    if bias is not None:
        z = z + bias
    n = np.linalg.norm(z, axis=1, keepdims=True)
    z = z / np.where(n > 0, n, 1.0)
    return [PartFeature(z[i], ids[i], tuple(origin)) for i in range(len(ids))]


def positive_pairs(identities, origins) -> list[tuple[int, int]]:
    ids = list(identities)
    org = [tuple(o) for o in origins]
    return [(i, j) for i in range(len(ids)) for j in range(len(ids))
            if i != j and ids[i] == ids[j] and org[i] != org[j]]


def infonce(vectors, identities, origins, tau: float = TAU) -> InfoNCEResult:
    """InfoNCE over cosine similarities with analytic gradients.

    loss = mean over positive pairs (i, j) of
           -s_ij / tau + log sum_{k != i} exp(s_ik / tau)
    The gradient is taken w.r.t. the raw (not necessarily unit) vectors.
    """
    F = np.asarray(vectors, dtype=np.float64)
    if not tau > 0:
        raise DomainError(f"tau must be > 0, got {tau}")
    n = len(F)
    pairs = positive_pairs(identities, origins) if n >= 2 else []
    if not pairs:
        log.warning("infonce: no positive pair in batch; loss defined as 0")
        return InfoNCEResult(0.0, np.zeros_like(F), 0, True)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    U = F / np.where(norms > 0, norms, 1.0)
    S = U @ U.T
    logits = S / tau
    np.fill_diagonal(logits, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    den = ex.sum(axis=1, keepdims=True)
    lse = (mx + np.log(den)).ravel()
    soft = ex / den
    P = len(pairs)
    pi = np.array([p[0] for p in pairs])
    pj = np.array([p[1] for p in pairs])
    # sum in a fixed order for determinism
    loss = float(np.sum(lse[pi] - logits[pi, pj]) / P)
    counts = np.bincount(pi, minlength=n).astype(np.float64)
    G = soft * counts[:, None]
    np.add.at(G, (pi, pj), -1.0)
    G /= P * tau                                   # d loss / d S
    np.fill_diagonal(G, 0.0)
    dU = (G + G.T) @ U
    dF = (dU - U * np.sum(U * dU, axis=1, keepdims=True)) / np.where(norms > 0, norms, 1.0)
    return InfoNCEResult(loss, dF, P, False)


def infonce_loss(features: list[PartFeature], cfg: ContrastConfig | None = None):
    """Loss and per-feature gradients for a list of ``PartFeature``."""
    cfg = cfg or ContrastConfig()
    if not features:
        return InfoNCEResult(0.0, np.zeros((0, cfg.embed_dim)), 0, True)
    V = np.stack([f.vector for f in features])
    return infonce(V, [f.identity for f in features], [f.origin for f in features], cfg.tau)
