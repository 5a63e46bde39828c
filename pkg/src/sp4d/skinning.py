"""Part lifting onto meshes and harmonic skinning weights.

For each part p the field w_p solves the mesh Laplace equation on interior
vertices with Dirichlet values b_p (1 on p's own boundary vertices, 0 on the
others) at every boundary vertex, i.e. every vertex incident to a cross-part
edge.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import spsolve

from .encoding import cluster_colors
from .errors import DegenerateError, DomainError
from .tensorio import Mesh, write_tensor

log = logging.getLogger(__name__)


@dataclass
class PartBoundary:
    parts: list                 # sorted part labels
    boundary: dict              # part -> sorted array of boundary vertex ids
    all_boundary: np.ndarray    # union, sorted
    labels: np.ndarray          # per-vertex part label

    def indicator(self, part) -> np.ndarray:
        return (self.labels == part).astype(np.float64)


@dataclass
class LaplacianMatrix:
    L: sp.csr_matrix
    weighting: str
    skipped_faces: int = 0

    @property
    def W(self) -> sp.csr_matrix:
        """Edge-weight (adjacency) matrix, i.e. minus the off-diagonal of L."""
        A = -self.L.copy()
        A.setdiag(0)
        A.eliminate_zeros()
        return A.tocsr()


@dataclass
class SkinWeights:
    W: np.ndarray        # (V, P)
    parts: list          # column -> part label


def _neighbors(mesh: Mesh) -> list[list[int]]:
    nb = [set() for _ in range(mesh.n_vertices)]
    for a, b in mesh.edges():
        nb[a].add(int(b))
        nb[b].add(int(a))
    return [sorted(s) for s in nb]


def lift_vertex_parts(mesh: Mesh, min_cluster_size: int = 10) -> Mesh:
    """Cluster vertex colors into parts; noise vertices copy the label of the
    nearest labeled vertex in graph distance (smallest index on ties)."""
    if mesh.vertex_colors is None:
        raise DomainError("mesh has no vertex colors to lift")
    lab = cluster_colors(mesh.vertex_colors, min_cluster_size)
    if not np.any(lab >= 0):
        raise DegenerateError("no part clusters found among vertex colors")
    nb = _neighbors(mesh)
    out = lab.copy()
    cents = None
    for v in np.flatnonzero(lab < 0):
        seen = {int(v)}
        frontier = [int(v)]
        hit = None
        while frontier and hit is None:
            nxt = []
            for x in frontier:
                for y in nb[x]:
                    if y not in seen:
                        seen.add(y)
                        nxt.append(y)
            found = [y for y in nxt if lab[y] >= 0]
            if found:
                hit = min(found)
            frontier = nxt
        if hit is not None:
            out[v] = lab[hit]
        else:
            # component without any clustered vertex: fall back to color distance
            if cents is None:
                ks = sorted(set(lab[lab >= 0].tolist()))
                cents = {k: mesh.vertex_colors[lab == k].mean(axis=0) for k in ks}
            out[v] = min(cents, key=lambda k: (np.sum((cents[k] - mesh.vertex_colors[v]) ** 2), k))
    return Mesh(mesh.vertices, mesh.faces, mesh.vertex_colors, out)


def extract_boundary(mesh: Mesh) -> PartBoundary:
    if mesh.vertex_parts is None:
        raise DomainError("mesh has no vertex parts")
    labels = mesh.vertex_parts
    parts = sorted(set(labels.tolist()))
    e = mesh.edges()
    cross = e[labels[e[:, 0]] != labels[e[:, 1]]]
    per = {}
    for p in parts:
        touch = cross[(labels[cross[:, 0]] == p) | (labels[cross[:, 1]] == p)]
        per[p] = np.unique(touch.ravel())
    union = np.unique(cross.ravel())
    return PartBoundary(parts, per, union, labels.copy())


def build_laplacian(mesh: Mesh, weighting: str = "cotangent") -> LaplacianMatrix:
    """L = D - W with clamped cotangent weights ``max(0, (cot a + cot b) / 2)``
    or uniform unit weights."""
    n = mesh.n_vertices
    F = mesh.faces
    if len(F):
        e = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        if counts.max() > 2:
            raise DomainError("non-manifold mesh: an edge is shared by more than two faces")
    skipped = 0
    if weighting == "uniform":
        e = mesh.edges()
        i, j, w = e[:, 0], e[:, 1], np.ones(len(e))
    elif weighting == "cotangent":
        X = mesh.vertices
        e1 = X[F[:, 1]] - X[F[:, 0]]
        e2 = X[F[:, 2]] - X[F[:, 0]]
        scale = np.einsum("ij,ij->i", e1, e1) + np.einsum("ij,ij->i", e2, e2)
        ok = np.linalg.norm(np.cross(e1, e2), axis=1) > 1e-12 * np.maximum(scale, 1e-300)
        skipped = int(np.sum(~ok))
        Fk = F[ok]
        rows, cols, vals = [], [], []
        for k in range(3):
            a, b, c = Fk[:, k], Fk[:, (k + 1) % 3], Fk[:, (k + 2) % 3]
            u = X[b] - X[a]
            v = X[c] - X[a]
            cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
            # angle at a is opposite edge (b, c)
            rows.append(b)
            cols.append(c)
            vals.append(0.5 * cot)
        if skipped:
            log.warning("build_laplacian: skipped %d zero-area face(s)", skipped)
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        lo, hi = np.minimum(r, c), np.maximum(r, c)
        A = sp.coo_matrix((v, (lo, hi)), shape=(n, n)).tocsr()
        A.sum_duplicates()
        A = A.tocoo()
        i, j, w = A.row, A.col, np.maximum(A.data, 0.0)
    else:
        raise DomainError(f"unknown weighting {weighting!r}")
    W = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                      shape=(n, n)).tocsr()
    W.sum_duplicates()
    D = sp.diags(np.asarray(W.sum(axis=1)).ravel())
    L = (D - W).tocsr()
    L.eliminate_zeros()
    return LaplacianMatrix(L, weighting, skipped)


def conjugate_gradient(A, b, tol: float = 1e-10, maxiter: int | None = None):
    """Jacobi-preconditioned CG; stops when ||r|| <= tol * max(1, ||b||)."""
    n = len(b)
    maxiter = maxiter or 10 * n + 100
    d = A.diagonal()
    Minv = np.where(d > 0, 1.0 / np.where(d > 0, d, 1.0), 1.0)
    x = np.zeros(n)
    r = b - A @ x
    z = Minv * r
    p = z.copy()
    rz = r @ z
    stop = tol * max(1.0, np.linalg.norm(b))
    for _ in range(maxiter):
        if np.linalg.norm(r) <= stop:
            break
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = Minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def solve_harmonic(lap: LaplacianMatrix, boundary: PartBoundary, part, tol: float = 1e-8,
                   solver: str = "direct") -> np.ndarray:
    """Harmonic field of ``part`` with Dirichlet data b_p on all boundary vertices.

    An interior component with no (positively weighted) link to the boundary
    is a whole single-label component; it gets the indicator of its label,
    which keeps the fields a partition of unity.
    """
    n = lap.L.shape[0]
    b = boundary.indicator(part)
    if len(boundary.parts) == 1 or len(boundary.all_boundary) == 0:
        if len(boundary.parts) > 1:
            log.warning("solve_harmonic: several parts but no cross-part edge; using indicators")
        return b.copy()
    dirichlet = np.zeros(n, dtype=bool)
    dirichlet[boundary.all_boundary] = True
    w = np.zeros(n)
    w[dirichlet] = b[dirichlet]
    I = np.flatnonzero(~dirichlet)
    if len(I) == 0:
        return w
    L = lap.L
    L_II = L[I][:, I].tocsr()
    rhs = -(L[I][:, np.flatnonzero(dirichlet)] @ b[dirichlet])
    # interior components without boundary contact make L_II singular
    Wabs = lap.W
    ncomp, comp = connected_components(Wabs[I][:, I], directed=False)
    touches = np.zeros(ncomp, dtype=bool)
    link = np.asarray(Wabs[I][:, np.flatnonzero(dirichlet)].sum(axis=1)).ravel() > 0
    touches[np.unique(comp[link])] = True
    free = touches[comp]
    if not free.all():
        log.warning("solve_harmonic: %d interior vertices unreachable from the boundary", int((~free).sum()))
        w[I[~free]] = b[I[~free]]
    J = np.flatnonzero(free)
    if len(J):
        A = L_II[J][:, J].tocsc()
        r = rhs[J]
        if solver == "direct":
            x = spsolve(A, r)
        elif solver == "cg":
            x = conjugate_gradient(A.tocsr(), r, tol=min(tol, 1e-10))
        else:
            raise DomainError(f"unknown solver {solver!r}")
        res = np.linalg.norm(A @ x - r)
        if res > tol * max(1.0, np.linalg.norm(r)):
            log.warning("solve_harmonic: residual %.3e above tolerance %.1e", res, tol)
        w[I[J]] = x
    return w


def skin_weights(mesh: Mesh, weighting: str = "cotangent", tol: float = 1e-8,
                 solver: str = "direct") -> SkinWeights:
    bnd = extract_boundary(mesh)
    lap = build_laplacian(mesh, weighting)
    W = np.stack([solve_harmonic(lap, bnd, p, tol, solver) for p in bnd.parts], axis=1)
    W[(W < 0) & (W >= -tol)] = 0.0
    s = W.sum(axis=1)
    if np.any(np.abs(s - 1) > 1e-6):
        log.warning("skin_weights: partition of unity off by %.2e", float(np.max(np.abs(s - 1))))
    W = W / np.where(s > 0, s, 1.0)[:, None]
    return SkinWeights(W, list(bnd.parts))


def export_skin_weights(sw: SkinWeights, path) -> None:
    """``.sp4t`` (V x P) plus a JSON sidecar mapping columns to part ids."""
    path = Path(path)
    write_tensor(sw.W.astype(np.float64), path)
    side = path.with_suffix(".json")
    side.write_text(json.dumps({"columns": [int(p) for p in sw.parts]}, indent=2) + "\n")
