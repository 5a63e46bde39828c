"""Rig curation: bone merging, bone-count capping and part labels from
per-bone weight maps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError
from .tensorio import read_tensor, write_tensor

BG_EPS = 1e-4


@dataclass
class BoneGraph:
    """Bones with parent links, per-frame head positions, descriptors and
    weight maps.

    ``transforms`` is (B, T, 3) and ``weight_maps`` is (V, F, B, H, W); both
    follow the order of ``bones``. ``members`` records which original bones
    were collapsed into each bone.
    """
    bones: list
    parent: dict
    transforms: np.ndarray
    feature_desc: np.ndarray
    weight_maps: np.ndarray | None = None
    members: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bones = [int(b) for b in self.bones]
        if len(set(self.bones)) != len(self.bones):
            raise DomainError("duplicate bone ids")
        self.parent = {int(k): (None if v is None else int(v)) for k, v in self.parent.items()}
        self.transforms = np.asarray(self.transforms, dtype=np.float64)
        self.feature_desc = np.asarray(self.feature_desc, dtype=np.float64)
        nb = len(self.bones)
        if self.transforms.ndim != 3 or self.transforms.shape[0] != nb or self.transforms.shape[2] != 3:
            raise DomainError(f"transforms must be (B, T, 3) with B={nb}, got {self.transforms.shape}")
        if len(self.feature_desc) != nb:
            raise DomainError("one descriptor per bone required")
        if self.weight_maps is not None:
            self.weight_maps = np.asarray(self.weight_maps)
            if self.weight_maps.ndim != 5 or self.weight_maps.shape[2] != nb:
                raise DomainError(f"weight_maps must be (V, F, B, H, W) with B={nb}")
        ids = set(self.bones)
        for b in self.bones:
            p = self.parent.get(b)
            if p is not None and p not in ids:
                raise DomainError(f"bone {b} has unknown parent {p}")
        # acyclic
        for b in self.bones:
            seen = set()
            x = b
            while x is not None:
                if x in seen:
                    raise DomainError(f"parent links form a cycle through bone {b}")
                seen.add(x)
                x = self.parent.get(x)
        if not self.members:
            self.members = {b: [b] for b in self.bones}

    def index(self, b) -> int:
        return self.bones.index(int(b))

    def edges(self) -> list[tuple[int, int]]:
        """(parent, child) pairs."""
        return [(self.parent[c], c) for c in self.bones if self.parent.get(c) is not None]

    def copy(self) -> BoneGraph:
        return BoneGraph(list(self.bones), dict(self.parent), self.transforms.copy(),
                         self.feature_desc.copy(),
                         None if self.weight_maps is None else self.weight_maps.copy(),
                         {k: list(v) for k, v in self.members.items()})


@dataclass
class MergePolicy:
    motion_tol: float = 0.05
    feature_tol: float = 0.1
    max_bones: int = 100

    def __post_init__(self):
        if self.motion_tol < 0 or self.feature_tol < 0:
            raise DomainError("merge tolerances must be >= 0")
        if self.max_bones < 1:
            raise DomainError("max_bones must be >= 1")


@dataclass
class Discarded:
    n_bones: int
    reason: str


def bone_pair_scores(g: BoneGraph, a, b) -> tuple[float, float]:
    """(motion_diff, feature_dissim) for two connected bones."""
    a, b = int(a), int(b)
    if g.parent.get(a) != b and g.parent.get(b) != a:
        raise DomainError(f"bones {a} and {b} are not connected")
    ia, ib = g.index(a), g.index(b)
    off = g.transforms[ia] - g.transforms[ib]
    motion = float(np.mean(np.linalg.norm(off - off[0], axis=1)))
    da, db = g.feature_desc[ia], g.feature_desc[ib]
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0 or nb == 0:
        dissim = 1.0
    else:
        dissim = float(1.0 - np.dot(da, db) / (na * nb))
    return motion, dissim


def _collapse(g: BoneGraph, parent: int, child: int) -> BoneGraph:
    ip, ic = g.index(parent), g.index(child)
    keep = [i for i in range(len(g.bones)) if i != ic]
    new_parent = {}
    for b in g.bones:
        if b == child:
            continue
        p = g.parent.get(b)
        new_parent[b] = parent if p == child else p
    desc = g.feature_desc.copy()
    d = 0.5 * (desc[ip] + desc[ic])
    n = np.linalg.norm(d)
    desc[ip] = d / n if n > 0 else d
    wm = None
    if g.weight_maps is not None:
        wm = g.weight_maps.copy()
        wm[:, :, ip] = wm[:, :, ip] + wm[:, :, ic]
        wm = wm[:, :, keep]
    members = {k: list(v) for k, v in g.members.items() if k != child}
    members[parent] = sorted(members[parent] + g.members[child])
    return BoneGraph([g.bones[i] for i in keep], new_parent, g.transforms[keep], desc[keep], wm, members)


def merge_bones(g: BoneGraph, policy: MergePolicy, return_log: bool = False):
    """Greedy merging of the connected pair with the smallest
    (motion_diff, feature_dissim, child id) among pairs below both
    thresholds. Returns a new graph, or ``Discarded`` when more than
    ``max_bones`` remain."""
    g = g.copy()
    log = []
    while True:
        best = None
        for p, c in g.edges():
            m, f = bone_pair_scores(g, p, c)
            if m < policy.motion_tol and f < policy.feature_tol:
                key = (m, f, c)
                if best is None or key < best[0]:
                    best = (key, p, c)
        if best is None:
            break
        (m, f, _), p, c = best
        log.append({"parent": p, "child": c, "motion_diff": m, "feature_dissim": f})
        g = _collapse(g, p, c)
    out = g
    if len(g.bones) > policy.max_bones:
        out = Discarded(len(g.bones), f"{len(g.bones)} bones after merging exceeds the cap of {policy.max_bones}")
    return (out, log) if return_log else out


def labels_from_weights(stack: np.ndarray, part_ids=None, eps: float = BG_EPS) -> np.ndarray:
    """Per-pixel argmax over the bone axis (axis -3); ties go to the lower
    bone index and pixels whose weights are all below ``eps`` become 0.

    ``part_ids`` maps bone index to the emitted label (default 1..B).
    """
    stack = np.asarray(stack)
    if stack.ndim < 3:
        raise DomainError("weight stack needs shape (..., B, H, W)")
    nb = stack.shape[-3]
    if nb < 1:
        raise DomainError("need at least one bone")
    ids = np.arange(1, nb + 1) if part_ids is None else np.asarray(part_ids, dtype=np.int64)
    if len(ids) != nb:
        raise DomainError("part_ids must have one entry per bone")
    idx = np.argmax(stack, axis=-3)
    mx = np.max(stack, axis=-3)
    lab = ids[idx]
    lab[mx < eps] = 0
    return lab.astype(np.int32)


# ---------------------------------------------------------------------------
# interchange


def save_bonegraph(g: BoneGraph, path) -> None:
    """``<path>`` JSON document; weight maps go to a sibling ``.sp4t``."""
    path = Path(path)
    doc = {
        "bones": g.bones,
        "parent": {str(b): g.parent.get(b) for b in g.bones},
        "positions": g.transforms.tolist(),
        "descriptors": g.feature_desc.tolist(),
        "members": {str(b): g.members[b] for b in g.bones},
        "weight_maps": None,
    }
    if g.weight_maps is not None:
        wpath = path.with_suffix(".weights.sp4t")
        write_tensor(np.asarray(g.weight_maps, dtype=np.float64), wpath)
        doc["weight_maps"] = wpath.name
    path.write_text(json.dumps(doc, indent=1) + "\n")


def load_bonegraph(path) -> BoneGraph:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        bones = doc["bones"]
        parent = {int(k): v for k, v in doc["parent"].items()}
        pos = np.array(doc["positions"], dtype=np.float64)
        desc = np.array(doc["descriptors"], dtype=np.float64)
        members = {int(k): v for k, v in doc.get("members", {}).items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bone graph {path}: {exc}") from None
    wm = None
    if doc.get("weight_maps"):
        wm = read_tensor(path.parent / doc["weight_maps"])
    return BoneGraph(bones, parent, pos, desc, wm, members)
