"""Procedural articulated linkages: a tube bent at joints, animated over a
few frames and rendered orthographically from equally spaced azimuths.

Everything here is ground truth for end-to-end tests: label maps come from
per-bone weight maps through ``labels_from_weights`` and the palette from
the first-frame part centers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .curation import BoneGraph, labels_from_weights, load_bonegraph, save_bonegraph
from .encoding import build_palette, encode
from .errors import DomainError
from .metrics import label_path
from .tensorio import Mesh, read_labelmap, read_mesh, read_tensor, write_labelmap, write_mesh, write_tensor

LIGHT = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])


@dataclass
class LinkageSpec:
    segments: int = 3
    views: int = 4
    frames: int = 4
    size: int = 32
    lengths: list | None = None         # per segment; random in [0.8, 1.2] if None
    amplitude: float = 0.6              # max joint swing in radians
    angles: list | None = None          # explicit (frames, segments) pitch track
    radius: float = 0.3
    ring_verts: int = 10
    bones_per_segment: int = 1
    smooth: bool = False                # soft weights near joints

    def __post_init__(self):
        if not 1 <= self.segments <= 5:
            raise DomainError("segments must be in 1..5")
        if min(self.views, self.frames, self.size, self.bones_per_segment) < 1:
            raise DomainError("views, frames, size and bones_per_segment must be >= 1")
        if self.lengths is not None and len(self.lengths) != self.segments:
            raise DomainError("need one length per segment")
        if self.angles is not None:
            a = np.asarray(self.angles, dtype=np.float64)
            if a.shape != (self.frames, self.segments) or not np.all(np.isfinite(a)):
                raise DomainError("angles must be a finite (frames, segments) array")


@dataclass
class SceneBundle:
    spec: LinkageSpec
    seed: int
    rgb: np.ndarray           # (V, F, H, W, 3) float32
    labels: np.ndarray        # (V, F, H, W) int32
    encoded: np.ndarray       # (V, F, H, W, 3) float64, == encode(labels, palette)
    mesh: Mesh                # frame-0 pose with part colors and labels
    bones: BoneGraph
    palette: dict
    vertices: np.ndarray = field(repr=False, default=None)   # (F, N, 3) posed vertices

    @property
    def part_ids(self) -> list[int]:
        return sorted(self.palette)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _tube(lengths, radius, n_around):
    """Rest-pose tube along +y with end caps; returns vertices, faces and the
    y coordinate of every vertex."""
    total = float(np.sum(lengths))
    n_rings = max(2, int(np.ceil(total / (radius * 0.7))) + 1)
    ys = np.linspace(0.0, total, n_rings)
    # put a ring exactly on every joint so parts split cleanly
    joints = np.cumsum(lengths)[:-1]
    ys = np.unique(np.concatenate([ys, joints]))
    th = 2 * np.pi * np.arange(n_around) / n_around
    verts = [[0.0, 0.0, 0.0]]
    for y in ys:
        for t in th:
            verts.append([radius * np.cos(t), y, radius * np.sin(t)])
    verts.append([0.0, total, 0.0])
    V = np.array(verts)
    faces = []
    ring = lambda r, k: 1 + r * n_around + (k % n_around)
    for k in range(n_around):
        faces.append([0, ring(0, k + 1), ring(0, k)])
    for r in range(len(ys) - 1):
        for k in range(n_around):
            a, b = ring(r, k), ring(r, k + 1)
            c, d = ring(r + 1, k), ring(r + 1, k + 1)
            faces.append([a, b, d])
            faces.append([a, d, c])
    top = len(V) - 1
    last = len(ys) - 1
    for k in range(n_around):
        faces.append([top, ring(last, k), ring(last, k + 1)])
    return V, np.array(faces, dtype=np.int64)


def _angle_tracks(spec: LinkageSpec, rng):
    if spec.angles is not None:
        pitch = np.asarray(spec.angles, dtype=np.float64)
    else:
        amp = spec.amplitude * rng.uniform(0.5, 1.0, spec.segments)
        phase = rng.uniform(0, 2 * np.pi, spec.segments)
        t = np.arange(spec.frames) / max(spec.frames, 1)
        # frame 0 is the straight rest pose; later frames bend away from it
        pitch = amp[None] * (np.sin(2 * np.pi * t[:, None] + phase[None]) - np.sin(phase[None]))
    yaw = rng.uniform(-np.pi, np.pi, spec.segments)
    yaw[0] = 0.0
    return pitch, yaw


def _pose(lengths, pitch_t, yaw):
    """Joint rotations and origins for one frame."""
    R = np.eye(3)
    p = np.zeros(3)
    Rs, ps = [], []
    for k in range(len(lengths)):
        R = R @ _rot_y(yaw[k]) @ _rot_z(pitch_t[k])
        Rs.append(R)
        ps.append(p.copy())
        p = p + R @ np.array([0.0, lengths[k], 0.0])
    return Rs, ps


def _vertex_weights(ys, starts, lengths, nb, smooth):
    """Per-vertex bone weights (N, segments * nb)."""
    nseg = len(lengths)
    B = nseg * nb
    W = np.zeros((len(ys), B))
    seg = np.clip(np.searchsorted(starts, ys, side="right") - 1, 0, nseg - 1)
    local = (ys - starts[seg]) / np.asarray(lengths)[seg]
    sub = np.clip(np.floor(local * nb).astype(int), 0, nb - 1)
    W[np.arange(len(ys)), seg * nb + sub] = 1.0
    if smooth and nseg > 1:
        # blend linearly within a short band below each joint
        band = 0.15
        for k in range(1, nseg):
            d = starts[k] - ys
            m = (d > 0) & (d < band)
            a = 0.5 * (1 - d[m] / band)
            W[m] *= (1 - a)[:, None]
            W[m, k * nb] += a
    return W


def _raster(V2, depth, faces, attrs, size):
    """Orthographic z-buffer. ``V2`` are pixel coordinates, larger depth is
    closer. Returns barycentric-interpolated ``attrs`` (N, K), the visible face
    id per pixel (-1 for background)."""
    H = W = size
    py, px = np.mgrid[0:H, 0:W]
    P = np.stack([px.ravel() + 0.5, py.ravel() + 0.5], axis=1)
    zbuf = np.full(len(P), -np.inf)
    fid = np.full(len(P), -1, dtype=np.int64)
    bary = np.zeros((len(P), 3))
    A = V2[faces[:, 0]]
    B = V2[faces[:, 1]]
    C = V2[faces[:, 2]]
    den = (B[:, 1] - C[:, 1]) * (A[:, 0] - C[:, 0]) + (C[:, 0] - B[:, 0]) * (A[:, 1] - C[:, 1])
    for f in np.flatnonzero(np.abs(den) > 1e-12):
        lo = np.floor(np.minimum(np.minimum(A[f], B[f]), C[f])).astype(int)
        hi = np.ceil(np.maximum(np.maximum(A[f], B[f]), C[f])).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], W), min(hi[1], H)
        if x0 >= x1 or y0 >= y1:
            continue
        idx = (np.arange(y0, y1)[:, None] * W + np.arange(x0, x1)[None]).ravel()
        q = P[idx]
        l0 = ((B[f, 1] - C[f, 1]) * (q[:, 0] - C[f, 0]) + (C[f, 0] - B[f, 0]) * (q[:, 1] - C[f, 1])) / den[f]
        l1 = ((C[f, 1] - A[f, 1]) * (q[:, 0] - C[f, 0]) + (A[f, 0] - C[f, 0]) * (q[:, 1] - C[f, 1])) / den[f]
        l2 = 1 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        idx, l0, l1, l2 = idx[inside], l0[inside], l1[inside], l2[inside]
        z = l0 * depth[faces[f, 0]] + l1 * depth[faces[f, 1]] + l2 * depth[faces[f, 2]]
        win = z > zbuf[idx]
        idx = idx[win]
        zbuf[idx] = z[win]
        fid[idx] = f
        bary[idx] = np.stack([l0[win], l1[win], l2[win]], axis=1)
    vis = fid >= 0
    out = np.zeros((len(P), attrs.shape[1]))
    fv = faces[fid[vis]]
    out[vis] = (bary[vis, 0:1] * attrs[fv[:, 0]] + bary[vis, 1:2] * attrs[fv[:, 1]]
                + bary[vis, 2:3] * attrs[fv[:, 2]])
    return out.reshape(H, W, -1), fid.reshape(H, W)


def _descriptors(rgb, wmaps):
    """Geometric/appearance stand-in for learned bone features: mean color of
    the bone's dominant region, its area share and centroid spread."""
    V, F, B, H, W = wmaps.shape
    out = np.zeros((B, 6))
    yy, xx = np.mgrid[0:H, 0:W] / max(H, W)
    own = np.argmax(wmaps, axis=2)
    fg = wmaps.max(axis=2) > 0
    total = max(fg.sum(), 1)
    for b in range(B):
        m = (own == b) & fg
        n = m.sum()
        if n == 0:
            continue
        out[b, :3] = rgb[m].mean(axis=0)
        out[b, 3] = n / total
        ys = np.broadcast_to(yy, m.shape)[m]
        xs = np.broadcast_to(xx, m.shape)[m]
        out[b, 4] = ys.std()
        out[b, 5] = xs.std()
    nrm = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(nrm > 0, nrm, 1.0)


def generate(spec: LinkageSpec, seed: int = 0) -> SceneBundle:
    rng = np.random.default_rng(seed)
    nseg, nb = spec.segments, spec.bones_per_segment
    lengths = np.asarray(spec.lengths if spec.lengths is not None else rng.uniform(0.8, 1.2, nseg), dtype=np.float64)
    pitch, yaw = _angle_tracks(spec, rng)
    albedo = rng.uniform(0.25, 0.85, (nseg, 3))
    rest, faces = _tube(lengths, spec.radius, spec.ring_verts)
    starts = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])
    ys = rest[:, 1]
    Wv = _vertex_weights(ys, starts, lengths, nb, spec.smooth)
    B = Wv.shape[1]
    seg_of_bone = np.arange(B) // nb

    # linear blend of per-segment rigid transforms
    posed = np.zeros((spec.frames, len(rest), 3))
    heads = np.zeros((B, spec.frames, 3))
    for t in range(spec.frames):
        Rs, ps = _pose(lengths, pitch[t], yaw)
        for b in range(B):
            k = seg_of_bone[b]
            loc = rest.copy()
            loc[:, 1] -= starts[k]
            pk = ps[k] + loc @ Rs[k].T
            posed[t] += Wv[:, b:b + 1] * pk
            hy = lengths[k] * (b % nb) / nb
            heads[b, t] = ps[k] + Rs[k] @ np.array([0.0, hy, 0.0])

    # framing shared by all views and frames
    center = 0.5 * (posed.reshape(-1, 3).min(axis=0) + posed.reshape(-1, 3).max(axis=0))
    reach = np.max(np.linalg.norm((posed - center)[..., [0, 2]], axis=-1))
    reach = max(reach, np.max(np.abs(posed[..., 1] - center[1])))
    scale = 0.45 * spec.size / (reach + 1e-9)

    V, F, S = spec.views, spec.frames, spec.size
    rgb = np.ones((V, F, S, S, 3))
    wmaps = np.zeros((V, F, B, S, S))
    seg_color = albedo[seg_of_bone[np.argmax(Wv, axis=1)]]
    for v in range(V):
        Rv = _rot_y(-2 * np.pi * v / V)
        for t in range(F):
            X = (posed[t] - center) @ Rv.T
            uv = np.stack([S / 2 + scale * X[:, 0], S / 2 - scale * X[:, 1]], axis=1)
            attrs = np.concatenate([Wv, seg_color], axis=1)
            img, fid = _raster(uv, X[:, 2], faces, attrs, S)
            vis = fid >= 0
            # flat Lambert shading with a camera-fixed light
            e1 = X[faces[:, 1]] - X[faces[:, 0]]
            e2 = X[faces[:, 2]] - X[faces[:, 0]]
            nrm = np.cross(e1, e2)
            nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-12)
            shade = 0.35 + 0.65 * np.abs(nrm @ LIGHT)
            face_alb = albedo[seg_of_bone[np.argmax(Wv[faces].sum(axis=1), axis=1)]]
            col = face_alb * shade[:, None]
            rgb[v, t][vis] = col[fid[vis]]
            wmaps[v, t] = np.moveaxis(img[..., :B], -1, 0) * vis[None]
    rgb = rgb.astype(np.float32)

    labels = labels_from_weights(wmaps)
    # parts are bones (1..B); palette from the first-frame part centers
    vlab = np.argmax(Wv, axis=1) + 1
    X0 = posed[0]
    lo, hi = X0.min(axis=0), X0.max(axis=0)
    centers = {b + 1: X0[vlab == b + 1].mean(axis=0) for b in range(B) if np.any(vlab == b + 1)}
    palette = build_palette(centers, lo, hi)
    missing = [p for p in np.unique(labels) if p and p not in palette]
    if missing:
        raise DomainError(f"parts {missing} have no vertices")
    encoded = encode(labels, palette)

    mesh = Mesh(X0, faces, np.stack([palette[p] for p in vlab]), vlab)
    parent = {b: (b - 1 if b > 0 else None) for b in range(B)}
    bones = BoneGraph(list(range(B)), parent, heads, _descriptors(rgb, wmaps), wmaps)
    return SceneBundle(spec, int(seed), rgb, labels, encoded, mesh, bones, palette, posed)


# ---------------------------------------------------------------------------
# on-disk layout


def image_name(view: int, frame: int, ext: str) -> str:
    return f"v{view:02d}_f{frame:02d}.{ext}"


def export(bundle: SceneBundle, out_dir, name: str | None = None) -> Path:
    """Write one object directory; returns the path of its manifest.jsonl."""
    out = Path(out_dir)
    for sub in ("rgb", "encoded", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    V, F = bundle.labels.shape[:2]
    rows = []
    for v in range(V):
        for f in range(F):
            r = f"rgb/{image_name(v, f, 'sp4t')}"
            e = f"encoded/{image_name(v, f, 'sp4t')}"
            write_tensor(bundle.rgb[v, f], out / r)
            write_tensor(bundle.encoded[v, f], out / e)
            write_labelmap(bundle.labels[v, f], label_path(out, v, f))
            rows.append({"view": v, "frame": f, "rgb": r, "encoded": e,
                         "labels": str(label_path(Path("."), v, f))})
    write_mesh(bundle.mesh, out / "mesh.obj")
    save_bonegraph(bundle.bones, out / "bones.json")
    meta = {
        "name": name or out.name,
        "seed": bundle.seed,
        "spec": asdict(bundle.spec),
        "views": V,
        "frames": F,
        "size": int(bundle.labels.shape[2]),
        "palette": {str(k): [float(x) for x in c] for k, c in sorted(bundle.palette.items())},
    }
    (out / "bundle.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    man = out / "manifest.jsonl"
    man.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return man


def load(obj_dir) -> SceneBundle:
    d = Path(obj_dir)
    meta = json.loads((d / "bundle.json").read_text())
    V, F, S = meta["views"], meta["frames"], meta["size"]
    rgb = np.zeros((V, F, S, S, 3), dtype=np.float32)
    enc = np.zeros((V, F, S, S, 3))
    lab = np.zeros((V, F, S, S), dtype=np.int32)
    for line in (d / "manifest.jsonl").read_text().splitlines():
        r = json.loads(line)
        v, f = r["view"], r["frame"]
        rgb[v, f] = read_tensor(d / r["rgb"])
        enc[v, f] = read_tensor(d / r["encoded"])
        lab[v, f] = read_labelmap(d / r["labels"])
    palette = {int(k): np.array(c) for k, c in meta["palette"].items()}
    spec = LinkageSpec(**meta["spec"])
    return SceneBundle(spec, meta["seed"], rgb, lab, enc, read_mesh(d / "mesh.obj"),
                       load_bonegraph(d / "bones.json"), palette)


def write_dataset(out_dir, specs_seeds, prefix: str = "obj") -> Path:
    """Generate and export several objects plus a dataset.jsonl listing them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (spec, seed) in enumerate(specs_seeds):
        name = f"{prefix}{i:03d}"
        export(generate(spec, seed), out / name, name)
        rows.append({"object": name, "dir": name, "status": "kept", "views": spec.views,
                     "frames": spec.frames, "seed": int(seed)})
    path = out / "dataset.jsonl"
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return path
