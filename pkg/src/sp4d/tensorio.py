"""File I/O for tensors (``.sp4t``), label maps (16-bit PNG) and triangle
meshes (OBJ subset).

Tensors are plain ``numpy.ndarray`` objects of dtype float32 or float64. The
``.sp4t`` layout is::

    8 bytes   magic b"SP4DTNSR"
    u32       dtype code (0 = f32, 1 = f64)
    u32       rank
    rank*u32  extents
    payload   row-major, little-endian
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, DomainError

MAGIC = b"SP4DTNSR"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(t: np.ndarray, path) -> None:
    t = np.asarray(t)
    if t.dtype not in _CODES:
        raise FormatError(f"dtype: unsupported tensor dtype {t.dtype} (need float32/float64)")
    if t.ndim == 0:
        raise FormatError("rank: tensors must have rank >= 1")
    if any(d < 1 for d in t.shape):
        raise FormatError(f"extents: every extent must be >= 1, got {t.shape}")
    code = _CODES[t.dtype]
    header = MAGIC + struct.pack("<II", code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    return decode_tensor(raw)


def decode_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError("header: file shorter than the fixed 16-byte header")
    if raw[:8] != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, found {raw[:8]!r}")
    code, rank = struct.unpack_from("<II", raw, 8)
    if code not in _DTYPES:
        raise FormatError(f"dtype: unknown dtype code {code}")
    if rank == 0:
        raise FormatError("rank: rank 0 is not allowed")
    off = 16 + 4 * rank
    if len(raw) < off:
        raise FormatError("extents: truncated extent list")
    dims = struct.unpack_from(f"<{rank}I", raw, 16)
    if any(d == 0 for d in dims):
        raise FormatError(f"extents: zero extent in {dims}")
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    need = off + n * dt.itemsize
    if len(raw) < need:
        raise FormatError(f"payload: expected {n * dt.itemsize} bytes, found {len(raw) - off}")
    if len(raw) > need:
        raise FormatError(f"payload: {len(raw) - need} trailing bytes")
    arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# label maps


def part_ids(labels: np.ndarray) -> list[int]:
    """Sorted distinct nonzero labels; 0 is background."""
    u = np.unique(np.asarray(labels))
    return [int(v) for v in u if v != 0]


def write_labelmap(labels: np.ndarray, path) -> None:
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise DomainError(f"label map must be 2-D, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= 65536):
        raise DomainError(f"label out of 16-bit range [0, 65535]: min {lab.min()}, max {lab.max()}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(lab.astype(np.uint16)).save(path, format="PNG")


def read_labelmap(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I", "L"):
            raise FormatError(f"mode: expected a 16-bit single-channel PNG, got {im.mode}")
        return np.asarray(im).astype(np.int32)


# ---------------------------------------------------------------------------
# meshes


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_colors: np.ndarray | None = None
    vertex_parts: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise DomainError(f"face index out of range for {n} vertices")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise DomainError("degenerate face (repeated vertex index)")
        if self.vertex_colors is not None:
            self.vertex_colors = np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_colors) != n:
                raise DomainError("vertex_colors must have one entry per vertex")
        if self.vertex_parts is not None:
            self.vertex_parts = np.asarray(self.vertex_parts, dtype=np.int64).reshape(-1)
            if len(self.vertex_parts) != n:
                raise DomainError("vertex_parts must have one entry per vertex")
            if n and self.vertex_parts.min() < 0:
                raise DomainError("vertex_parts must be non-negative")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (same(self.vertices, other.vertices) and same(self.faces, other.faces)
                and same(self.vertex_colors, other.vertex_colors)
                and same(self.vertex_parts, other.vertex_parts))


def parse_obj(text: str) -> Mesh:
    """Parse the OBJ subset ``v x y z [r g b]`` / ``f a b c`` / ``# ...``.

    Vertex parts are carried in comment lines ``#vp <label>``, one per vertex
    in vertex order. Face entries may use ``a/t/n`` form; only ``a`` is read.
    """
    verts, cols, faces, parts = [], [], [], []
    face_lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            tok = s[1:].split()
            if tok and tok[0] == "vp":
                if len(tok) != 2:
                    raise FormatError(f"line {lineno}: malformed vertex-part comment")
                parts.append(int(tok[1]))
            continue
        tok = s.split()
        if tok[0] == "v":
            vals = tok[1:]
            if len(vals) not in (3, 6):
                raise FormatError(f"line {lineno}: vertex needs 3 or 6 numbers, got {len(vals)}")
            try:
                nums = [float(x) for x in vals]
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
            verts.append(nums[:3])
            cols.append(nums[3:] if len(nums) == 6 else None)
        elif tok[0] == "f":
            if len(tok) != 4:
                raise FormatError(f"line {lineno}: only triangles are supported, got {len(tok) - 1} indices")
            try:
                idx = [int(t.split("/")[0]) for t in tok[1:]]
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from None
            faces.append([i - 1 for i in idx])
            face_lines.append(lineno)
        # other statements (vn, vt, o, g, usemtl, ...) are ignored
    n = len(verts)
    for f, lineno in zip(faces, face_lines):
        for i in f:
            if i < 0 or i >= n:
                raise FormatError(f"line {lineno}: face index {i + 1} out of range (1..{n})")
        if len(set(f)) != 3:
            raise FormatError(f"line {lineno}: degenerate face {[i + 1 for i in f]}")
    has_cols = [c is not None for c in cols]
    if any(has_cols) and not all(has_cols):
        raise FormatError("vertex colors must be given for all vertices or none")
    if parts and len(parts) != n:
        raise FormatError(f"found {len(parts)} vertex-part comments for {n} vertices")
    return Mesh(
        vertices=np.array(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
        vertex_colors=np.array(cols, dtype=np.float64) if n and all(has_cols) else None,
        vertex_parts=np.array(parts, dtype=np.int64) if parts else None,
    )


def read_mesh(path) -> Mesh:
    return parse_obj(Path(path).read_text())


def format_obj(m: Mesh) -> str:
    out = []
    r = lambda x: repr(float(x))  # shortest round-tripping repr
    for i, v in enumerate(m.vertices):
        line = f"v {r(v[0])} {r(v[1])} {r(v[2])}"
        if m.vertex_colors is not None:
            c = m.vertex_colors[i]
            line += f" {r(c[0])} {r(c[1])} {r(c[2])}"
        out.append(line)
    if m.vertex_parts is not None:
        out.extend(f"#vp {int(p)}" for p in m.vertex_parts)
    out.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.faces)
    return "\n".join(out) + "\n"


def write_mesh(m: Mesh, path) -> None:
    Path(path).write_text(format_obj(m))
