"""Dual-branch toy UNet with BiDiFuse layers.

Both branches share one architecture: an input convolution, residual blocks
over three resolutions with 16/32/64 channels, a middle block, and decoder
blocks that concatenate the skip tensor of their own branch. After every
encoder block, the middle block and every decoder block the two branches
exchange features through ``bidifuse``.

Each branch sees its noisy image (scaled by c_in) concatenated with the clean
conditioning RGB image of the same view and frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from . import autograd as ag
from .edm import SIGMA_DATA, NoiseLevel

BRANCHES = ("rgb", "part")
FUSION_MODES = ("literal-shared", "split", "none")


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 64)
    groups: int = 8
    emb_dim: int = 64
    sin_dim: int = 32
    img_ch: int = 3
    cond_ch: int = 3
    fusion: str = "literal-shared"
    proj_dim: int = 16
    sigma_data: float = SIGMA_DATA

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if any(w % self.groups for w in self.widths):
            raise ConfigError("every width must be divisible by the group count")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def sites(self) -> list[str]:
        d = self.depth
        return [f"enc{i}" for i in range(d)] + ["mid"] + [f"dec{i}" for i in reversed(range(d))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


# ---------------------------------------------------------------------------
# parameters


def _resblock_shapes(prefix, cin, cout, emb):
    s = {
        f"{prefix}.gn1.g": (cin,), f"{prefix}.gn1.b": (cin,),
        f"{prefix}.conv1.w": (3, 3, cin, cout), f"{prefix}.conv1.b": (cout,),
        f"{prefix}.emb.w": (emb, cout), f"{prefix}.emb.b": (cout,),
        f"{prefix}.gn2.g": (cout,), f"{prefix}.gn2.b": (cout,),
        f"{prefix}.conv2.w": (3, 3, cout, cout), f"{prefix}.conv2.b": (cout,),
    }
    if cin != cout:
        s[f"{prefix}.skip.w"] = (1, 1, cin, cout)
        s[f"{prefix}.skip.b"] = (cout,)
    return s


def branch_shapes(cfg: ModelConfig, branch: str) -> dict:
    w = cfg.widths
    s = {
        f"{branch}.temb1.w": (cfg.sin_dim, cfg.emb_dim), f"{branch}.temb1.b": (cfg.emb_dim,),
        f"{branch}.temb2.w": (cfg.emb_dim, cfg.emb_dim), f"{branch}.temb2.b": (cfg.emb_dim,),
        f"{branch}.in.w": (3, 3, cfg.img_ch + cfg.cond_ch, w[0]), f"{branch}.in.b": (w[0],),
    }
    c = w[0]
    for i, wi in enumerate(w):
        s.update(_resblock_shapes(f"{branch}.enc{i}", c, wi, cfg.emb_dim))
        c = wi
    s.update(_resblock_shapes(f"{branch}.mid", c, c, cfg.emb_dim))
    for i in reversed(range(cfg.depth)):
        s.update(_resblock_shapes(f"{branch}.dec{i}", c + w[i], w[i], cfg.emb_dim))
        c = w[i]
    s.update({
        f"{branch}.out.gn.g": (c,), f"{branch}.out.gn.b": (c,),
        f"{branch}.out.w": (3, 3, c, cfg.img_ch), f"{branch}.out.b": (cfg.img_ch,),
    })
    return s


def site_width(cfg: ModelConfig, site: str) -> int:
    if site == "mid":
        return cfg.widths[-1]
    return cfg.widths[int(site[3:])]


def fusion_shapes(cfg: ModelConfig) -> dict:
    if cfg.fusion == "none":
        return {}
    heads = ["fuse"] if cfg.fusion == "literal-shared" else ["fuse_rgb", "fuse_part"]
    s = {}
    for h in heads:
        for site in cfg.sites():
            c = site_width(cfg, site)
            s[f"{h}.{site}.w1"] = (1, 1, 2 * c, c)
            s[f"{h}.{site}.b1"] = (c,)
            s[f"{h}.{site}.w2"] = (1, 1, c, c)
            s[f"{h}.{site}.b2"] = (c,)
    return s


def param_shapes(cfg: ModelConfig) -> dict:
    s = {}
    for b in BRANCHES:
        s.update(branch_shapes(cfg, b))
    s.update(fusion_shapes(cfg))
    s["proj.w"] = (cfg.widths[0], cfg.proj_dim)
    s["proj.b"] = (cfg.proj_dim,)
    return s


def _init_one(name, shape, rng, dtype):
    leaf = name.rsplit(".", 1)[-1]
    if ".gn" in name or name.endswith("out.gn.g") or name.endswith("out.gn.b"):
        return (np.ones(shape) if leaf == "g" else np.zeros(shape)).astype(dtype)
    if leaf.startswith("b"):
        return np.zeros(shape, dtype=dtype)
    # zero-init: last stage of every fusion F and the output convolution
    if leaf == "w2" or name.endswith(".out.w"):
        return np.zeros(shape, dtype=dtype)
    fan_in = int(np.prod(shape[:-1]))
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Deterministic init. The part branch starts as an exact copy of the RGB
    branch (identical backbones)."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name in sorted(shapes):
        if name.startswith("part."):
            continue
        params[name] = _init_one(name, shapes[name], rng, dtype)
    for name in sorted(shapes):
        if name.startswith("part."):
            params[name] = params["rgb." + name[5:]].copy()
    return {k: params[k] for k in sorted(params)}


def copy_branch(params: dict, src: str = "rgb", dst: str = "part") -> dict:
    out = dict(params)
    for k, v in params.items():
        if k.startswith(src + "."):
            out[dst + k[len(src):]] = v.copy()
    return out


def count_branch_params(params: dict, branch: str) -> int:
    return int(sum(v.size for k, v in params.items() if k.startswith(branch + ".")))


# ---------------------------------------------------------------------------
# forward


def sinusoidal(x, dim: int, dtype=np.float64) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    return np.concatenate([np.cos(x * freqs), np.sin(x * freqs)], axis=1).astype(dtype)


def cond_embedding(c_noise, view, frame, dim: int, dtype) -> np.ndarray:
    """Summed sinusoidal embeddings of noise level, azimuth index and frame."""
    return (sinusoidal(np.asarray(c_noise) * 10.0, dim, dtype) + sinusoidal(view, dim, dtype)
            + sinusoidal(frame, dim, dtype))


def _gn(P, prefix, h, groups):
    return ag.group_norm(h, P[prefix + ".g"], P[prefix + ".b"], groups)


def resblock(P, prefix, h, e, groups):
    a = ag.conv2d(ag.silu(_gn(P, prefix + ".gn1", h, groups)), P[prefix + ".conv1.w"], P[prefix + ".conv1.b"])
    bias = ag.linear(e, P[prefix + ".emb.w"], P[prefix + ".emb.b"])
    n, c = bias.shape
    a = ag.add(a, ag.reshape(bias, (n, 1, 1, c)))
    a = ag.conv2d(ag.silu(_gn(P, prefix + ".gn2", a, groups)), P[prefix + ".conv2.w"], P[prefix + ".conv2.b"])
    skip = h
    if prefix + ".skip.w" in P:
        skip = ag.conv2d(h, P[prefix + ".skip.w"], P[prefix + ".skip.b"])
    return ag.add(skip, a)


def fusion_fn(P, head, site, z):
    """F: 1x1 conv, ReLU, 1x1 conv."""
    u = ag.relu(ag.conv2d(z, P[f"{head}.{site}.w1"], P[f"{head}.{site}.b1"]))
    return ag.conv2d(u, P[f"{head}.{site}.w2"], P[f"{head}.{site}.b2"])


def bidifuse(h_rgb, h_part, P, site: str, mode: str = "literal-shared"):
    """(h_rgb + g, h_part + g) with g = F([h_rgb, h_part]); ``split`` uses
    separate F for each branch and ``none`` is the identity."""
    if h_rgb.shape != h_part.shape:
        raise ShapeError(f"bidifuse: branch shapes differ, rgb {h_rgb.shape} vs part {h_part.shape}")
    if mode == "none":
        return h_rgb, h_part
    z = ag.concat([h_rgb, h_part], axis=-1)
    if mode == "literal-shared":
        g = fusion_fn(P, "fuse", site, z)
        return ag.add(h_rgb, g), ag.add(h_part, g)
    if mode == "split":
        return (ag.add(h_rgb, fusion_fn(P, "fuse_rgb", site, z)),
                ag.add(h_part, fusion_fn(P, "fuse_part", site, z)))
    raise ConfigError(f"unknown fusion mode {mode!r}")


@dataclass
class ForwardOut:
    denoised: dict                 # branch -> Tensor (N, H, W, 3), model space
    features: ag.Tensor | None     # part-branch penultimate decoder activation
    raw: dict = field(default_factory=dict)


def _check_dims(cfg, x):
    H, W = x.shape[1:3]
    k = 2 ** (cfg.depth - 1)
    if H % k or W % k:
        raise ConfigError(f"spatial dims {H}x{W} must be divisible by {k}")


def forward(P: dict, cfg: ModelConfig, x: dict, cond: np.ndarray, sigma, view, frame,
            fusion: str | None = None, branches=BRANCHES) -> ForwardOut:
    """EDM-wrapped denoiser D(x) = c_skip x + c_out net(c_in x, c_noise).

    ``P`` maps names to ``Tensor``; ``x`` maps branch -> (N, H, W, 3) array or
    Tensor in model space; ``sigma``, ``view``, ``frame`` are per-image.
    """
    fusion = cfg.fusion if fusion is None else fusion
    if len(branches) == 1:
        fusion = "none"
    xs = {b: ag.as_tensor(x[b]) for b in branches}
    first = xs[branches[0]]
    _check_dims(cfg, first)
    dt = first.data.dtype
    N = first.shape[0]
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (N,))
    nl = [NoiseLevel(float(s), cfg.sigma_data) for s in sigma]
    c_in = np.array([n.c_in for n in nl], dtype=dt).reshape(N, 1, 1, 1)
    c_skip = np.array([n.c_skip for n in nl], dtype=dt).reshape(N, 1, 1, 1)
    c_out = np.array([n.c_out for n in nl], dtype=dt).reshape(N, 1, 1, 1)
    c_noise = np.array([n.c_noise for n in nl])
    emb0 = cond_embedding(c_noise, np.broadcast_to(view, (N,)), np.broadcast_to(frame, (N,)), cfg.sin_dim, dt)
    cond = np.asarray(cond, dtype=dt)
    G = cfg.groups

    h, e = {}, {}
    for b in branches:
        t = ag.silu(ag.linear(ag.Tensor(emb0), P[f"{b}.temb1.w"], P[f"{b}.temb1.b"]))
        e[b] = ag.silu(ag.linear(t, P[f"{b}.temb2.w"], P[f"{b}.temb2.b"]))
        inp = ag.concat([ag.mul(xs[b], c_in), ag.Tensor(cond)], axis=-1)
        h[b] = ag.conv2d(inp, P[f"{b}.in.w"], P[f"{b}.in.b"])

    def fuse(site):
        if fusion != "none":
            h["rgb"], h["part"] = bidifuse(h["rgb"], h["part"], P, site, fusion)

    skips = {b: [] for b in branches}
    for i in range(cfg.depth):
        for b in branches:
            h[b] = resblock(P, f"{b}.enc{i}", h[b], e[b], G)
        fuse(f"enc{i}")
        for b in branches:
            skips[b].append(h[b])
            if i < cfg.depth - 1:
                h[b] = ag.avgpool2(h[b])
    for b in branches:
        h[b] = resblock(P, f"{b}.mid", h[b], e[b], G)
    fuse("mid")
    for i in reversed(range(cfg.depth)):
        for b in branches:
            h[b] = resblock(P, f"{b}.dec{i}", ag.concat([h[b], skips[b][i]], axis=-1), e[b], G)
        fuse(f"dec{i}")
        if i > 0:
            for b in branches:
                h[b] = ag.upsample2(h[b])
    feats = h.get("part")
    out, raw = {}, {}
    for b in branches:
        y = ag.silu(_gn(P, f"{b}.out.gn", h[b], G))
        raw[b] = ag.conv2d(y, P[f"{b}.out.w"], P[f"{b}.out.b"])
        out[b] = ag.add(ag.mul(xs[b], c_skip), ag.mul(raw[b], c_out))
    return ForwardOut(out, feats, raw)


def as_tensors(params: dict) -> dict:
    return {k: ag.Tensor(v, name=k) for k, v in params.items()}
