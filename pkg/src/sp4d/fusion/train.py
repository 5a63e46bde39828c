"""Training objective, Adam and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import consistency
from ..errors import ConfigError, FormatError, TrainingError
from ..tensorio import read_tensor, write_tensor
from . import autograd as ag
from .edm import P_MEAN, P_STD, NoiseLevel, sample_sigma
from .model import ModelConfig, as_tensors, copy_branch, forward, init_params

log = logging.getLogger(__name__)

STAGES = ("rgb-only", "joint")


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1000
    stage: str = "joint"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_contrast: float = 0.1
    tau: float = consistency.TAU
    objects_per_step: int = 1
    views_per_step: int = 4
    frames_per_step: int = 2
    p_mean: float = P_MEAN
    p_std: float = P_STD
    log_every: int = 10
    ema: float = 0.0               # decay of the parameter average used for sampling; 0 = off

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 0 or self.lr <= 0 or self.tau <= 0 or self.lambda_contrast < 0:
            raise ConfigError("steps >= 0, lr > 0, tau > 0 and lambda_contrast >= 0 are required")
        if min(self.objects_per_step, self.views_per_step, self.frames_per_step, self.log_every) < 1:
            raise ConfigError("per-step counts and log_every must be >= 1")
        if not 0.0 <= self.ema < 1.0:
            raise ConfigError(f"ema must be in [0, 1), got {self.ema}")


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data


@dataclass
class ObjectData:
    rgb: np.ndarray        # (V, F, H, W, 3) in [0, 1]
    part: np.ndarray       # (V, F, H, W, 3) encoded part image in [0, 1]
    labels: np.ndarray     # (V, F, H, W)


@dataclass
class Batch:
    rgb: np.ndarray
    part: np.ndarray
    labels: np.ndarray
    views: np.ndarray
    frames: np.ndarray
    obj: np.ndarray        # object index per image
    sigma: np.ndarray      # per image (shared within an object)


def to_model(img):
    return 2.0 * img - 1.0


def from_model(x):
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


def draw_batch(data: list, cfg: TrainConfig, rng: np.random.Generator, dtype=np.float32) -> Batch:
    objs = rng.choice(len(data), size=min(cfg.objects_per_step, len(data)), replace=False)
    rows = []
    for o in sorted(objs.tolist()):
        d = data[o]
        V, F = d.labels.shape[:2]
        vs = np.sort(rng.choice(V, size=min(cfg.views_per_step, V), replace=False))
        fs = np.sort(rng.choice(F, size=min(cfg.frames_per_step, F), replace=False))
        s = float(sample_sigma(rng, 1, cfg.p_mean, cfg.p_std)[0])
        rows.extend((o, v, f, s) for v in vs for f in fs)
    o = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    f = np.array([r[2] for r in rows])
    return Batch(
        rgb=np.stack([data[a].rgb[b, c] for a, b, c, _ in rows]).astype(dtype),
        part=np.stack([data[a].part[b, c] for a, b, c, _ in rows]).astype(dtype),
        labels=np.stack([data[a].labels[b, c] for a, b, c, _ in rows]),
        views=v, frames=f, obj=o, sigma=np.array([r[3] for r in rows]),
    )


# ---------------------------------------------------------------------------
# objective


def pooling_matrix(labels: np.ndarray, obj: np.ndarray, views, frames, dtype):
    """Averaging matrix over (image, part) regions plus identities/origins."""
    N = len(labels)
    HW = labels[0].size
    rows, ids, origins = [], [], []
    for n in range(N):
        flat = labels[n].reshape(-1)
        for p in np.unique(flat):
            if p == 0:
                continue
            m = np.flatnonzero(flat == p)
            rows.append((n * HW + m, 1.0 / len(m)))
            ids.append((int(obj[n]), int(p)))
            origins.append((int(obj[n]), int(views[n]), int(frames[n])))
    M = np.zeros((len(rows), N * HW), dtype=dtype)
    for r, (cols, w) in enumerate(rows):
        M[r, cols] = w
    return M, ids, origins


def edm_l2(D: ag.Tensor, y: np.ndarray, sigma: np.ndarray, sigma_data: float) -> ag.Tensor:
    """mean over images of lambda(sigma) * mean over pixels (D - y)^2."""
    N = D.shape[0]
    w = np.array([NoiseLevel(float(s), sigma_data).loss_weight for s in sigma])
    scale = (w / (N * np.prod(D.shape[1:]))).astype(D.data.dtype).reshape(N, 1, 1, 1)
    return ag.total(ag.mul(ag.square(ag.sub(D, y)), scale))


def contrastive_term(feats: ag.Tensor, P: dict, batch: Batch, tau: float):
    """InfoNCE over GT-part mean-pooled, projected part-branch features."""
    N, H, W, C = feats.shape
    M, ids, origins = pooling_matrix(batch.labels, batch.obj, batch.views, batch.frames, feats.data.dtype)
    if len(ids) < 2:
        return None, True
    pooled = ag.const_matmul(M, ag.reshape(feats, (N * H * W, C)))
    z = ag.linear(pooled, P["proj.w"], P["proj.b"])
    res = consistency.infonce(z.data.astype(np.float64), ids, origins, tau)
    if res.degenerate:
        return None, True
    return ag.custom_scalar([z], res.loss, [res.grad]), False


def loss_fn(P: dict, mcfg: ModelConfig, batch: Batch, noise: dict, lam: float, tau: float,
            stage: str = "joint", fusion: str | None = None):
    """Total loss tensor and a dict of its scalar parts."""
    branches = ("rgb",) if stage == "rgb-only" else ("rgb", "part")
    dt = batch.rgb.dtype
    y = {"rgb": to_model(batch.rgb), "part": to_model(batch.part)}
    s = batch.sigma.astype(dt).reshape(-1, 1, 1, 1)
    x = {b: (y[b] + s * noise[b]).astype(dt) for b in branches}
    out = forward(P, mcfg, x, batch.rgb, batch.sigma, batch.views, batch.frames,
                  fusion="none" if stage == "rgb-only" else fusion, branches=branches)
    parts = {}
    terms = []
    for b in branches:
        t = edm_l2(out.denoised[b], y[b], batch.sigma, mcfg.sigma_data)
        parts[f"loss_{b}"] = float(t.data)
        terms.append(t)
    total = terms[0] if len(terms) == 1 else ag.add(terms[0], terms[1])
    parts["loss_contrast"] = 0.0
    if stage == "joint" and lam > 0:
        c, degenerate = contrastive_term(out.features, P, batch, tau)
        if c is not None:
            parts["loss_contrast"] = float(c.data)
            total = ag.add(total, ag.mul(c, np.asarray(lam, dtype=dt)))
        parts["contrast_degenerate"] = degenerate
    parts["loss"] = float(total.data)
    return total, parts


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        out = {}
        for k in sorted(params):
            g = grads.get(k)
            if g is None:
                out[k] = params[k]
                continue
            dt = params[k].dtype
            self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(dt)
            self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(dt)
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = (params[k] - upd).astype(dt)
        return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, opt: Adam | None, meta: dict) -> Path:
    d = Path(path)
    (d / "params").mkdir(parents=True, exist_ok=True)
    for k, v in params.items():
        write_tensor(v, d / "params" / f"{k}.sp4t")
    if opt is not None:
        (d / "opt").mkdir(exist_ok=True)
        for k in params:
            write_tensor(opt.m[k], d / "opt" / f"m.{k}.sp4t")
            write_tensor(opt.v[k], d / "opt" / f"v.{k}.sp4t")
    doc = dict(meta)
    doc["tensors"] = {k: list(v.shape) for k, v in sorted(params.items())}
    doc["optimizer_step"] = None if opt is None else opt.t
    (d / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return d


def load_checkpoint(path):
    """Returns (params, meta, optimizer moments or None)."""
    d = Path(path)
    try:
        meta = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"checkpoint manifest {d / 'manifest.json'}: {exc}") from None
    params = {}
    for k, shape in meta["tensors"].items():
        t = read_tensor(d / "params" / f"{k}.sp4t")
        if list(t.shape) != list(shape):
            raise FormatError(f"checkpoint tensor {k}: shape {t.shape} != manifest {shape}")
        params[k] = t
    moments = None
    if meta.get("optimizer_step") and (d / "opt").exists():
        moments = ({k: read_tensor(d / "opt" / f"m.{k}.sp4t") for k in params},
                   {k: read_tensor(d / "opt" / f"v.{k}.sp4t") for k in params})
    return params, meta, moments


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: dict                   # the averaged parameters when ema > 0
    log: list = field(default_factory=list)
    optimizer: Adam | None = None
    raw: dict | None = None        # last optimizer iterate


def smoothed(values, window: int = 20) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def initial_params(mcfg: ModelConfig, tcfg: TrainConfig, init: dict | None, init_stage: str | None):
    params = init_params(mcfg, tcfg.seed)
    if init is not None:
        for k, v in init.items():
            if k in params:
                if params[k].shape != v.shape:
                    raise ConfigError(f"init tensor {k} has shape {v.shape}, expected {params[k].shape}")
                params[k] = v.astype(params[k].dtype)
        if init_stage == "rgb-only" and tcfg.stage == "joint":
            # the trained RGB branch initializes both branches
            params = copy_branch(params, "rgb", "part")
    return params


def train(data: list, mcfg: ModelConfig, tcfg: TrainConfig, init: dict | None = None,
          init_stage: str | None = None, callback=None) -> TrainResult:
    """Deterministic given (tcfg.seed, configs, data)."""
    if not data:
        raise TrainingError("no training objects")
    params = initial_params(mcfg, tcfg, init, init_stage)
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = np.random.default_rng([tcfg.seed, 1])
    rows = []
    avg = dict(params) if tcfg.ema > 0 else None
    for step in range(tcfg.steps):
        batch = draw_batch(data, tcfg, rng)
        noise = {b: rng.standard_normal(batch.rgb.shape).astype(np.float32) for b in ("rgb", "part")}
        P = as_tensors(params)
        total, parts = loss_fn(P, mcfg, batch, noise, tcfg.lambda_contrast, tcfg.tau, tcfg.stage)
        if not np.isfinite(parts["loss"]):
            raise TrainingError(f"non-finite loss at step {step}: {parts}, sigma={batch.sigma[0]:.4g}, "
                                f"objects={sorted(set(batch.obj.tolist()))}")
        ag.backward(total)
        grads = {k: t.grad for k, t in P.items() if t.grad is not None}
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise TrainingError(f"non-finite gradient at step {step} in {bad[:5]}")
        params = opt.step(params, grads)
        if avg is not None:
            # warm-up keeps the average from lingering on the initialization
            d = min(tcfg.ema, (1 + step) / (10 + step))
            avg = {k: (d * avg[k] + (1 - d) * v).astype(v.dtype) for k, v in params.items()}
        row = {"step": step, "sigma": float(batch.sigma[0]), **parts}
        rows.append(row)
        if callback is not None:
            callback(row)
        if step % tcfg.log_every == 0:
            log.info("step %d loss %.5f", step, parts["loss"])
    if avg is not None:
        return TrainResult(avg, rows, opt, raw=params)
    return TrainResult(params, rows, opt, raw=params)
