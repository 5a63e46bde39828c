"""Deterministic second-order (Heun) EDM sampler."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from .edm import SIGMA_MAX, SIGMA_MIN, RHO, karras_sigmas
from .model import ModelConfig, as_tensors, forward
from .train import from_model


def denoise(params: dict, mcfg: ModelConfig, x: dict, cond, sigma, views, frames, fusion=None) -> dict:
    out = forward(as_tensors(params), mcfg, x, cond, sigma, views, frames, fusion=fusion)
    return {b: t.data for b, t in out.denoised.items()}


def sample(params: dict, mcfg: ModelConfig, cond: np.ndarray, views, frames, steps: int = 18,
           seed: int = 0, sigma_max: float = SIGMA_MAX, sigma_min: float = SIGMA_MIN, rho: float = RHO,
           fusion=None, chunk: int = 32) -> dict:
    """Generate RGB and part images for every conditioning image.

    ``cond`` is (N, H, W, 3) in [0, 1]; returns {"rgb", "part"} arrays in
    [0, 1] of the same shape.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    cond = np.asarray(cond, dtype=np.float32)
    views = np.asarray(views)
    frames = np.asarray(frames)
    N = len(cond)
    rng = np.random.default_rng(seed)
    sig = karras_sigmas(steps, sigma_min, sigma_max, rho)
    x = {b: (sig[0] * rng.standard_normal(cond.shape)).astype(np.float32) for b in ("rgb", "part")}

    def D(xc, s):
        res = {b: np.empty_like(xc[b]) for b in xc}
        for a in range(0, N, chunk):
            sl = slice(a, a + chunk)
            out = denoise(params, mcfg, {b: xc[b][sl] for b in xc}, cond[sl], np.full(len(cond[sl]), s),
                          views[sl], frames[sl], fusion)
            for b in xc:
                res[b][sl] = out[b]
        return res

    for i in range(steps):
        s, s_next = float(sig[i]), float(sig[i + 1])
        den = D(x, s)
        d = {b: (x[b] - den[b]) / s for b in x}
        x_next = {b: (x[b] + (s_next - s) * d[b]).astype(np.float32) for b in x}
        if s_next > 0:
            den2 = D(x_next, s_next)
            d2 = {b: (x_next[b] - den2[b]) / s_next for b in x}
            x_next = {b: (x[b] + (s_next - s) * 0.5 * (d[b] + d2[b])).astype(np.float32) for b in x}
        x = x_next
    return {b: from_model(x[b]).astype(np.float32) for b in x}
