"""Noise-level preconditioning, loss weighting and the noise schedule of the
EDM formulation (Karras et al. 2022)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError

SIGMA_DATA = 0.5
P_MEAN, P_STD = -1.2, 1.2
SIGMA_MIN, SIGMA_MAX, RHO = 0.002, 80.0, 7.0


@dataclass(frozen=True)
class NoiseLevel:
    sigma: float
    sigma_data: float = SIGMA_DATA

    def __post_init__(self):
        if not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise DomainError(f"sigma must be a positive finite number, got {self.sigma}")

    @property
    def c_skip(self) -> float:
        return self.sigma_data ** 2 / (self.sigma ** 2 + self.sigma_data ** 2)

    @property
    def c_out(self) -> float:
        return self.sigma * self.sigma_data / np.sqrt(self.sigma ** 2 + self.sigma_data ** 2)

    @property
    def c_in(self) -> float:
        return 1.0 / np.sqrt(self.sigma ** 2 + self.sigma_data ** 2)

    @property
    def c_noise(self) -> float:
        return float(np.log(self.sigma) / 4)

    @property
    def loss_weight(self) -> float:
        return (self.sigma ** 2 + self.sigma_data ** 2) / (self.sigma * self.sigma_data) ** 2


def sample_sigma(rng: np.random.Generator, n: int = 1, p_mean: float = P_MEAN, p_std: float = P_STD):
    """Log-normal training noise levels."""
    return np.exp(rng.normal(p_mean, p_std, n))


def karras_sigmas(steps: int, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX,
                  rho: float = RHO) -> np.ndarray:
    """``steps`` decreasing noise levels followed by a final 0."""
    if steps < 1:
        raise DomainError("steps must be >= 1")
    if steps == 1:
        return np.array([sigma_max, 0.0])
    i = np.arange(steps)
    s = (sigma_max ** (1 / rho) + i / (steps - 1) * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))) ** rho
    return np.append(s, 0.0)
