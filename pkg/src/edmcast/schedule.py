"""Noise-level discretization for sampling and noise-level draws for training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN_DEFAULT = 0.002


@dataclass(frozen=True)
class SigmaSchedule:
    sigmas: np.ndarray
    num_steps: int
    sigma_max: float
    sigma_min: float
    rho: float

    def __len__(self):
        return len(self.sigmas)

    def pairs(self):
        """(sigma_i, sigma_{i+1}) for every step."""
        return list(zip(self.sigmas[:-1], self.sigmas[1:]))


def build_schedule(num_steps: int, sigma_max: float = 80.0, sigma_min: float = SIGMA_MIN_DEFAULT,
                   rho: float = 7.0) -> SigmaSchedule:
    """Descending rho-spaced noise levels ending with an explicit zero.

    Returns ``num_steps + 1`` values: ``sigma_max ... sigma_min, 0``.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not sigma_max > sigma_min > 0:
        raise ValueError(f"need sigma_max > sigma_min > 0, got {sigma_max}, {sigma_min}")
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if num_steps == 1:
        sigmas = np.array([sigma_max], dtype=np.float64)
    else:
        ramp = np.arange(num_steps, dtype=np.float64) / (num_steps - 1)
        lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
        sigmas = (hi + ramp * (lo - hi)) ** rho
        # pin the endpoints against pow round-off
        sigmas[0], sigmas[-1] = sigma_max, sigma_min
    sigmas = np.append(sigmas, 0.0)
    sigmas.setflags(write=False)
    return SigmaSchedule(sigmas, num_steps, float(sigma_max), float(sigma_min), float(rho))


@dataclass(frozen=True)
class TrainSigmaDist:
    kind: str = "log-normal"
    loc: float = -1.2
    scale: float = 1.2
    lo: float = SIGMA_MIN_DEFAULT
    hi: float = 80.0

    def __post_init__(self):
        if self.kind not in ("log-normal", "log-uniform"):
            raise ValueError(f"unknown sigma distribution {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        if not 0 < self.lo <= self.hi:
            raise ValueError(f"bad clamp range [{self.lo}, {self.hi}]")


def sample_train_sigma(dist: TrainSigmaDist, rng: np.random.Generator, size=None):
    """Draw training noise levels.

    ``log-normal``: ln(sigma) ~ N(loc, scale^2). ``log-uniform``: ln(sigma)
    uniform on [loc - scale, loc + scale]. Draws are clamped to [lo, hi].
    """
    if dist.kind == "log-normal":
        log_sigma = rng.normal(dist.loc, dist.scale, size=size)
    else:
        log_sigma = rng.uniform(dist.loc - dist.scale, dist.loc + dist.scale, size=size)
    return np.clip(np.exp(log_sigma), dist.lo, dist.hi)
