"""Autoregressive rollout and seeded ensembles over any one-step forecaster.

A forecaster maps a condition window ``(B, window * C, H, W)`` (normalized,
oldest frame first) and an integer seed to the next frame ``(B, C, H, W)``.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np
import torch

from .precond import NetDenoiser
from .sampler import SampleConfig, generate, generate_latent, stream_rngs


class ForecastError(FloatingPointError):
    pass


class Forecaster(Protocol):
    kind: str
    stochastic: bool

    def step(self, window: np.ndarray, seed: int) -> np.ndarray: ...


def _channels(window, n_frames):
    return window.shape[1] // n_frames


class Persistence:
    kind, stochastic = "persistence", False

    def __init__(self, frame_channels: int = 1):
        self.c = frame_channels

    def step(self, window, seed):
        return window[:, -self.c:].copy()


class ShiftOracle:
    """Exact forecaster for a uniformly advecting periodic world: roll the last frame."""

    kind, stochastic = "oracle", False

    def __init__(self, shift: tuple[int, int], frame_channels: int = 1):
        self.shift, self.c = shift, frame_channels

    def step(self, window, seed):
        return np.roll(window[:, -self.c:], self.shift, axis=(-2, -1))


class BaselineForecaster:
    kind, stochastic = "baseline", False

    def __init__(self, net: torch.nn.Module):
        self.net = net.eval()

    def step(self, window, seed):
        with torch.no_grad():
            return self.net(torch.from_numpy(np.ascontiguousarray(window, dtype=np.float32))).numpy()


class DiffusionForecaster:
    kind, stochastic = "diff", True

    def __init__(self, denoiser, cfg: SampleConfig, frame_channels: int = 1):
        self.denoiser = NetDenoiser(denoiser) if isinstance(denoiser, torch.nn.Module) else denoiser
        self.cfg, self.c = cfg, frame_channels

    def step(self, window, seed):
        init, churn = stream_rngs(seed)
        shape = (window.shape[0], self.c, *window.shape[2:])
        return generate(self.denoiser, shape, self.cfg, window, init_rng=init, churn_rng=churn)


class CorrDiffForecaster:
    """Baseline prediction plus a sampled residual (denormalized with the residual stats)."""

    kind, stochastic = "corrdiff", True

    def __init__(self, baseline: torch.nn.Module, denoiser, residual_stats, cfg: SampleConfig,
                 frame_channels: int = 1, residual_sampler: Callable | None = None):
        self.baseline = BaselineForecaster(baseline)
        self.denoiser = NetDenoiser(denoiser) if isinstance(denoiser, torch.nn.Module) else denoiser
        self.stats, self.cfg, self.c = residual_stats, cfg, frame_channels
        self.residual_sampler = residual_sampler or self._sample_residual

    def _sample_residual(self, cond, shape, seed):
        init, churn = stream_rngs(seed)
        r = generate(self.denoiser, shape, self.cfg, cond, init_rng=init, churn_rng=churn)
        return (r * self.stats.std + self.stats.mean).astype(np.float32)

    def components(self, window, seed):
        base = self.baseline.step(window, seed)
        cond = np.concatenate([window, base], axis=1)
        residual = self.residual_sampler(cond, base.shape, seed)
        return base, residual

    def step(self, window, seed):
        base, residual = self.components(window, seed)
        return base + residual


class LatentForecaster:
    kind, stochastic = "ldm", True

    def __init__(self, denoiser, ae, cfg: SampleConfig):
        self.denoiser = NetDenoiser(denoiser) if isinstance(denoiser, torch.nn.Module) else denoiser
        self.ae, self.cfg = ae, cfg

    def step(self, window, seed):
        init, churn = stream_rngs(seed)
        shape = (window.shape[0], self.ae.data_channels, *window.shape[2:])
        return generate_latent(self.denoiser, self.ae, shape, self.cfg, window, init_rng=init, churn_rng=churn)


@dataclass
class RolloutConfig:
    leads: int = 18
    window: int = 2
    members: int = 10
    base_seed: int = 0
    clamp: tuple[float, float] | None = None
    threads: int = 1

    def __post_init__(self):
        if self.window < 1 or self.members < 1 or self.leads < 1:
            raise ValueError("window, members and leads must be >= 1")


def member_seed(base: int, member: int) -> int:
    return int(np.random.SeedSequence([base, member]).generate_state(1)[0])


def step_seed(seed: int, lead: int) -> int:
    return int(np.random.SeedSequence([seed, lead, 1]).generate_state(1)[0])


def rollout(model: Forecaster, init_window: np.ndarray, cfg: RolloutConfig, seed: int) -> np.ndarray:
    """Feed each forecast back as the newest condition frame; returns (B, leads, C, H, W)."""
    window = np.asarray(init_window, dtype=np.float32)
    if window.ndim == 3:
        window = window[None]
    c = _channels(window, cfg.window)
    out = []
    for k in range(cfg.leads):
        frame = np.asarray(model.step(window, step_seed(seed, k)), dtype=np.float32)
        if not np.all(np.isfinite(frame)):
            raise ForecastError(f"{model.kind}: non-finite frame at lead {k + 1} (seed {seed})")
        if cfg.clamp is not None:
            frame = np.clip(frame, *cfg.clamp)
        out.append(frame)
        window = np.concatenate([window[:, c:], frame], axis=1)
    return np.stack(out, axis=1)


@dataclass
class EnsembleForecast:
    members: np.ndarray  # (M, B, leads, C, H, W)
    seeds: list[int]
    config_hash: str
    init_tag: str = ""
    meta: dict = field(default_factory=dict)

    def mean(self) -> np.ndarray:
        return self.members.astype(np.float64).mean(axis=0)

    def spread(self) -> np.ndarray:
        """Member standard deviation per pixel (population), (B, leads, C, H, W)."""
        return self.members.astype(np.float64).std(axis=0)


def config_hash(*parts) -> str:
    blob = json.dumps([p if isinstance(p, (dict, list, str, int, float)) else asdict(p) for p in parts],
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def ensemble(model: Forecaster, init_window: np.ndarray, cfg: RolloutConfig, init_tag: str = "") -> EnsembleForecast:
    """Members differ only in their RNG substream ``member_seed(base_seed, m)``."""
    seeds = [member_seed(cfg.base_seed, m) for m in range(cfg.members)]
    run = lambda s: rollout(model, init_window, cfg, s)  # noqa: E731
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            members = list(pool.map(run, seeds))
    else:
        members = [run(s) for s in seeds]
    return EnsembleForecast(np.stack(members), seeds, config_hash(cfg, {"model": model.kind}), init_tag)
