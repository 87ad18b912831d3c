"""Probability-flow ODE sampling with optional stochastic churn and Heun correction."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .schedule import SIGMA_MIN_DEFAULT, build_schedule

GAMMA_MAX = math.sqrt(2) - 1


class SamplingError(FloatingPointError):
    """Non-finite state during generation; carries the trajectory so far."""

    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


@dataclass(frozen=True)
class SampleConfig:
    num_steps: int = 36
    sigma_max: float = 80.0
    sigma_min: float = SIGMA_MIN_DEFAULT
    rho: float = 7.0
    s_churn: float = 0.0  # effective per-step gamma
    s_noise: float = 1.0
    s_tmin: float = 0.0
    s_tmax: float = math.inf
    seed: int = 0
    second_order: bool = False

    def __post_init__(self):
        if not 0 <= self.s_churn <= GAMMA_MAX + 1e-9:
            raise ValueError(f"per-step churn must be in [0, sqrt(2)-1], got {self.s_churn}")
        if self.s_noise <= 0:
            raise ValueError("s_noise must be > 0")
        if not 0 <= self.s_tmin <= self.s_tmax:
            raise ValueError("churn band must satisfy 0 <= s_tmin <= s_tmax")

    @classmethod
    def from_total_churn(cls, s_churn_total: float, num_steps: int, **kw) -> "SampleConfig":
        """Build from a whole-trajectory churn (per-step gamma = total / num_steps, capped)."""
        return cls(num_steps=num_steps, s_churn=min(s_churn_total / num_steps, GAMMA_MAX), **kw)

    def schedule(self):
        return build_schedule(self.num_steps, self.sigma_max, self.sigma_min, self.rho)

    def to_dict(self):
        d = asdict(self)
        d["s_tmax"] = None if math.isinf(self.s_tmax) else self.s_tmax
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("s_tmax") is None:
            d["s_tmax"] = math.inf
        return cls(**d)


@dataclass
class Trajectory:
    sigmas: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def record(self, sigma, x):
        self.sigmas.append(float(sigma))
        self.states.append(np.array(x, copy=True))

    def pixel_traces(self, indices, sample=0):
        """Values of flat pixel ``indices`` of one batch member at every recorded sigma."""
        return np.stack([s[sample].ravel()[indices] for s in self.states])

    def write_csv(self, path, indices, sample=0):
        traces = self.pixel_traces(indices, sample)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sigma"] + [f"px{i}" for i in indices])
            for s, row in zip(self.sigmas, traces):
                w.writerow([repr(s)] + [repr(float(v)) for v in row])


def stream_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the initial noise and the churn noise."""
    init, churn = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(churn)


def _slope(x, sigma, denoiser, condition):
    return (x - denoiser(x, sigma, condition)) / sigma


def euler_step(x, sigma, sigma_next, denoiser, condition=None):
    """One explicit Euler step of dx/dsigma = (x - D(x; sigma)) / sigma."""
    if not sigma > 0:
        raise ValueError(f"euler_step needs sigma > 0, got {sigma}")
    if not sigma_next < sigma:
        raise ValueError(f"sigma must decrease: {sigma} -> {sigma_next}")
    return x + (sigma_next - sigma) * _slope(x, sigma, denoiser, condition)


def heun_step(x, sigma, sigma_next, denoiser, condition=None):
    """Euler predictor plus trapezoidal corrector; plain Euler when stepping to sigma = 0."""
    if not sigma > 0:
        raise ValueError(f"heun_step needs sigma > 0, got {sigma}")
    if not sigma_next < sigma:
        raise ValueError(f"sigma must decrease: {sigma} -> {sigma_next}")
    d = _slope(x, sigma, denoiser, condition)
    x_next = x + (sigma_next - sigma) * d
    if sigma_next > 0:
        d2 = _slope(x_next, sigma_next, denoiser, condition)
        x_next = x + (sigma_next - sigma) * 0.5 * (d + d2)
    return x_next


def churn_inject(x, sigma, gamma, s_noise, rng, s_tmin=0.0, s_tmax=math.inf):
    """Raise the noise level to ``sigma * (1 + gamma)`` by adding fresh Gaussian noise."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if gamma == 0 or not s_tmin <= sigma <= s_tmax:
        return x, sigma
    sigma_hat = sigma * (1 + gamma)
    eps = rng.standard_normal(np.shape(x))
    x_hat = x + math.sqrt(sigma_hat**2 - sigma**2) * s_noise * eps
    return x_hat.astype(np.result_type(x), copy=False), sigma_hat


def solve_ode(x, sigmas, denoiser, condition=None, second_order=False):
    """Deterministic integration along an arbitrary descending sigma sequence."""
    step = heun_step if second_order else euler_step
    for s, s_next in zip(sigmas[:-1], sigmas[1:]):
        x = step(x, s, s_next, denoiser, condition)
    return x


def generate(denoiser, shape, cfg: SampleConfig, condition=None, *, init_rng=None, churn_rng=None,
             return_trajectory=False, dtype=np.float32):
    """Draw ``x ~ N(0, sigma_max^2 I)`` and integrate it down to sigma = 0.

    Unless explicit generators are passed, the initial and churn noise come
    from independent streams derived from ``cfg.seed``.
    """
    if init_rng is None or churn_rng is None:
        a, b = stream_rngs(cfg.seed)
        init_rng = init_rng or a
        churn_rng = churn_rng or b
    sched = cfg.schedule()
    step = heun_step if cfg.second_order else euler_step
    x = (init_rng.standard_normal(shape) * sched.sigmas[0]).astype(dtype)
    traj = Trajectory() if return_trajectory else None
    if traj is not None:
        traj.record(sched.sigmas[0], x)
    for i, (s, s_next) in enumerate(sched.pairs()):
        x, s_hat = churn_inject(x, s, cfg.s_churn, cfg.s_noise, churn_rng, cfg.s_tmin, cfg.s_tmax)
        x = step(x, s_hat, s_next, denoiser, condition).astype(dtype, copy=False)
        if traj is not None:
            traj.record(s_next, x)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state after step {i} (sigma={s_next})", traj)
    return (x, traj) if return_trajectory else x


def generate_latent(denoiser, ae, data_shape, cfg: SampleConfig, condition=None, **kw):
    """Encode the condition frames, generate in latent space, decode.

    ``condition`` is ``(B, k * C, H, W)``: ``k`` data-space frames stacked on the
    channel axis, each encoded separately.
    """
    b = data_shape[0]
    latent_shape = ae.latent_shape(data_shape)
    lat_cond = None
    if condition is not None:
        c = ae.data_channels
        k = condition.shape[1] // c
        frames = condition.reshape(b * k, c, *condition.shape[2:])
        enc = ae.encode(frames)
        lat_cond = enc.reshape(b, k * enc.shape[1], *enc.shape[2:])
    out = generate(denoiser, latent_shape, cfg, lat_cond, **kw)
    if kw.get("return_trajectory"):
        z, traj = out
        return ae.decode(z), traj
    return ae.decode(out)


def write_trajectory_csv(path: str | Path, traj: Trajectory, indices, sample=0):
    traj.write_csv(path, indices, sample)
