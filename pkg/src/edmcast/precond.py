"""Preconditioning scalars, denoiser wrappers, analytic ideal denoisers and the score bridge.

A *denoiser* is any callable ``D(x, sigma, condition=None) -> array`` where
``x`` is a batch ``(B, ...)`` and ``sigma`` a scalar or a length-``B`` vector.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
from scipy.special import logsumexp


class Denoiser(Protocol):
    def __call__(self, x: np.ndarray, sigma, condition: np.ndarray | None = None) -> np.ndarray: ...


# -- scalar conditioning functions; work on floats, numpy arrays and torch tensors

def c_skip(sigma, sigma_data=1.0):
    return sigma_data**2 / (sigma**2 + sigma_data**2)


def c_out(sigma, sigma_data=1.0):
    return sigma * sigma_data / (sigma_data**2 + sigma**2) ** 0.5


def c_in(sigma, sigma_data=1.0):
    return 1 / (sigma_data**2 + sigma**2) ** 0.5


def c_noise(sigma):
    if isinstance(sigma, torch.Tensor):
        if torch.any(sigma <= 0):
            raise ValueError("c_noise needs sigma > 0")
        return torch.log(sigma) / 4
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError(f"c_noise needs sigma > 0, got {sigma}")
    return np.log(sigma) / 4


def _per_sample(sigma, x):
    """Reshape a scalar or (B,) sigma so it broadcasts against batch ``x``."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        return s
    return s.reshape(-1, *([1] * (x.ndim - 1)))


@dataclass(frozen=True)
class PrecondParams:
    sigma_data: float = 1.0

    def __post_init__(self):
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be > 0")


class PreconditionedDenoiser:
    """``D(x|c; s) = c_skip x + c_out F(c_in x | c; c_noise)`` around a numpy raw net.

    ``raw_net(scaled_x, noise_embed, condition)`` must return an array shaped like ``x``.
    """

    def __init__(self, raw_net: Callable, params: PrecondParams = PrecondParams()):
        self.raw_net = raw_net
        self.params = params

    def __call__(self, x, sigma, condition=None):
        sd = self.params.sigma_data
        s = _per_sample(sigma, x)
        if np.all(s == 0):
            return np.array(x, copy=True)
        out = self.raw_net(c_in(s, sd) * x, c_noise(s), condition)
        out = np.asarray(out)
        if out.shape != np.shape(x):
            raise ValueError(f"raw net returned shape {out.shape}, expected {np.shape(x)}")
        return (c_skip(s, sd) * x + c_out(s, sd) * out).astype(np.result_type(x))


def wrap_denoiser(raw_net: Callable, params: PrecondParams = PrecondParams()) -> PreconditionedDenoiser:
    return PreconditionedDenoiser(raw_net, params)


class GaussianMixturePrior:
    """Mixture of isotropic/diagonal Gaussians over fields; the exact posterior mean is the ideal denoiser.

    ``means`` and ``variances`` are per component and broadcast against one
    sample's event shape (everything but the leading batch axis).
    """

    def __init__(self, weights: Sequence[float], means: Sequence, variances: Sequence):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) != len(means) or len(w) != len(variances):
            raise ValueError("weights, means and variances must have one entry per component")
        if np.any(w <= 0):
            raise ValueError("component weights must be positive")
        self.weights = w / w.sum()
        self.means = [np.asarray(m, dtype=np.float64) for m in means]
        self.variances = [np.asarray(v, dtype=np.float64) for v in variances]
        if any(np.any(v <= 0) for v in self.variances):
            raise ValueError("component variances must be positive")

    def _component_loglik(self, x, s2):
        """log N(x; mu_k, (v_k + s^2) I) summed over event dims, shape (K, B)."""
        axes = tuple(range(1, x.ndim))
        out = []
        for mu, v in zip(self.means, self.variances):
            var = v + s2
            ll = -0.5 * ((x - mu) ** 2 / var + np.log(2 * np.pi * var))
            out.append(np.sum(np.broadcast_to(ll, x.shape), axis=axes))
        return np.stack(out)

    def responsibilities(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        s2 = _per_sample(sigma, x) ** 2
        logits = np.log(self.weights)[:, None] + self._component_loglik(x, s2)
        return np.exp(logits - logsumexp(logits, axis=0, keepdims=True))

    def __call__(self, x, sigma, condition=None):
        xf = np.asarray(x, dtype=np.float64)
        s2 = _per_sample(sigma, xf) ** 2
        r = self.responsibilities(xf, sigma)
        out = np.zeros_like(xf)
        for k, (mu, v) in enumerate(zip(self.means, self.variances)):
            rk = r[k].reshape(-1, *([1] * (xf.ndim - 1)))
            out += rk * (v * xf + s2 * mu) / (v + s2)
        return out.astype(np.result_type(x, np.float32))

    def log_density(self, x, sigma):
        """log p(x; sigma) of the noise-convolved prior, per sample."""
        x = np.asarray(x, dtype=np.float64)
        s2 = _per_sample(sigma, x) ** 2
        return logsumexp(np.log(self.weights)[:, None] + self._component_loglik(x, s2), axis=0)

    def sample(self, shape, rng: np.random.Generator):
        """Draw ``shape[0]`` clean samples of event shape ``shape[1:]``."""
        ks = rng.choice(len(self.weights), size=shape[0], p=self.weights)
        eps = rng.standard_normal(shape)
        out = np.empty(shape)
        for k, (mu, v) in enumerate(zip(self.means, self.variances)):
            sel = ks == k
            out[sel] = np.broadcast_to(mu, shape[1:]) + np.sqrt(v) * eps[sel]
        return out


class GaussianPrior(GaussianMixturePrior):
    def __init__(self, mean, variance):
        super().__init__([1.0], [mean], [variance])

    @property
    def mean(self):
        return self.means[0]

    @property
    def variance(self):
        return self.variances[0]


def analytic_denoiser(prior: GaussianMixturePrior) -> Denoiser:
    return prior


def score_from_denoiser(denoiser: Denoiser, x, sigma, condition=None):
    """Score of the noise-convolved density from a denoiser: ``(D - x) / sigma^2``."""
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("score needs sigma > 0")
    s = _per_sample(sigma, np.asarray(x))
    return (denoiser(x, sigma, condition) - x) / s**2


class PrecondNet(torch.nn.Module):
    """Torch preconditioning wrapper; condition channels are concatenated after ``c_in * x``."""

    def __init__(self, net: torch.nn.Module, sigma_data: float = 1.0):
        super().__init__()
        self.net = net
        self.sigma_data = float(sigma_data)

    def forward(self, x, sigma, condition=None):
        sigma = torch.as_tensor(sigma, dtype=x.dtype).reshape(-1)
        if sigma.numel() == 1:
            sigma = sigma.expand(x.shape[0])
        s = sigma.reshape(-1, 1, 1, 1)
        sd = self.sigma_data
        inp = c_in(s, sd) * x
        if condition is not None:
            inp = torch.cat([inp, condition], dim=1)
        f = self.net(inp, c_noise(sigma))
        return c_skip(s, sd) * x + c_out(s, sd) * f


class NetDenoiser:
    """Numpy adapter around a frozen :class:`PrecondNet` for the sampler.

    Safe for concurrent read-only use; torch calls are serialized by a lock
    because the intra-op thread pool is shared.
    """

    def __init__(self, module: PrecondNet):
        self.module = module.eval()
        self._lock = threading.Lock()

    def __call__(self, x, sigma, condition=None):
        xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        st = torch.as_tensor(np.broadcast_to(np.asarray(sigma, dtype=np.float32), (xt.shape[0],)).copy())
        ct = None if condition is None else torch.from_numpy(np.ascontiguousarray(condition, dtype=np.float32))
        with self._lock, torch.no_grad():
            out = self.module(xt, st, ct)
        return out.numpy().astype(np.result_type(x, np.float32), copy=False)
