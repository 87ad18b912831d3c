"""Encode/decode contract for latent diffusion, a trainable tiny autoencoder and reconstruction metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import NormStats, read_tensor_file, write_tensor_file
from .network import get_param_vector, param_layout, set_param_vector
from .training import TrainConfig, _fit, _t, block_split


class Autoencoder(Protocol):
    data_channels: int
    latent_channels: int
    compression: int

    def encode(self, x: np.ndarray) -> np.ndarray: ...

    def decode(self, z: np.ndarray) -> np.ndarray: ...

    def latent_shape(self, data_shape) -> tuple[int, ...]: ...


class IdentityAutoencoder:
    compression = 1

    def __init__(self, channels: int = 1):
        self.data_channels = self.latent_channels = channels

    def encode(self, x):
        return x

    def decode(self, z):
        return z

    def latent_shape(self, data_shape):
        return tuple(data_shape)


@dataclass
class AESpec:
    data_channels: int = 1
    latent_channels: int = 4
    compression: int = 2
    width: int = 16
    linear: bool = False
    variational: bool = False
    kl_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.compression not in (1, 2, 4):
            raise ValueError("compression must be 1, 2 or 4")


class AEModule(nn.Module):
    def __init__(self, spec: AESpec):
        super().__init__()
        self.spec = spec
        with torch.random.fork_rng():
            torch.manual_seed(spec.seed)
            self._build(spec)

    def _build(self, spec):
        w, levels = spec.width, int(np.log2(spec.compression))
        conv = lambda a, b: nn.Conv2d(a, b, 3, padding=1, padding_mode="circular")  # noqa: E731
        if spec.linear:
            # per-pixel linear codec; spatial compression comes from pooling alone
            self.enc = nn.ModuleList([nn.Conv2d(spec.data_channels, spec.latent_channels, 1)])
            self.dec = nn.ModuleList([nn.Conv2d(spec.latent_channels, spec.data_channels, 1)])
        else:
            self.enc = nn.ModuleList([conv(spec.data_channels, w)] + [conv(w, w) for _ in range(levels)])
            self.dec = nn.ModuleList([conv(spec.latent_channels, w)] + [conv(w, w) for _ in range(levels)])
            self.enc_out = conv(w, spec.latent_channels * (2 if spec.variational else 1))
            self.dec_out = conv(w, spec.data_channels)
        self.levels = levels

    def encode_stats(self, x):
        if self.spec.linear:
            h = F.avg_pool2d(x, self.spec.compression) if self.levels else x
            return self.enc[0](h), None
        h = F.silu(self.enc[0](x))
        for layer in self.enc[1:]:
            h = F.silu(layer(F.avg_pool2d(h, 2)))
        z = self.enc_out(h)
        if self.spec.variational:
            return z.chunk(2, dim=1)
        return z, None

    def decode(self, z):
        if self.spec.linear:
            h = self.dec[0](z)
            return F.interpolate(h, scale_factor=self.spec.compression) if self.levels else h
        h = F.silu(self.dec[0](z))
        for layer in self.dec[1:]:
            h = F.silu(layer(F.interpolate(h, scale_factor=2, mode="nearest")))
        return self.dec_out(h)

    def forward(self, x, rng=None):
        mean, logvar = self.encode_stats(x)
        z = mean
        if logvar is not None and self.training:
            z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=rng)
        return self.decode(z), mean, logvar


class TorchAutoencoder:
    """Frozen :class:`AEModule` behind the numpy contract; latents are normalized per channel."""

    def __init__(self, module: AEModule, latent_stats: NormStats | None = None):
        self.module = module.eval()
        self.latent_stats = latent_stats
        self.data_channels = module.spec.data_channels
        self.latent_channels = module.spec.latent_channels
        self.compression = module.spec.compression

    def latent_shape(self, data_shape):
        *lead, c, h, w = data_shape
        return (*lead, self.latent_channels, h // self.compression, w // self.compression)

    def _raw_encode(self, x):
        with torch.no_grad():
            return self.module.encode_stats(_t(x))[0].numpy()

    def encode(self, x):
        z = self._raw_encode(x)
        if self.latent_stats is not None:
            z = (z - np.asarray(self.latent_stats.mean)[:, None, None]) / np.asarray(self.latent_stats.std)[:, None, None]
        return z.astype(np.float32)

    def decode(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.latent_stats is not None:
            z = z * np.asarray(self.latent_stats.std)[:, None, None] + np.asarray(self.latent_stats.mean)[:, None, None]
        with torch.no_grad():
            return self.module.decode(_t(z)).numpy()

    def spec_dict(self):
        return asdict(self.module.spec)


def train_autoencoder(data, spec: AESpec, cfg: TrainConfig) -> tuple[TorchAutoencoder, list[dict]]:
    """MSE (plus optional KL) training on normalized ``data`` (N, C, H, W); latent stats from the train block."""
    data = np.asarray(data, dtype=np.float32)
    module = AEModule(spec)
    tr, va = block_split(len(data), cfg.val_fraction)
    x_tr, x_va = data[tr], data[va]
    gen = torch.Generator().manual_seed(cfg.seed)

    def loss_fn(x):
        recon, mean, logvar = module(x, gen)
        loss = ((recon - x) ** 2).mean()
        if logvar is not None:
            kl = 0.5 * (mean**2 + logvar.exp() - 1 - logvar).mean()
            loss = loss + spec.kl_weight * kl
        return loss

    def step_fn(opt, idx, rng):
        opt.zero_grad()
        total = 0.0
        for chunk in np.array_split(idx, cfg.accumulation):
            loss = loss_fn(_t(x_tr[chunk]))
            (loss / cfg.accumulation).backward()
            total += loss.item() / cfg.accumulation
        opt.step()
        return total

    def val_fn():
        with torch.no_grad():
            return float(loss_fn(_t(x_va)))

    history, _ = _fit(module, cfg, len(tr), step_fn, val_fn, "autoencoder")
    ae = TorchAutoencoder(module)
    z = ae._raw_encode(x_tr).astype(np.float64)
    zc = np.moveaxis(z, 1, 0).reshape(spec.latent_channels, -1)
    ae.latent_stats = NormStats(zc.mean(axis=1), np.maximum(zc.std(axis=1), 1e-6))
    return ae, history


@dataclass
class ReconReport:
    bias: float
    mae: float
    rmse: float
    worst_pixel: np.ndarray

    def row(self, name):
        return [name, self.bias, self.mae, self.rmse]


def evaluate_reconstruction(ae: Autoencoder, data_kelvin, stats: NormStats | None = None, batch=64) -> ReconReport:
    """Bias (original minus reconstruction), MAE and pooled RMSE in kelvin.

    With ``stats`` the autoencoder sees normalized data and the reconstruction
    is mapped back to kelvin before scoring.
    """
    x = np.asarray(data_kelvin, dtype=np.float64)
    recon = []
    for start in range(0, len(x), batch):
        chunk = x[start:start + batch]
        if stats is not None:
            chunk = (chunk - stats.mean) / stats.std
        r = np.asarray(ae.decode(ae.encode(chunk)), dtype=np.float64)
        if r.shape != chunk.shape:
            raise ValueError(f"reconstruction shape {r.shape} != input {chunk.shape}")
        if stats is not None:
            r = r * stats.std + stats.mean
        recon.append(r)
    err = x - np.concatenate(recon)
    axes = tuple(range(1, err.ndim))
    return ReconReport(
        bias=float(err.mean()),
        mae=float(np.abs(err).mean()),
        rmse=float(np.sqrt((err**2).mean())),
        worst_pixel=np.abs(err).max(axis=axes),
    )


def write_recon_csv(path, reports: dict[str, ReconReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "bias", "mae", "rmse"])
        for name, rep in reports.items():
            w.writerow(rep.row(name))


def save_autoencoder(path: str | Path, ae: TorchAutoencoder, meta: dict | None = None) -> None:
    path = Path(path)
    write_tensor_file(path.with_suffix(".edmt"), get_param_vector(ae.module).astype(np.float32))
    sidecar = {"spec": ae.spec_dict(), "layout": param_layout(ae.module),
               "latent_stats": ae.latent_stats.to_dict() if ae.latent_stats is not None else None,
               "meta": {"kind": "autoencoder", **(meta or {})}}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_autoencoder(path: str | Path) -> tuple[TorchAutoencoder, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    module = AEModule(AESpec(**sidecar["spec"]))
    set_param_vector(module, read_tensor_file(path.with_suffix(".edmt")), sidecar["layout"])
    stats = NormStats.from_dict(sidecar["latent_stats"]) if sidecar["latent_stats"] else None
    return TorchAutoencoder(module, stats), sidecar["meta"]
