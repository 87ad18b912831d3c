"""Desk-scale convolutional denoiser/regressor, parameter vectors, optimizer and checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import read_tensor_file, write_tensor_file

ACTIVATIONS = {"silu": F.silu, "tanh": torch.tanh, "gelu": F.gelu}


@dataclass
class ConvNetSpec:
    in_channels: int
    out_channels: int = 1
    widths: tuple[int, ...] = (16, 32)
    depth: int = 1
    activation: str = "silu"
    seed: int = 0
    noise_embedding: bool = True
    embed_hidden: int = 32
    zero_init_out: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not 0 <= self.depth <= 2:
            raise ValueError(f"depth must be 0-2, got {self.depth}")
        if len(self.widths) != self.depth + 1:
            raise ValueError(f"need {self.depth + 1} widths for depth {self.depth}, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="circular")


class ConvNet(nn.Module):
    """Small periodic U-Net: stem -> [pool, conv]*depth -> mid -> [upsample, concat, conv]*depth -> out.

    The scalar noise embedding goes through a two-layer MLP and is added as a
    per-channel bias after the stem convolution.
    """

    def __init__(self, spec: ConvNetSpec):
        super().__init__()
        self.spec = spec
        gen = torch.Generator().manual_seed(spec.seed)
        w = spec.widths
        self.stem = _conv(spec.in_channels, w[0])
        if spec.noise_embedding:
            self.embed = nn.Sequential(nn.Linear(1, spec.embed_hidden), nn.SiLU(), nn.Linear(spec.embed_hidden, w[0]))
        self.down = nn.ModuleList(_conv(w[d - 1], w[d]) for d in range(1, spec.depth + 1))
        self.mid = _conv(w[-1], w[-1])
        self.up = nn.ModuleList(_conv(w[d] + w[d - 1], w[d - 1]) for d in range(spec.depth, 0, -1))
        self.out = _conv(w[0], spec.out_channels)
        self._init(gen)

    def _init(self, gen):
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(1.0 / fan_in))
                    m.bias.zero_()
            if self.spec.zero_init_out:
                self.out.weight.zero_()

    def forward(self, x, noise_embed=None):
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.shape[1]}")
        scale = 2**self.spec.depth
        if x.shape[-1] % scale or x.shape[-2] % scale:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {scale}")
        act = ACTIVATIONS[self.spec.activation]
        h = self.stem(x)
        if self.spec.noise_embedding:
            e = torch.zeros(x.shape[0], dtype=x.dtype) if noise_embed is None else torch.as_tensor(noise_embed, dtype=x.dtype)
            e = e.reshape(-1, 1).expand(x.shape[0], 1)
            h = h + self.embed(e)[:, :, None, None]
        h = act(h)
        skips = []
        for conv in self.down:
            skips.append(h)
            h = act(conv(F.avg_pool2d(h, 2)))
        h = act(self.mid(h))
        for conv in self.up:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = act(conv(torch.cat([h, skips.pop()], dim=1)))
        return self.out(h)


def forward(net: ConvNet, x: np.ndarray, noise_embed=None) -> np.ndarray:
    """Inference on numpy input; no gradients are kept."""
    with torch.no_grad():
        dtype = next(net.parameters()).dtype
        out = net(torch.as_tensor(np.asarray(x), dtype=dtype), noise_embed)
    return out.numpy()


# -- flat parameter vectors

def param_layout(net: nn.Module) -> list[tuple[str, list[int]]]:
    return [(name, list(p.shape)) for name, p in net.named_parameters()]


def get_param_vector(net: nn.Module) -> np.ndarray:
    return np.concatenate([p.detach().cpu().numpy().ravel() for p in net.parameters()])


def set_param_vector(net: nn.Module, flat: np.ndarray, layout=None) -> None:
    if layout is not None and [tuple(x) for x in layout] != [tuple(x) for x in param_layout(net)]:
        raise ValueError("parameter layout does not match network")
    flat = np.asarray(flat)
    total = sum(p.numel() for p in net.parameters())
    if flat.size != total:
        raise ValueError(f"vector has {flat.size} entries, network has {total}")
    offset = 0
    with torch.no_grad():
        for p in net.parameters():
            n = p.numel()
            p.copy_(torch.from_numpy(flat[offset:offset + n].reshape(p.shape).copy()))
            offset += n


def param_gradient(net: nn.Module, loss: torch.Tensor) -> np.ndarray:
    """Flat gradient of a scalar loss w.r.t. every parameter (zeros for unused ones)."""
    params = list(net.parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return np.concatenate([
        (g if g is not None else torch.zeros_like(p)).detach().numpy().ravel() for g, p in zip(grads, params)
    ])


class NonFiniteGradientError(FloatingPointError):
    pass


class Adam:
    """Adam over a module's parameters that refuses non-finite gradients."""

    def __init__(self, net: nn.Module, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.named = list(net.named_parameters())
        self.opt = torch.optim.Adam([p for _, p in self.named], lr=lr, betas=betas, eps=eps)

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=False)

    def step(self):
        bad = [name for name, p in self.named if p.grad is not None and not torch.all(torch.isfinite(p.grad))]
        if bad:
            raise NonFiniteGradientError(f"non-finite gradients in {bad}")
        self.opt.step()


# -- checkpoints: EDMT parameter vector plus JSON sidecar

def save_checkpoint(path: str | Path, net: ConvNet, meta: dict | None = None) -> None:
    path = Path(path)
    write_tensor_file(path.with_suffix(".edmt"), get_param_vector(net).astype(np.float32))
    sidecar = {"spec": asdict(net.spec), "layout": param_layout(net), "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ConvNet, dict]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    net = ConvNet(ConvNetSpec(**sidecar["spec"]))
    set_param_vector(net, read_tensor_file(path.with_suffix(".edmt")), sidecar["layout"])
    return net, sidecar["meta"]
