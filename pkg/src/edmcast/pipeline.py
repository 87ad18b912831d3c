"""Glue between on-disk datasets/checkpoints and the modelling modules.

Shared by the command line and the experiment scripts. Checkpoints are an
``.edmt`` parameter vector plus a JSON sidecar whose ``meta`` records the
model kind, the data normalization and any companion checkpoints (the
CorrDiff baseline, the LDM autoencoder), stored by name next to it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autoencoder import load_autoencoder
from .forecast import (
    BaselineForecaster, CorrDiffForecaster, DiffusionForecaster, LatentForecaster, Persistence,
)
from .grid import ContractError, DatasetManifest, NormStats, read_tensor_file
from .network import load_checkpoint
from .precond import PrecondNet
from .sampler import SampleConfig
from .toy_data import windows

MODEL_KINDS = ("baseline", "diffusion", "corrdiff", "ldm")


def load_split(data_dir: str | Path, split: str) -> tuple[np.ndarray, DatasetManifest]:
    """Sequences ``(N, L, 1, H, W)`` in kelvin and the split manifest."""
    data_dir = Path(data_dir)
    man_path = data_dir / f"{split}.json"
    if not man_path.exists():
        raise FileNotFoundError(f"no manifest for split {split!r} in {data_dir}")
    man = DatasetManifest.load(man_path)
    seqs = read_tensor_file(data_dir / (man.tensor_file or f"{split}.edmt"))
    if seqs.ndim != 4 or seqs.shape[0] != man.count:
        raise ContractError(f"{split} tensor shape {seqs.shape} disagrees with its manifest")
    return seqs[:, :, None], man


def normalized_pairs(seqs, stats: NormStats, window: int = 2):
    cond, tgt = windows(seqs, window)
    return _norm(cond, stats), _norm(tgt, stats)


def _norm(a, stats):
    return ((np.asarray(a, dtype=np.float64) - stats.mean) / stats.std).astype(np.float32)


def _denorm(a, stats):
    return (np.asarray(a, dtype=np.float64) * stats.std + stats.mean).astype(np.float32)


def encode_frames(ae, frames):
    """Encode channel-stacked frames ``(N, k * C, H, W)`` one frame at a time."""
    n, kc = frames.shape[:2]
    c = ae.data_channels
    z = ae.encode(frames.reshape(n * (kc // c), c, *frames.shape[2:]))
    return z.reshape(n, (kc // c) * z.shape[1], *z.shape[2:])


def _companion(path: Path, name: str) -> Path:
    return path.with_name(name)


def load_model(path: str | Path):
    """Returns ``(kind, parts, meta)``; ``parts`` holds the torch modules and stats needed to forecast."""
    path = Path(path)
    if not path.with_suffix(".json").exists():
        raise FileNotFoundError(f"checkpoint sidecar {path.with_suffix('.json')} not found")
    net, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if kind not in MODEL_KINDS:
        raise ContractError(f"{path}: unknown model kind {kind!r}")
    parts = {"stats": NormStats.from_dict(meta["stats"])}
    if kind == "baseline":
        parts["net"] = net.eval()
    else:
        parts["denoiser"] = PrecondNet(net, meta.get("sigma_data", 1.0)).eval()
    if kind == "corrdiff":
        parts["baseline"], _ = load_checkpoint(_companion(path, meta["baseline"]))
        parts["residual_stats"] = NormStats.from_dict(meta["residual_stats"])
    if kind == "ldm":
        parts["ae"], _ = load_autoencoder(_companion(path, meta["autoencoder"]))
    return kind, parts, meta


def build_forecaster(spec: str, sample_cfg: SampleConfig, stats: NormStats | None = None):
    """``spec`` is ``persistence`` or a checkpoint path. Returns ``(forecaster, stats)``."""
    if spec == "persistence":
        if stats is None:
            raise ValueError("persistence needs dataset stats")
        return Persistence(), stats
    kind, parts, meta = load_model(spec)
    if kind == "diffusion" and not meta.get("conditional", True):
        raise ContractError(f"{spec}: an unconditional model cannot forecast")
    if kind == "baseline":
        return BaselineForecaster(parts["net"]), parts["stats"]
    if kind == "diffusion":
        return DiffusionForecaster(parts["denoiser"], sample_cfg), parts["stats"]
    if kind == "corrdiff":
        return CorrDiffForecaster(parts["baseline"], parts["denoiser"], parts["residual_stats"], sample_cfg), \
            parts["stats"]
    return LatentForecaster(parts["denoiser"], parts["ae"], sample_cfg), parts["stats"]


def to_model_space(frames_kelvin, stats):
    return _norm(frames_kelvin, stats)


def to_kelvin(frames, stats):
    return _denorm(frames, stats)

