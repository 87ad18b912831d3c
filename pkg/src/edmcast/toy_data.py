"""Synthetic nowcasting world: cold Gaussian blobs advecting and growing on a periodic grid."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import DatasetManifest, Field, compute_stats, write_tensor_file

SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class BlobWorldConfig:
    grid: int = 64
    n_blobs: tuple[int, int] = (3, 7)
    velocity: str = "uniform"  # uniform | rotational
    speed_range: tuple[float, float] = (0.5, 2.0)  # px / frame
    angular_range: tuple[float, float] = (-0.03, 0.03)  # rad / frame, rotational only
    fixed_velocity: tuple[float, float] | None = None  # (vy, vx) override for uniform
    growth_range: tuple[float, float] = (-0.06, 0.06)  # e-folding rate per frame
    width_range: tuple[float, float] = (3.0, 7.0)  # px
    amplitude_range: tuple[float, float] = (25.0, 70.0)  # kelvin, cold anomaly
    background: float = 290.0
    spawn_rate: float = 0.05  # expected new blobs per frame
    death_rate: float = 0.0  # per-blob probability per frame
    frame_minutes: float = 10.0
    t_range: tuple[float, float] = (180.0, 330.0)
    seed: int = 0

    def __post_init__(self):
        if self.grid < 16:
            raise ValueError("grid must be >= 16")
        if self.velocity not in ("uniform", "rotational"):
            raise ValueError(f"unknown velocity kind {self.velocity!r}")
        lo, hi = self.t_range
        if not (lo <= self.background <= hi):
            raise ValueError("background outside the brightness-temperature range")
        if self.n_blobs[0] < 0 or self.n_blobs[0] > self.n_blobs[1]:
            raise ValueError("bad blob count range")
        if min(self.width_range) <= 0 or self.spawn_rate < 0 or not 0 <= self.death_rate <= 1:
            raise ValueError("bad blob parameters")


@dataclass
class _Blobs:
    pos: np.ndarray  # (n, 2) y, x
    amp: np.ndarray
    width: np.ndarray
    rate: np.ndarray


def _draw_blobs(cfg: BlobWorldConfig, rng, n):
    return _Blobs(
        pos=rng.uniform(0, cfg.grid, size=(n, 2)),
        amp=rng.uniform(*cfg.amplitude_range, size=n),
        width=rng.uniform(*cfg.width_range, size=n),
        rate=rng.uniform(*cfg.growth_range, size=n),
    )


def render(cfg: BlobWorldConfig, blobs: _Blobs) -> np.ndarray:
    """Brightness temperature (1, H, W): background minus periodic Gaussian anomalies."""
    n = cfg.grid
    coords = np.arange(n, dtype=np.float64)
    field_ = np.full((n, n), cfg.background)
    for (py, px), a, w in zip(blobs.pos, blobs.amp, blobs.width):
        dy = (coords - py + n / 2) % n - n / 2
        dx = (coords - px + n / 2) % n - n / 2
        field_ -= a * np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * w**2))
    return np.clip(field_, *cfg.t_range)[None].astype(np.float32)


def generate_sequence(cfg: BlobWorldConfig, length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``length`` consecutive frames (length, 1, H, W) in kelvin."""
    if length < 3:
        raise ValueError("sequences need at least 3 frames (two conditions and a target)")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    blobs = _draw_blobs(cfg, rng, rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    center = np.array([cfg.grid / 2, cfg.grid / 2])
    if cfg.velocity == "uniform":
        if cfg.fixed_velocity is not None:
            vel = np.asarray(cfg.fixed_velocity, dtype=np.float64)
        else:
            speed, angle = rng.uniform(*cfg.speed_range), rng.uniform(0, 2 * math.pi)
            vel = speed * np.array([math.sin(angle), math.cos(angle)])
    else:
        omega = rng.uniform(*cfg.angular_range)
        rot = np.array([[math.cos(omega), -math.sin(omega)], [math.sin(omega), math.cos(omega)]])

    frames = []
    for k in range(length):
        frames.append(render(cfg, blobs))
        if cfg.velocity == "uniform":
            blobs.pos = (blobs.pos + vel) % cfg.grid
        else:
            blobs.pos = (center + (blobs.pos - center) @ rot.T) % cfg.grid
        blobs.amp = blobs.amp * np.exp(blobs.rate)
        if cfg.death_rate > 0:
            keep = rng.random(len(blobs.amp)) >= cfg.death_rate
            blobs = _Blobs(blobs.pos[keep], blobs.amp[keep], blobs.width[keep], blobs.rate[keep])
        if cfg.spawn_rate > 0:
            new = _draw_blobs(cfg, rng, rng.poisson(cfg.spawn_rate))
            # newborn blobs start weak and grow
            new.amp *= 0.3
            new.rate = np.abs(new.rate)
            blobs = _Blobs(*(np.concatenate([getattr(blobs, f), getattr(new, f)]) for f in ("pos", "amp", "width", "rate")))
    return np.stack(frames)


@dataclass
class PatchFilter:
    min_cloud_fraction: float = 0.10
    cloud_threshold: float = 273.0
    max_viewing_zenith: float = 65.0
    max_solar_zenith: float = 85.0

    def __post_init__(self):
        if not 0 <= self.min_cloud_fraction <= 1:
            raise ValueError("min_cloud_fraction must be in [0, 1]")


@dataclass
class FilterResult:
    accepted: bool
    cloud_fraction: float
    failed: list[str] = field(default_factory=list)


def apply_filter(f, filt: PatchFilter, viewing_zenith: float | None = None,
                 solar_zenith: float | None = None) -> FilterResult:
    """Cloud fraction = share of pixels colder than the threshold; zenith checks pass when angles are unknown."""
    values = f.values if isinstance(f, Field) else np.asarray(f)
    if isinstance(f, Field) and f.units != "kelvin":
        raise ValueError("apply_filter expects kelvin")
    frac = float(np.mean(values < filt.cloud_threshold))
    failed = []
    if frac < filt.min_cloud_fraction:
        failed.append("cloud_fraction")
    if viewing_zenith is not None and viewing_zenith >= filt.max_viewing_zenith:
        failed.append("viewing_zenith")
    if solar_zenith is not None and solar_zenith >= filt.max_solar_zenith:
        failed.append("solar_zenith")
    return FilterResult(not failed, frac, failed)


def make_split(cfg: BlobWorldConfig, filt: PatchFilter | None, count: int, split: str, length: int,
               filter_frame: int = 1, max_attempts: int = 100):
    """``count`` accepted sequences (count, length, 1, H, W) plus the rejection count.

    Sequence seeds are ``(cfg.seed, split, attempt)`` so splits never share a stream.
    """
    out, rejected, attempt = [], 0, 0
    while len(out) < count:
        rng = np.random.default_rng([cfg.seed, SPLITS[split], attempt])
        attempt += 1
        seq = generate_sequence(cfg, length, rng)
        if filt is not None and not apply_filter(seq[filter_frame], filt).accepted:
            rejected += 1
            if rejected > max_attempts * max(count, 1):
                raise RuntimeError("filter rejects nearly everything; check the config")
            continue
        out.append(seq)
    return np.stack(out), rejected


def windows(seqs: np.ndarray, window: int = 2):
    """Sliding (condition, target) pairs from sequences (N, L, C, H, W).

    Conditions stack ``window`` frames on the channel axis. Pairs are ordered by
    sequence, then time, so a trailing block split is a time-block split.
    """
    n, length, c, h, w = seqs.shape
    conds, targets = [], []
    for t in range(window, length):
        conds.append(seqs[:, t - window:t].reshape(n, window * c, h, w))
        targets.append(seqs[:, t])
    cond = np.stack(conds, axis=1).reshape(-1, window * c, h, w)
    tgt = np.stack(targets, axis=1).reshape(-1, c, h, w)
    return cond, tgt


def build_dataset(cfg: BlobWorldConfig, filt: PatchFilter | None, counts: dict[str, int], out_dir: str | Path,
                  length: int = 3) -> dict[str, DatasetManifest]:
    """Write ``{split}.edmt`` (count, length, H, W) in kelvin and ``{split}.json`` manifests.

    Normalization statistics come from the train split only and are stored in every manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, rejected = {}, {}
    for split, count in counts.items():
        data[split], rejected[split] = make_split(cfg, filt, count, split, length)
    stats = compute_stats([Field(data["train"].reshape(-1, 1, cfg.grid, cfg.grid), "kelvin")])
    manifests = {}
    for split, seqs in data.items():
        fname = f"{split}.edmt"
        write_tensor_file(out_dir / fname, seqs[:, :, 0])
        cfg_dict = asdict(cfg)
        man = DatasetManifest(
            count=len(seqs), field_shape=[1, cfg.grid, cfg.grid], units="kelvin", stats=stats, split=split,
            source="synthetic blob world", sequence_length=length, tensor_file=fname,
            extra={"rejected": rejected[split], "config": cfg_dict,
                   "filter": asdict(filt) if filt is not None else None},
        )
        man.save(out_dir / f"{split}.json")
        manifests[split] = man
    return manifests
