"""Denoising objective, diffusion and baseline training loops, residual (CorrDiff) targets."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .grid import NormStats
from .network import Adam, ConvNet, ConvNetSpec, NonFiniteGradientError
from .precond import PrecondNet
from .schedule import TrainSigmaDist, sample_train_sigma

log = logging.getLogger(__name__)

WEIGHTINGS = ("edm", "inverse_sigma", "uniform")
TASKS = ("unconditional", "conditional", "corrdiff_residual")


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, last_good_state=None):
        super().__init__(msg)
        self.last_good_state = last_good_state


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    accumulation: int = 1
    weighting: str = "edm"
    patience: int = 10
    val_fraction: float = 0.2
    seed: int = 0
    lr: float = 1e-3
    sigma_data: float = 1.0
    train_sigma: TrainSigmaDist = field(default_factory=TrainSigmaDist)
    max_steps: int | None = None
    val_draws: int = 2

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch_size and accumulation must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass(frozen=True)
class TrainTask:
    kind: str = "conditional"
    condition_channels: int = 2
    target_channels: int = 1

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")
        if self.kind == "unconditional" and self.condition_channels:
            raise ValueError("unconditional task takes no condition channels")


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: list[dict]
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)

    def write_loss_csv(self, path: str | Path) -> None:
        write_loss_csv(path, self.history)


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def loss_weight(sigma, kind="edm", sigma_data=1.0):
    if kind == "edm":
        return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2
    if kind == "inverse_sigma":
        return 1 / sigma
    if kind == "uniform":
        return sigma * 0 + 1
    raise ValueError(f"unknown weighting {kind!r}")


def denoising_loss(denoiser, y, sigma, noise, condition=None, weighting="edm", sigma_data=1.0):
    """Weighted per-image pixel MSE of ``D(y + n | c; sigma)`` against ``y``, averaged over the batch.

    Works for numpy denoisers and for torch modules (then differentiable).
    ``sigma`` is a scalar or one value per image.
    """
    if (sigma <= 0).any() if hasattr(sigma, "any") else sigma <= 0:
        raise ValueError("denoising loss needs sigma > 0")
    d = denoiser(y + noise, sigma, condition)
    per_image = ((d - y) ** 2).mean(axis=tuple(range(1, y.ndim)))
    return (loss_weight(sigma, weighting, sigma_data) * per_image).mean()


def corrdiff_target(y, baseline_pred):
    """Residual the correction diffusion learns: truth minus baseline."""
    y, baseline_pred = np.asarray(y), np.asarray(baseline_pred)
    if y.shape != baseline_pred.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {baseline_pred.shape}")
    return y - baseline_pred


class EarlyStopping:
    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; True once ``patience`` epochs passed without improvement."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def block_split(n: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous split: the trailing block of samples is validation (no temporal leakage)."""
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"cannot split {n} samples with val_fraction {val_fraction}")
    idx = np.arange(n)
    return idx[: n - n_val], idx[n - n_val:]


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _steps(n_train, cfg, rng):
    """Yield index groups of ``batch_size * accumulation`` for one epoch (partial tail dropped)."""
    per_step = cfg.batch_size * cfg.accumulation
    order = rng.permutation(n_train)
    for start in range(0, n_train - per_step + 1, per_step):
        yield order[start:start + per_step]


def diffusion_step(model, optimizer, y, cond, sigma, noise, cfg: TrainConfig) -> float:
    """One optimizer step over ``accumulation`` equal sub-batches; returns the mean loss."""
    optimizer.zero_grad()
    k = cfg.accumulation
    total = 0.0
    for chunk in np.array_split(np.arange(len(y)), k):
        c = None if cond is None else _t(cond[chunk])
        loss = denoising_loss(model, _t(y[chunk]), torch.from_numpy(sigma[chunk]).float(), _t(noise[chunk]), c,
                              cfg.weighting, cfg.sigma_data)
        (loss / k).backward()
        total += loss.item() / k
    optimizer.step()
    return total


def _val_loss_diffusion(model, y, cond, cfg):
    rng = np.random.default_rng([cfg.seed, 7919])
    losses = []
    with torch.no_grad():
        for _ in range(cfg.val_draws):
            sigma = sample_train_sigma(cfg.train_sigma, rng, size=len(y))
            noise = rng.standard_normal(y.shape) * sigma.reshape(-1, 1, 1, 1)
            for chunk in np.array_split(np.arange(len(y)), max(1, len(y) // 64)):
                c = None if cond is None else _t(cond[chunk])
                loss = denoising_loss(model, _t(y[chunk]), torch.from_numpy(sigma[chunk]).float(),
                                      _t(noise[chunk]), c, cfg.weighting, cfg.sigma_data)
                losses.append(loss.item() * len(chunk))
    return float(np.sum(losses) / (cfg.val_draws * len(y)))


def make_denoiser(task: TrainTask, spec_overrides: dict | None = None, sigma_data=1.0, seed=0) -> PrecondNet:
    kw = dict(in_channels=task.target_channels + task.condition_channels, out_channels=task.target_channels,
              seed=seed)
    kw.update(spec_overrides or {})
    return PrecondNet(ConvNet(ConvNetSpec(**kw)), sigma_data)


def _fit(model, cfg, n, step_fn, val_fn, label):
    """Shared epoch loop with early stopping, best-state restore and divergence guard."""
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    history, best_state, steps = [], copy.deepcopy(model.state_dict()), 0
    last_good = copy.deepcopy(model.state_dict())
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        losses = []
        for idx in _steps(n, cfg, rng):
            try:
                loss = step_fn(opt, idx, rng)
            except NonFiniteGradientError as err:
                raise TrainingDiverged(f"{label}: {err} at epoch {epoch}", last_good) from err
            if not math.isfinite(loss):
                raise TrainingDiverged(f"{label}: non-finite loss at epoch {epoch}", last_good)
            losses.append(loss)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        last_good = copy.deepcopy(model.state_dict())
        model.eval()
        val = val_fn()
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else math.nan,
                        "val_loss": val})
        log.info("%s epoch %d train %.5f val %.5f", label, epoch, history[-1]["train_loss"], val)
        if val <= stopper.best:
            best_state = copy.deepcopy(model.state_dict())
        if stopper.step(val):
            stopped = True
            break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    model.load_state_dict(best_state)
    model.eval()
    return history, stopped


def train_diffusion(targets, conditions, task: TrainTask, cfg: TrainConfig, model: PrecondNet | None = None,
                    spec_overrides: dict | None = None) -> TrainResult:
    """Train a preconditioned denoiser on normalized ``targets`` (N, C, H, W).

    ``conditions`` is ``(N, k, H, W)`` channel-stacked condition frames or None.
    Per step: draw a noise level per image, noise, evaluate the wrapped
    denoiser, accumulate the weighted loss over sub-batches, then update.
    """
    targets = np.asarray(targets, dtype=np.float32)
    if task.kind == "unconditional":
        conditions = None
    elif conditions is None or conditions.shape[1] != task.condition_channels:
        raise ValueError(f"task needs {task.condition_channels} condition channels")
    if model is None:
        model = make_denoiser(task, spec_overrides, cfg.sigma_data, cfg.seed)
    tr, va = block_split(len(targets), cfg.val_fraction)
    y_tr, y_va = targets[tr], targets[va]
    c_tr = None if conditions is None else np.asarray(conditions[tr], dtype=np.float32)
    c_va = None if conditions is None else np.asarray(conditions[va], dtype=np.float32)

    def step_fn(opt, idx, rng):
        sigma = sample_train_sigma(cfg.train_sigma, rng, size=len(idx))
        noise = (rng.standard_normal((len(idx), *y_tr.shape[1:])) * sigma.reshape(-1, 1, 1, 1))
        return diffusion_step(model, opt, y_tr[idx], None if c_tr is None else c_tr[idx], sigma, noise, cfg)

    history, stopped = _fit(model, cfg, len(tr), step_fn, lambda: _val_loss_diffusion(model, y_va, c_va, cfg),
                            f"diffusion[{task.kind}]")
    return TrainResult(model, history, stopped)


def train_baseline(conditions, targets, cfg: TrainConfig, spec_overrides: dict | None = None,
                   model: ConvNet | None = None) -> TrainResult:
    """Deterministic regressor ``y ~ G(c)`` trained with plain MSE and early stopping."""
    conditions = np.asarray(conditions, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    if model is None:
        kw = dict(in_channels=conditions.shape[1], out_channels=targets.shape[1], seed=cfg.seed,
                  noise_embedding=False)
        kw.update(spec_overrides or {})
        model = ConvNet(ConvNetSpec(**kw))
    tr, va = block_split(len(targets), cfg.val_fraction)
    c_tr, y_tr = conditions[tr], targets[tr]

    def step_fn(opt, idx, rng):
        opt.zero_grad()
        total = 0.0
        for chunk in np.array_split(idx, cfg.accumulation):
            loss = ((model(_t(c_tr[chunk])) - _t(y_tr[chunk])) ** 2).mean()
            (loss / cfg.accumulation).backward()
            total += loss.item() / cfg.accumulation
        opt.step()
        return total

    def val_fn():
        with torch.no_grad():
            pred = model(_t(conditions[va]))
            return float(((pred - _t(targets[va])) ** 2).mean())

    history, stopped = _fit(model, cfg, len(tr), step_fn, val_fn, "baseline")
    return TrainResult(model, history, stopped)


def predict_baseline(model: ConvNet, conditions, batch=64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(conditions), batch):
            out.append(model(_t(conditions[start:start + batch])).numpy())
    return np.concatenate(out)


def prepare_corrdiff(baseline: ConvNet, conditions, targets):
    """Residual targets (re-normalized with their own stats) and conditions with the baseline channel appended."""
    pred = predict_baseline(baseline, conditions)
    residual = corrdiff_target(targets, pred).astype(np.float64)
    stats = NormStats(float(residual.mean()), float(residual.std()))
    res_norm = ((residual - stats.mean) / stats.std).astype(np.float32)
    cond = np.concatenate([conditions, pred], axis=1).astype(np.float32)
    return res_norm, cond, stats
