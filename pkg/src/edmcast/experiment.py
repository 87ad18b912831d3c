"""Scaled comparative experiment: persistence, baseline, Diff, CorrDiff and LDM on the blob world."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autoencoder import AESpec, evaluate_reconstruction, train_autoencoder
from .forecast import (
    BaselineForecaster, CorrDiffForecaster, DiffusionForecaster, LatentForecaster, Persistence, RolloutConfig,
    ensemble,
)
from .grid import Field, compute_stats
from .pipeline import encode_frames, normalized_pairs, to_kelvin, to_model_space
from .sampler import SampleConfig
from .toy_data import BlobWorldConfig, PatchFilter, make_split
from .training import TrainConfig, TrainTask, prepare_corrdiff, train_baseline, train_diffusion

log = logging.getLogger(__name__)


@dataclass
class ComparativeConfig:
    grid: int = 64
    n_train: int = 2000
    n_test: int = 8
    leads: int = 18
    seed: int = 0
    widths: tuple[int, ...] = (16, 32)
    depth: int = 1
    batch_size: int = 16
    lr: float = 2e-3
    baseline_epochs: int = 4
    diff_epochs: int = 6
    corrdiff_epochs: int = 4
    ae_epochs: int = 3
    ldm_epochs: int = 4
    patience: int = 10
    sample: SampleConfig = field(default_factory=lambda: SampleConfig(num_steps=18))
    members: int = 10
    members_secondary: int = 3  # CorrDiff and LDM ensembles
    models: tuple[str, ...] = ("baseline", "diff", "corrdiff", "ldm")


@dataclass
class ComparativeReport:
    rmse: dict[str, list[float]]  # model -> RMSE per lead (kelvin), member 0 for stochastic models
    ensmean_rmse: dict[str, list[float]]
    mean_member_rmse: dict[str, list[float]]
    finite: dict[str, bool]
    corrdiff_exact: bool | None
    timings: dict[str, float]
    extra: dict = field(default_factory=dict)

    def ordering_at(self, lead: int) -> list[tuple[str, float]]:
        return sorted(((m, r[lead - 1]) for m, r in self.rmse.items()), key=lambda t: t[1])


def _rmse_per_lead(truth, fc):
    err = np.asarray(fc, dtype=np.float64) - truth
    return np.sqrt((err**2).mean(axis=(0, 2, 3, 4))).tolist()


def run_comparative(cfg: ComparativeConfig = ComparativeConfig()) -> ComparativeReport:
    timings = {}
    t0 = time.perf_counter()
    world = BlobWorldConfig(grid=cfg.grid, seed=cfg.seed)
    filt = PatchFilter()
    train, _ = make_split(world, filt, cfg.n_train, "train", 3)
    test, _ = make_split(world, filt, cfg.n_test, "test", 2 + cfg.leads)
    stats = compute_stats([Field(train.reshape(-1, 1, cfg.grid, cfg.grid), "kelvin")])
    cond, tgt = normalized_pairs(train, stats)
    timings["data"] = time.perf_counter() - t0

    spec = {"widths": cfg.widths, "depth": cfg.depth}

    def tcfg(epochs):
        return TrainConfig(epochs=epochs, batch_size=cfg.batch_size, lr=cfg.lr, patience=cfg.patience,
                           seed=cfg.seed)

    init = to_model_space(test[:, :2, 0], stats)
    truth = test[:, 2:2 + cfg.leads].astype(np.float64)
    forecasters, members = {"persistence": Persistence()}, {"persistence": 1}
    extra = {}

    def timed(name, fn):
        start = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - start
        log.info("%s done in %.1fs", name, timings[name])
        return out

    baseline = None
    if {"baseline", "corrdiff"} & set(cfg.models):
        baseline = timed("train_baseline", lambda: train_baseline(cond, tgt, tcfg(cfg.baseline_epochs), spec)).model
        forecasters["baseline"], members["baseline"] = BaselineForecaster(baseline), 1
    if "diff" in cfg.models:
        res = timed("train_diff", lambda: train_diffusion(tgt, cond, TrainTask("conditional", 2, 1),
                                                          tcfg(cfg.diff_epochs), spec_overrides=spec))
        forecasters["diff"], members["diff"] = DiffusionForecaster(res.model, cfg.sample), cfg.members
        extra["diff_history"] = res.history
    if "corrdiff" in cfg.models:
        residual, cond3, rstats = prepare_corrdiff(baseline, cond, tgt)
        res = timed("train_corrdiff", lambda: train_diffusion(residual, cond3, TrainTask("corrdiff_residual", 3, 1),
                                                              tcfg(cfg.corrdiff_epochs), spec_overrides=spec))
        forecasters["corrdiff"] = CorrDiffForecaster(baseline, res.model, rstats, cfg.sample)
        members["corrdiff"] = cfg.members_secondary
    if "ldm" in cfg.models:
        frames = np.concatenate([cond[:, :1], tgt])
        ae, _ = timed("train_ae", lambda: train_autoencoder(frames, AESpec(seed=cfg.seed), tcfg(cfg.ae_epochs)))
        extra["ae_recon_kelvin"] = asdict(evaluate_reconstruction(ae, test[:, :3].reshape(-1, 1, cfg.grid, cfg.grid),
                                                                  stats))["rmse"]
        z_tgt, z_cond = ae.encode(tgt), encode_frames(ae, cond)
        res = timed("train_ldm", lambda: train_diffusion(z_tgt, z_cond,
                                                         TrainTask("conditional", z_cond.shape[1], z_tgt.shape[1]),
                                                         tcfg(cfg.ldm_epochs), spec_overrides=spec))
        forecasters["ldm"], members["ldm"] = LatentForecaster(res.model, ae, cfg.sample), cfg.members_secondary

    rmse, ensmean, mean_member, finite = {}, {}, {}, {}
    corrdiff_exact = None
    for name, model in forecasters.items():
        rcfg = RolloutConfig(leads=cfg.leads, members=members[name], base_seed=cfg.seed)
        try:
            ens = timed(f"rollout_{name}", lambda: ensemble(model, init, rcfg))
        except FloatingPointError as err:
            log.warning("%s rollout failed: %s", name, err)
            finite[name] = False
            continue
        fc = to_kelvin(ens.members, stats).astype(np.float64)
        finite[name] = bool(np.all(np.isfinite(fc)))
        rmse[name] = _rmse_per_lead(truth, fc[0])
        if members[name] > 1:
            ensmean[name] = _rmse_per_lead(truth, fc.mean(axis=0))
            per_member = np.array([_rmse_per_lead(truth, f) for f in fc])
            mean_member[name] = per_member.mean(axis=0).tolist()
        if name == "corrdiff":
            seed = 12345
            base, resid = model.components(init, seed)
            corrdiff_exact = bool(np.array_equal(model.step(init, seed), base + resid)
                                  and np.array_equal(base, BaselineForecaster(baseline).step(init, seed)))
    timings["total"] = time.perf_counter() - t0
    return ComparativeReport(rmse, ensmean, mean_member, finite, corrdiff_exact, timings, extra)


def format_report(rep: ComparativeReport) -> str:
    lines = ["model        " + " ".join(f"L{k:<6d}" for k in (1, 3, 6, 12, 18))]
    pick = [0, 2, 5, 11, 17]
    for name, r in rep.rmse.items():
        vals = [r[i] if i < len(r) else math.nan for i in pick]
        lines.append(f"{name:12s} " + " ".join(f"{v:7.3f}" for v in vals))
        if name in rep.ensmean_rmse:
            e = rep.ensmean_rmse[name]
            lines.append(f"{name + '_mean':12s} " + " ".join(f"{e[i] if i < len(e) else math.nan:7.3f}" for i in pick))
    lines.append("timings " + ", ".join(f"{k}={v:.0f}s" for k, v in rep.timings.items()))
    return "\n".join(lines)
