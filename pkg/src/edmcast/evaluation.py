"""Verification: pixel metrics, spread-skill, radial power spectra and the generation grid search."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from .sampler import SampleConfig

DEFAULT_SAMPLER_GRID = {
    "num_steps": [9, 18, 36, 72],
    "s_churn": [0.0, 0.2, 0.41421356237],
    "sigma_max": [20.0, 80.0, 140.0],
    "rho": [4.0, 7.0, 10.0],
}


@dataclass(frozen=True)
class PixelMetrics:
    me: float
    mae: float
    rmse: float
    n: int
    m: int

    def __post_init__(self):
        tol = 1e-9 * max(1.0, self.rmse)
        if not (self.mae + tol >= abs(self.me) and self.rmse + tol >= self.mae >= 0):
            raise AssertionError(f"metric ordering violated: {self}")


def pixel_metrics(truth, forecast) -> PixelMetrics:
    """ME and MAE as truth minus forecast; RMSE pools the squared error over the whole set before the root."""
    y = np.asarray(truth, dtype=np.float64)
    yhat = np.asarray(forecast, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"truth {y.shape} and forecast {yhat.shape} are not aligned")
    if y.ndim < 2:
        raise ValueError("need (n, ...) arrays")
    err = (y - yhat).reshape(len(y), -1)
    return PixelMetrics(
        me=float(err.mean(axis=1).mean()),
        mae=float(np.abs(err).mean(axis=1).mean()),
        rmse=float(np.sqrt((err**2).mean(axis=1).mean())),
        n=err.shape[0],
        m=err.shape[1],
    )


def metrics_by_lead(truth, forecast) -> list[PixelMetrics]:
    """``truth``/``forecast`` shaped (n, leads, ...)."""
    truth, forecast = np.asarray(truth), np.asarray(forecast)
    return [pixel_metrics(truth[:, k], forecast[:, k]) for k in range(truth.shape[1])]


def write_metrics_csv(path, rows: dict[str, list[PixelMetrics]], lead_minutes: float = 10.0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "lead_min", "me", "mae", "rmse"])
        for model, per_lead in rows.items():
            for k, pm in enumerate(per_lead, start=1):
                w.writerow([model, k * lead_minutes, pm.me, pm.mae, pm.rmse])


# -- spread-skill

@dataclass
class SpreadSkillCurve:
    bin_spread: np.ndarray
    bin_skill: np.ndarray
    bin_count: np.ndarray
    ratio: float
    spread: np.ndarray
    skill: np.ndarray


def spread_skill(members, truth, small_ensemble_factor: bool = True, bins: int = 10,
                 bin_by: str = "skill") -> SpreadSkillCurve:
    """Per-sample spread (root-mean member variance) vs skill (RMSE of the ensemble mean).

    ``members`` is (n, M, ...), ``truth`` (n, ...). Member variance uses the
    unbiased M - 1 divisor; the optional sqrt((M + 1) / M) factor accounts for
    the finite ensemble. Samples are binned by quantiles of ``bin_by``.
    """
    ens = np.asarray(members, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    n, m = ens.shape[:2]
    if m < 2:
        raise ValueError("spread-skill needs at least 2 members")
    if ens.shape[2:] != y.shape[1:] or len(y) != n:
        raise ValueError("members and truth are not aligned")
    ens = ens.reshape(n, m, -1)
    y = y.reshape(n, -1)
    # deviations from the first member keep identical members at exactly zero variance
    dev = ens - ens[:, :1]
    spread = np.sqrt(dev.var(axis=1, ddof=1).mean(axis=1))
    if small_ensemble_factor:
        spread = spread * math.sqrt((m + 1) / m)
    skill = np.sqrt(((ens.mean(axis=1) - y) ** 2).mean(axis=1))
    key = {"skill": skill, "spread": spread}[bin_by]
    edges = np.quantile(key, np.linspace(0, 1, bins + 1))
    which = np.clip(np.searchsorted(edges, key, side="right") - 1, 0, bins - 1)
    count = np.bincount(which, minlength=bins)
    with np.errstate(invalid="ignore"):
        b_spread = np.bincount(which, spread, bins) / count
        b_skill = np.bincount(which, skill, bins) / count
    ratio = float(spread.mean() / skill.mean()) if skill.mean() > 0 else math.inf * (spread.mean() > 0)
    if math.isnan(ratio):
        ratio = 0.0
    return SpreadSkillCurve(b_spread, b_skill, count, ratio, spread, skill)


def write_spread_skill_csv(path, curves: dict[str, SpreadSkillCurve]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "bin", "count", "mean_spread", "mean_skill", "ratio"])
        for model, c in curves.items():
            for b in range(len(c.bin_count)):
                w.writerow([model, b, int(c.bin_count[b]), c.bin_spread[b], c.bin_skill[b], c.ratio])


# -- radial power spectra

@dataclass
class SpectrumReport:
    wavenumber: np.ndarray  # integer radial wavenumber k (cycles per domain)
    wavelength_km: np.ndarray  # domain size / k
    power: np.ndarray  # binned power, or power ratio for fractional_change
    discarded_power: float = 0.0  # power beyond the Nyquist circle (corners)
    variance: float = 0.0


def _square(f):
    a = np.asarray(f, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"radial spectrum needs a square single-channel field, got {np.shape(f)}")
    return a


def _radial_bins(n):
    k = np.fft.fftfreq(n) * n
    return np.rint(np.hypot(k[:, None], k[None, :])).astype(int)


def radial_spectrum(f, pixel_km: float = 2.0, window: str | None = None) -> SpectrumReport:
    """Radially averaged 2-D Fourier power binned by integer wavenumber 1..N/2.

    Power is normalized so that the sum over *all* frequencies equals the
    pixel variance; what falls outside the Nyquist circle is reported as
    ``discarded_power``.
    """
    a = _square(f)
    n = a.shape[0]
    a = a - a.mean()
    if window == "hann":
        w = np.hanning(n)
        a = a * np.outer(w, w)
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    p = np.abs(np.fft.fft2(a)) ** 2 / n**4
    rk = _radial_bins(n)
    kmax = n // 2
    power = np.bincount(rk.ravel(), p.ravel(), minlength=rk.max() + 1)
    ks = np.arange(1, kmax + 1)
    return SpectrumReport(ks, n * pixel_km / ks, power[1:kmax + 1], float(power[kmax + 1:].sum()), float(a.var()))


def mean_spectrum(fields, pixel_km: float = 2.0, window: str | None = None) -> SpectrumReport:
    reps = [radial_spectrum(f, pixel_km, window) for f in fields]
    return SpectrumReport(reps[0].wavenumber, reps[0].wavelength_km, np.mean([r.power for r in reps], axis=0),
                          float(np.mean([r.discarded_power for r in reps])), float(np.mean([r.variance for r in reps])))


def fractional_change(forecast, truth, pixel_km: float = 2.0, window: str | None = None) -> SpectrumReport:
    """Forecast power divided by truth power per wavelength bin (1 = unchanged).

    Accepts single fields or sets of fields; sets are averaged before the ratio.
    """
    many = np.ndim(truth) >= 3 and not (np.ndim(truth) == 3 and np.shape(truth)[0] == 1)
    ft = mean_spectrum(forecast, pixel_km, window) if many else radial_spectrum(forecast, pixel_km, window)
    tt = mean_spectrum(truth, pixel_km, window) if many else radial_spectrum(truth, pixel_km, window)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(tt.power > 0, ft.power / tt.power, np.where(ft.power > 0, np.inf, 1.0))
    return SpectrumReport(tt.wavenumber, tt.wavelength_km, ratio)


def write_spectrum_csv(path, reports: dict[str, SpectrumReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "wavenumber", "wavelength_km", "value"])
        for model, r in reports.items():
            for k, lam, v in zip(r.wavenumber, r.wavelength_km, r.power):
                w.writerow([model, int(k), lam, v])


def write_pgm(path, image, lo=None, hi=None):
    """8-bit binary grayscale PGM, linearly scaled to [lo, hi]."""
    a = _square(image) if np.ndim(image) != 2 else np.asarray(image, dtype=np.float64)
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    scaled = np.clip((a - lo) / max(hi - lo, 1e-12), 0, 1)
    data = np.rint(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# -- generation-hyperparameter grid search

def enumerate_grid(grids: dict[str, list]) -> list[dict]:
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("grid search needs a non-empty grid")
    keys = list(grids)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grids[k] for k in keys))]


def rank_table(rows: list[dict]) -> list[dict]:
    """Rank cells by RMSE rank + |ratio - 1| rank (ties share the minimum rank).

    Remaining ties go to fewer ``num_steps``, then the smallest parameter tuple,
    so the winner does not depend on row order.
    """
    if not rows:
        raise ValueError("empty table")
    rmse_rank = rankdata([r["rmse"] for r in rows], method="min")
    ratio_rank = rankdata([abs(r["ratio"] - 1) for r in rows], method="min")
    out = []
    for r, a, b in zip(rows, rmse_rank, ratio_rank):
        out.append({**r, "rmse_rank": int(a), "ratio_rank": int(b), "score": int(a + b)})

    def key(r):
        params = tuple(sorted((k, v) for k, v in r.items()
                              if k not in ("rmse", "ratio", "rmse_rank", "ratio_rank", "score")))
        return (r["score"], r.get("num_steps", 0), params)

    return sorted(out, key=key)


@dataclass
class GridSearchResult:
    table: list[dict]
    selected: SampleConfig

    def write_csv(self, path):
        keys = list(self.table[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.table)


def grid_search(evaluate: Callable[[SampleConfig], tuple[float, float]], grids: dict[str, list] = DEFAULT_SAMPLER_GRID,
                base: SampleConfig = SampleConfig()) -> GridSearchResult:
    """``evaluate(cfg) -> (rmse, spread_skill_ratio)`` on the validation set, for every grid cell."""
    rows = []
    for cell in enumerate_grid(grids):
        cfg = replace(base, **cell)
        rmse, ratio = evaluate(cfg)
        rows.append({**cell, "rmse": float(rmse), "ratio": float(ratio)})
    table = rank_table(rows)
    best = {k: table[0][k] for k in grids}
    return GridSearchResult(table, replace(base, **best))


def write_grid_csv(path: str | Path, result: GridSearchResult):
    result.write_csv(path)
