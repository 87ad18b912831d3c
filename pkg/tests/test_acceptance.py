"""Acceptance criteria 1-12, one test (and one PASS/FAIL line) each.

Criterion 8 trains every model on the 64x64 blob world and takes several
minutes on one CPU core.
"""

import math
import time

import numpy as np
import pytest
import torch
from scipy.special import logsumexp

from edmcast.autoencoder import AEModule, AESpec, IdentityAutoencoder, evaluate_reconstruction
from edmcast.evaluation import (
    DEFAULT_SAMPLER_GRID, enumerate_grid, fractional_change, pixel_metrics, radial_spectrum, rank_table, spread_skill,
)
from edmcast.experiment import ComparativeConfig, format_report, run_comparative
from edmcast.network import ConvNet, ConvNetSpec, get_param_vector, param_gradient, set_param_vector
from edmcast.precond import (
    GaussianMixturePrior, GaussianPrior, PrecondNet, c_in, c_noise, c_out, c_skip, score_from_denoiser,
)
from edmcast.sampler import SampleConfig, churn_inject, generate, generate_latent, solve_ode, stream_rngs
from edmcast.schedule import build_schedule
from edmcast.toy_data import BlobWorldConfig, generate_sequence
from edmcast.training import denoising_loss


def test_criterion_01_preconditioning_identities(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    sigma = np.exp(r.uniform(np.log(1e-3), np.log(200.0), 10_000))
    sd = np.exp(r.uniform(np.log(0.05), np.log(5.0), 10_000))
    e_out = np.max(np.abs(c_out(sigma, sd) - sigma * sd * c_in(sigma, sd)) / np.abs(c_out(sigma, sd)))
    e_skip = np.max(np.abs(c_skip(sigma, sd) - sd**2 * c_in(sigma, sd) ** 2) / np.abs(c_skip(sigma, sd)))
    exact = all(c_skip(s, s) == 0.5 for s in (0.1, 0.5, 1.0, 2.0, 3.7)) and c_noise(1.0) == 0.0
    elapsed = time.perf_counter() - t0
    ok = e_out <= 1e-12 and e_skip <= 1e-12 and exact and elapsed < 1.0
    criterion(1, "preconditioning identities", ok,
              f"max rel c_out {e_out:.1e}, c_skip {e_skip:.1e}, exact points {exact}, {elapsed:.2f}s")


def _log_p_fd_grad(weights, means, variances, x, sigma, h=1e-5):
    """Central difference of log p(x; sigma) written directly from the mixture density (scipy logsumexp)."""

    def log_p(v):
        s2 = np.asarray(variances) + sigma**2
        terms = np.log(weights) - 0.5 * np.log(2 * np.pi * s2) - (v - np.asarray(means)) ** 2 / (2 * s2)
        return logsumexp(terms)

    return (log_p(x + h) - log_p(x - h)) / (2 * h)


def test_criterion_02_score_denoiser_equivalence(criterion):
    t0 = time.perf_counter()
    cases = [([1.0], [0.4], [0.8]), ([0.35, 0.65], [-1.5, 2.0], [0.3, 0.6])]
    r = np.random.default_rng(2)
    worst = 0.0
    for w, mu, var in cases:
        prior = GaussianMixturePrior(w, mu, var)
        for _ in range(20):
            x, sigma = r.uniform(-4, 4), math.exp(r.uniform(math.log(0.05), math.log(10)))
            got = float(score_from_denoiser(prior, np.array([x]), sigma)[0])
            ref = _log_p_fd_grad(np.array(w), mu, var, x, sigma)
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-3))
    elapsed = time.perf_counter() - t0
    criterion(2, "score-denoiser equivalence", worst <= 1e-4 and elapsed < 5,
              f"max rel err {worst:.1e} over 2 priors x 20 points, {elapsed:.2f}s")


def test_criterion_03_distribution_recovery(criterion):
    t0 = time.perf_counter()
    n, s2 = 5000, 0.6
    yy, xx = np.mgrid[0:16, 0:16]
    mu = np.sin(2 * np.pi * xx / 16) * np.cos(2 * np.pi * yy / 8)  # spatial mean exactly zero
    prior = GaussianPrior(mu[None], s2)

    def run(second_order):
        cfg = SampleConfig(num_steps=36, seed=3, second_order=second_order)
        x = generate(prior, (n, 1, 16, 16), cfg, dtype=np.float64)
        se = math.sqrt(s2 / (n * 256))
        dev = x.mean() - mu.mean()
        var_ratio = float(x.var(axis=0, ddof=1).mean() / s2)
        z = (x.mean(axis=0)[0] - mu) / math.sqrt(s2 / n)
        return dev, se, var_ratio, float(np.sqrt(np.mean(z**2)))

    dev, se, ratio, z_rms = run(True)
    e_dev, _, e_ratio, e_z = run(False)

    # starting from N(0, sigma_max^2) instead of N(mu, ...) leaves a mean offset mu * g with
    # g = s / sqrt(s^2 + sigma_max^2); the zero start isolates it without sampling noise
    sig = SampleConfig(num_steps=36, second_order=True).schedule().sigmas
    offset = float(1.0 - solve_ode(np.zeros((1, 1)), sig, GaussianPrior(1.0, s2), second_order=True)[0, 0])
    predicted = math.sqrt(s2) / math.sqrt(s2 + 80.0**2)
    offset_ok = abs(offset / predicted - 1) < 0.02

    mix = GaussianMixturePrior([0.3, 0.7], [-2.0, 2.0], [0.25, 0.25])
    xs = generate(mix, (10_000, 1), SampleConfig(num_steps=36, seed=5), dtype=np.float64)[:, 0]
    w_neg = float(np.mean(xs < 0))
    elapsed = time.perf_counter() - t0
    ok = abs(dev) < 3 * se and abs(ratio - 1) < 0.05 and abs(w_neg - 0.3) < 0.02 and offset_ok and elapsed < 120
    criterion(3, "sampler distribution recovery", ok,
              f"Heun 36: mean dev {dev:+.1e} (3SE {3 * se:.1e}), var ratio {ratio:.3f}, pixel z rms {z_rms:.2f}; "
              f"Euler 36 (reported): var ratio {e_ratio:.3f}, z rms {e_z:.2f}; "
              f"zero-start mean offset {offset:.5f} vs analytic {predicted:.5f}; mixture weight {w_neg:.3f}; {elapsed:.0f}s")


def _endpoint_errors(steps, second_order):
    prior = GaussianPrior(0.0, 1.0)
    exact = 80.0 * math.sqrt((1 + 0.002**2) / (1 + 80.0**2))
    out = []
    for n in steps:
        sig = build_schedule(n, 80.0, 0.002, 7.0).sigmas[:-1]
        out.append(abs(solve_ode(np.array([[80.0]]), sig, prior, second_order=second_order)[0, 0] - exact))
    return np.array(out)


def test_criterion_04_convergence_order(criterion):
    t0 = time.perf_counter()
    steps = [32, 64, 128]
    e1 = _endpoint_errors(steps, False)
    e2 = _endpoint_errors(steps, True)
    r1, r2 = e1[:-1] / e1[1:], e2[:-1] / e2[1:]
    elapsed = time.perf_counter() - t0
    ok = np.all(np.abs(r1 / 2 - 1) <= 0.2) and np.all(np.abs(r2 / 4 - 1) <= 0.3) and elapsed < 60
    criterion(4, "ODE convergence order", bool(ok),
              f"Euler ratios {np.round(r1, 3).tolist()}, Heun ratios {np.round(r2, 3).tolist()} "
              f"for steps {steps}, {elapsed:.2f}s")


def test_criterion_05_churn_bookkeeping(criterion):
    t0 = time.perf_counter()
    sigma, gamma, s_noise = 2.3, 0.25, 1.07
    x = np.random.default_rng(0).standard_normal(100_000)
    xh, s_hat = churn_inject(x, sigma, gamma, s_noise, np.random.default_rng(1))
    rel = np.var(xh - x) / ((s_hat**2 - sigma**2) * s_noise**2) - 1

    prior = GaussianPrior(0.3, 0.7)
    cfg = SampleConfig(num_steps=20, s_churn=0.0, seed=9)
    init, churn = stream_rngs(9)
    a = generate(prior, (4, 1, 8, 8), cfg, init_rng=init, churn_rng=churn, dtype=np.float64)
    x0 = stream_rngs(9)[0].standard_normal((4, 1, 8, 8)) * cfg.sigma_max
    b = solve_ode(x0, cfg.schedule().sigmas, prior)
    c = generate(prior, (4, 1, 8, 8), cfg, init_rng=stream_rngs(9)[0], churn_rng=np.random.default_rng(77),
                 dtype=np.float64)
    identical = np.array_equal(a, b) and np.array_equal(a, c)
    elapsed = time.perf_counter() - t0
    criterion(5, "churn bookkeeping", abs(rel) < 0.02 and identical and elapsed < 10,
              f"variance rel err {rel:+.4f}, gamma=0 bit-identical to deterministic ODE: {identical}, {elapsed:.2f}s")


def _fd_param_check(module, loss_fn, n_per_tensor=4, h=1e-4):
    """Autograd vs central differences on a few entries of every parameter tensor (float64)."""
    module = module.double()
    analytic = param_gradient(module, loss_fn())
    theta = get_param_vector(module).astype(np.float64)
    r = np.random.default_rng(0)
    worst, offset = 0.0, 0
    for _, p in module.named_parameters():
        idx = offset + r.choice(p.numel(), size=min(n_per_tensor, p.numel()), replace=False)
        offset += p.numel()
        for i in idx:
            vals = []
            for sgn in (1, -1):
                t = theta.copy()
                t[i] += sgn * h
                set_param_vector(module, t)
                with torch.no_grad():
                    vals.append(float(loss_fn()))
            fd = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-6))
    set_param_vector(module, theta)
    return worst


def test_criterion_06_gradient_correctness(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(6)
    x = torch.as_tensor(r.standard_normal((2, 1, 16, 16)))
    cond = torch.as_tensor(r.standard_normal((2, 2, 16, 16)))
    w_out = torch.as_tensor(r.standard_normal((2, 1, 16, 16)))
    worst = {}
    for act in ("silu", "tanh", "gelu"):
        net = ConvNet(ConvNetSpec(3, 1, (3, 4, 5), depth=2, activation=act, embed_hidden=4, seed=1))
        pre = PrecondNet(net, 0.5).double()
        sigma = torch.tensor([0.7, 3.0], dtype=torch.float64)
        worst[f"unet-{act}"] = _fd_param_check(pre, lambda: (pre(x, sigma, cond) * w_out).sum())
    ae = AEModule(AESpec(latent_channels=2, compression=4, width=3, seed=2)).double()
    worst["autoencoder"] = _fd_param_check(ae, lambda: (ae(x)[0] * w_out).sum())
    lin = AEModule(AESpec(latent_channels=2, compression=2, linear=True, seed=3)).double()
    worst["linear-ae"] = _fd_param_check(lin, lambda: (lin(x)[0] * w_out).sum())
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 30
    criterion(6, "gradient correctness", ok,
              ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


def test_criterion_07_training_floor(criterion):
    t0 = time.perf_counter()
    s2, n, m = 0.8, 20_000, 8
    prior = GaussianPrior(0.0, s2)
    r = np.random.default_rng(7)
    details, ok = [], True
    for sigma in (0.1, 1.0, 5.0):
        y = r.standard_normal((n, m)) * math.sqrt(s2)
        noise = r.standard_normal((n, m)) * sigma
        per_image = ((prior(y + noise, sigma) - y) ** 2).mean(axis=1)
        batch_loss = denoising_loss(prior, y, sigma, noise, weighting="uniform")
        floor = s2 * sigma**2 / (s2 + sigma**2)
        se = per_image.std(ddof=1) / math.sqrt(n)
        ok &= abs(batch_loss - floor) < 3 * se and np.isclose(batch_loss, per_image.mean(), rtol=1e-12)
        details.append(f"sigma {sigma}: {batch_loss:.5f} vs {floor:.5f} ({(batch_loss - floor) / se:+.2f} SE)")
    elapsed = time.perf_counter() - t0
    criterion(7, "training floor", bool(ok) and elapsed < 30, "; ".join(details) + f", {elapsed:.1f}s")


@pytest.fixture(scope="module")
def comparative():
    return run_comparative(ComparativeConfig())


def test_criterion_08_scaled_comparative(criterion, comparative):
    rep = comparative
    print(format_report(rep))
    train_s = sum(v for k, v in rep.timings.items() if k.startswith("train_"))
    a = rep.rmse["diff"][0] < rep.rmse["persistence"][0]
    b = all(e <= m + 1e-9 for e, m in zip(rep.ensmean_rmse["diff"], rep.mean_member_rmse["diff"]))
    b_single = sum(e <= s for e, s in zip(rep.ensmean_rmse["diff"], rep.rmse["diff"]))
    c = rep.corrdiff_exact is True
    d = set(rep.finite) == {"persistence", "baseline", "diff", "corrdiff", "ldm"} and all(rep.finite.values())
    ok = a and b and c and d and train_s <= 1800
    order = " < ".join(f"{m} {v:.2f}" for m, v in rep.ordering_at(1))
    order18 = " < ".join(f"{m} {v:.2f}" for m, v in rep.ordering_at(18))
    criterion(8, "scaled comparative experiment", ok,
              f"(a) diff L1 {rep.rmse['diff'][0]:.3f} K vs persistence {rep.rmse['persistence'][0]:.3f} K; "
              f"(b) ens-mean <= mean member RMSE at all 18 leads: {b} (<= member 0 at {b_single}/18); "
              f"(c) corrdiff exact: {c}; (d) finite: {d}; training {train_s:.0f}s; "
              f"reported L1 order: {order}; L18 order: {order18}")


def test_criterion_09_metric_conventions(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(9)
    truth = r.uniform(200, 300, (6, 1, 8, 8))
    pm = pixel_metrics(truth, truth + 2.0)
    sign_ok = math.isclose(pm.me, -2, abs_tol=1e-9) and math.isclose(pm.mae, 2, abs_tol=1e-9) \
        and math.isclose(pm.rmse, 2, abs_tol=1e-9)
    zeros = np.zeros((2, 1, 2, 2))
    pooled = pixel_metrics(zeros, np.stack([zeros[0], zeros[0] + 2])).rmse

    n, m, p = 5000, 10, 64
    signal = r.standard_normal((n, p))
    t = signal + r.standard_normal((n, p))
    ens = signal[:, None] + r.standard_normal((n, m, p))
    ratio = spread_skill(ens, t).ratio
    elapsed = time.perf_counter() - t0
    ok = sign_ok and math.isclose(pooled, math.sqrt(2), rel_tol=1e-12) and abs(ratio - 1) <= 0.05 and elapsed < 10
    criterion(9, "metric conventions", ok,
              f"+2K -> ME {pm.me:+.3f} MAE {pm.mae:.3f} RMSE {pm.rmse:.3f}; pooled {{0,2}} -> {pooled:.6f}; "
              f"calibrated spread-skill {ratio:.4f}")


def test_criterion_10_spectra(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(10)
    f = r.standard_normal((64, 64))
    same = bool(np.all(fractional_change(f, f).power == 1))

    truth = r.standard_normal((40, 64, 64))
    blur = sum(np.roll(truth, (i, j), axis=(1, 2)) for i in (-1, 0, 1) for j in (-1, 0, 1)) / 9
    fc = fractional_change(blur, truth)
    short = fc.wavelength_km / 2 < 6
    blur_ok = bool(np.all(fc.power[short] < 1)) and abs(fc.power[0] - 1) < 0.05

    # binned power covers k <= N/2; corner modes beyond the Nyquist circle are reported separately
    world = BlobWorldConfig(grid=64, seed=10)
    fields = {"blob frame": generate_sequence(world, 3)[0, 0],
              "cosine": 280 + 5 * np.cos(2 * np.pi * np.arange(64) / 16)[None, :] * np.ones((64, 1))}
    worst, exact = 0.0, 0.0
    for field in fields.values():
        rep = radial_spectrum(field)
        worst = max(worst, abs(rep.power.sum() - rep.variance) / rep.variance)
        exact = max(exact, abs(rep.power.sum() + rep.discarded_power - rep.variance) / rep.variance)
    noisy = radial_spectrum(blur[0])
    corner_share = noisy.discarded_power / noisy.variance
    elapsed = time.perf_counter() - t0
    ok = same and blur_ok and worst <= 0.01 and exact <= 1e-10 and elapsed < 10
    criterion(10, "spectra", ok,
              f"identity ratio 1: {same}; blur short-wave max ratio {fc.power[short].max():.3f}, "
              f"longest-wave {fc.power[0]:.3f}; Parseval binned worst {worst:.2e} (blob, cosine), "
              f"with corners {exact:.1e}; blurred-noise corner share {corner_share:.3f} (reported)")


def test_criterion_11_latent_transparency(criterion):
    t0 = time.perf_counter()
    prior = GaussianPrior(0.0, 1.0)
    den = lambda x, s, c: prior(x, s) + 0.1 * c[:, :1]  # noqa: E731
    cond = np.random.default_rng(11).standard_normal((3, 2, 16, 16)).astype(np.float32)
    same = True
    for churn in (0.0, 0.2):
        cfg = SampleConfig(num_steps=18, s_churn=churn, seed=11)
        a = generate(den, (3, 1, 16, 16), cfg, cond)
        b = generate_latent(den, IdentityAutoencoder(1), (3, 1, 16, 16), cfg, cond)
        same &= np.array_equal(a, b)
    kelvin = np.random.default_rng(12).uniform(200, 300, (20, 1, 16, 16))
    rep = evaluate_reconstruction(IdentityAutoencoder(1), kelvin)
    zero = rep.bias == 0 and rep.mae == 0 and rep.rmse == 0 and not rep.worst_pixel.any()
    elapsed = time.perf_counter() - t0
    criterion(11, "latent transparency", bool(same) and zero and elapsed < 30,
              f"latent == plain bit-exact: {bool(same)}; identity report zero: {zero}")


def test_criterion_12_grid_search(criterion):
    t0 = time.perf_counter()
    cells = enumerate_grid(DEFAULT_SAMPLER_GRID)
    r = np.random.default_rng(12)
    invariant = True
    for _ in range(50):
        rows = [{**c, "rmse": float(r.integers(0, 6)), "ratio": float(r.integers(0, 5)) / 4} for c in cells]
        best = rank_table(rows)[0]
        for _ in range(5):
            perm = r.permutation(len(rows))
            invariant &= rank_table([rows[i] for i in perm])[0] == best
    elapsed = time.perf_counter() - t0
    ok = len(cells) == 108 and len({tuple(c.values()) for c in cells}) == 108 and invariant and elapsed < 5
    criterion(12, "grid search", ok,
              f"{len(cells)} cells; selection invariant over 250 permutations of 50 tied tables: {invariant}")
