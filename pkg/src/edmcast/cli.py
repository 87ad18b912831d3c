"""``edmcast`` command line: make-data, train, sample, rollout, evaluate, evaluate-ae, gridsearch.

Settings resolve as defaults < config file < ``EDM_*`` environment < flags.
The config file is ``key = value`` lines under ``[common]`` or a
``[<subcommand>]`` section; a resolved ``config.json`` from an earlier run is
accepted too. Every run writes ``config.json`` and ``run.json`` (path, size
and sha256 of each output) into ``--out``.

Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import pipeline
from .autoencoder import AESpec, IdentityAutoencoder, evaluate_reconstruction, load_autoencoder, save_autoencoder
from .autoencoder import train_autoencoder, write_recon_csv
from .evaluation import (
    DEFAULT_SAMPLER_GRID, grid_search, metrics_by_lead, pixel_metrics, fractional_change, spread_skill, write_metrics_csv,
    write_pgm, write_spectrum_csv, write_spread_skill_csv,
)
from .forecast import RolloutConfig, config_hash, ensemble, member_seed
from .grid import ContractError, NormStats, TensorFormatError, read_tensor_file, write_tensor_file
from .network import save_checkpoint
from .precond import NetDenoiser
from .sampler import SampleConfig, generate, generate_latent, stream_rngs
from .schedule import TrainSigmaDist
from .toy_data import BlobWorldConfig, PatchFilter, build_dataset
from .training import TrainConfig, TrainTask, prepare_corrdiff, train_baseline, train_diffusion, write_loss_csv

log = logging.getLogger("edmcast")

ENV_PREFIX = "EDM_"


class UsageError(Exception):
    pass


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_float(v):
    return None if v is None or str(v).strip().lower() in ("", "none") else float(v)


def _ints(v):
    return [int(x) for x in str(v).split(",") if x.strip()] if not isinstance(v, list) else [int(x) for x in v]


def _floats(v):
    return [float(x) for x in str(v).split(",") if x.strip()] if not isinstance(v, list) else [float(x) for x in v]


# (name, type, default, help)
COMMON = [
    ("out", str, "out", "output directory; every artifact is written here"),
    ("threads", int, 1, "worker threads for torch and ensemble members"),
    ("seed", int, 0, "base seed"),
    ("log_level", str, "warning", "logging level"),
]

SAMPLER = [
    ("num_steps", int, 36, "sampling steps"),
    ("sigma_max", float, 80.0, "initial noise level"),
    ("sigma_min", float, 0.002, "last nonzero noise level"),
    ("rho", float, 7.0, "schedule curvature"),
    ("s_churn", float, 0.0, "effective per-step churn gamma (<= sqrt(2) - 1)"),
    ("s_churn_total", _opt_float, None, "raw churn total; divided by num_steps, overrides --s-churn"),
    ("s_noise", float, 1.0, "scale of re-injected noise"),
    ("s_tmin", float, 0.0, "churn active for sigma >= s_tmin"),
    ("s_tmax", float, math.inf, "churn active for sigma <= s_tmax"),
    ("second_order", _bool, False, "apply the Heun correction"),
]

COMMANDS = {
    "make-data": [
        ("grid", int, 64, "grid size in pixels"),
        ("train", int, 2000, "training sequences"),
        ("val", int, 200, "validation sequences"),
        ("test", int, 200, "test sequences"),
        ("length", int, 3, "frames per sequence (2 conditions + targets)"),
        ("velocity", str, "uniform", "uniform | rotational"),
        ("spawn_rate", float, 0.05, "expected new blobs per frame"),
        ("min_cloud_fraction", float, 0.10, "patch filter: minimum cold fraction"),
        ("cloud_threshold", float, 273.0, "patch filter: cold threshold in kelvin"),
    ],
    "train": [
        ("task", str, "cond", "uncond | cond | corrdiff | baseline | ae | ldm"),
        ("data", str, None, "dataset directory from make-data"),
        ("epochs", int, 10, "max epochs"),
        ("batch_size", int, 16, "images per sub-batch"),
        ("accumulation", int, 1, "sub-batches per optimizer step"),
        ("lr", float, 1e-3, "Adam learning rate"),
        ("weighting", str, "edm", "edm | inverse_sigma | uniform"),
        ("patience", int, 10, "early-stopping patience in epochs"),
        ("val_fraction", float, 0.2, "trailing share of training pairs held out"),
        ("max_steps", int, 0, "stop after this many optimizer steps (0 = no cap)"),
        ("widths", _ints, [16, 32], "channel widths per level"),
        ("depth", int, 1, "down/up levels (0-2)"),
        ("activation", str, "silu", "silu | tanh | gelu"),
        ("sigma_data", float, 1.0, "data standard deviation in normalized units"),
        ("train_sigma_loc", float, -1.2, "log-normal location of training sigma"),
        ("train_sigma_scale", float, 1.2, "log-normal scale of training sigma"),
        ("baseline", str, "", "baseline checkpoint (corrdiff)"),
        ("autoencoder", str, "", "autoencoder checkpoint (ldm)"),
        ("latent_channels", int, 4, "autoencoder latent channels"),
        ("compression", int, 2, "autoencoder spatial compression"),
        ("ae_width", int, 16, "autoencoder hidden width"),
    ],
    "sample": SAMPLER + [
        ("checkpoint", str, None, "diffusion checkpoint"),
        ("condition", str, "", "EDMT condition frames in kelvin, (B, window, H, W) or (window, H, W)"),
        ("batch", int, 1, "samples per member for unconditional models"),
        ("members", int, 1, "independent draws per condition"),
        ("trajectory", _ints, [], "pixel indices to trace into trajectory.csv"),
    ],
    "rollout": SAMPLER + [
        ("model", str, None, "checkpoint path or 'persistence'"),
        ("init", str, None, "EDMT file: (window, H, W), (B, window, H, W) or sequences (N, L, H, W)"),
        ("init_index", int, 0, "which initialization in --init"),
        ("leads", int, 18, "autoregressive steps"),
        ("members", int, 10, "ensemble members"),
        ("clamp", _bool, False, "clamp re-entering frames to the training range"),
    ],
    "evaluate": SAMPLER + [
        ("data", str, None, "dataset directory"),
        ("split", str, "test", "split to verify on"),
        ("models", str, "persistence", "comma list of name=checkpoint, or 'persistence'"),
        ("n_init", int, 0, "initializations to use (0 = all)"),
        ("leads", int, 18, "lead steps (capped by sequence length)"),
        ("members", int, 10, "ensemble members for stochastic models"),
        ("spectrum_lead", int, 1, "lead whose spectra are compared"),
        ("pixel_km", float, 2.0, "pixel size for wavelengths"),
        ("pgm", _bool, True, "dump grayscale panels"),
    ],
    "evaluate-ae": [
        ("data", str, None, "dataset directory"),
        ("split", str, "test", "split to reconstruct"),
        ("autoencoders", str, "identity", "comma list of name=checkpoint, or 'identity'"),
    ],
    "gridsearch": SAMPLER + [
        ("model", str, None, "checkpoint to tune"),
        ("data", str, None, "dataset directory"),
        ("split", str, "val", "split to score on"),
        ("n_init", int, 16, "condition windows scored per cell"),
        ("members", int, 10, "ensemble members per window"),
        ("grid_num_steps", _ints, DEFAULT_SAMPLER_GRID["num_steps"], "num_steps values"),
        ("grid_s_churn", _floats, DEFAULT_SAMPLER_GRID["s_churn"], "per-step churn values"),
        ("grid_sigma_max", _floats, DEFAULT_SAMPLER_GRID["sigma_max"], "sigma_max values"),
        ("grid_rho", _floats, DEFAULT_SAMPLER_GRID["rho"], "rho values"),
    ],
}

REQUIRED = {"train": ["data"], "sample": ["checkpoint"], "rollout": ["model", "init"], "evaluate": ["data"],
            "evaluate-ae": ["data"], "gridsearch": ["model", "data"]}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _options(command):
    return COMMON + COMMANDS[command]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edmcast", description="EDM diffusion nowcasting toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"{name} subcommand")
        p.add_argument("--config", default=None, help="key = value config file (or a resolved config.json)")
        for opt, _, default, help_ in _options(name):
            p.add_argument("--" + opt.replace("_", "-"), dest=opt, default=None, metavar="V",
                           help=f"{help_} (default: {default})")
    return parser


def _read_config_file(path, command):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    if path.suffix == ".json":
        d = json.loads(path.read_text(encoding="utf-8"))
        d = d.get("config", d)
        return {k: v for k, v in d.items() if k != "command"}
    cp = configparser.ConfigParser(interpolation=None, default_section="common")
    try:
        cp.read_string(path.read_text(encoding="utf-8"))
    except configparser.Error as err:
        raise UsageError(f"cannot parse {path}: {err}") from None
    values = dict(cp.defaults())
    if cp.has_section(command):
        values.update({k: cp.get(command, k) for k in cp.options(command)})
    return {k.replace("-", "_"): v for k, v in values.items()}


def resolve_config(command, args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    opts = {name: (typ, default) for name, typ, default, _ in _options(command)}
    layers = []
    if getattr(args, "config", None):
        layers.append(("config file", _read_config_file(args.config, command)))
    layers.append(("environment", {k[len(ENV_PREFIX):].lower(): v for k, v in environ.items()
                                   if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):].lower() in opts}))
    layers.append(("flags", {k: v for k, v in vars(args).items() if k in opts and v is not None}))
    resolved = {name: default for name, (_, default) in opts.items()}
    for source, values in layers:
        for key, raw in values.items():
            if key not in opts:
                raise UsageError(f"unknown setting {key!r} in {source}")
            typ = opts[key][0]
            try:
                resolved[key] = raw if raw is None else typ(raw)
            except (TypeError, ValueError) as err:
                raise UsageError(f"bad value for {key} from {source}: {raw!r} ({err})") from None
    for key in REQUIRED.get(command, []):
        if not resolved.get(key):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    return resolved


class Run:
    """Tracks every file written under ``out`` and emits the provenance manifest."""

    def __init__(self, command, cfg):
        self.command, self.cfg = command, cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []

    def path(self, name) -> Path:
        p = self.out / name
        self.outputs.append(p)
        return p

    def finish(self):
        cfg_path = self.path("config.json")
        cfg_path.write_text(json.dumps({"command": self.command, "config": _jsonable(self.cfg)}, indent=2,
                                       sort_keys=True), encoding="utf-8")
        entries = []
        for p in dict.fromkeys(self.outputs):
            if p.exists():
                entries.append({"path": str(p.relative_to(self.out)), "bytes": p.stat().st_size,
                                "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        manifest = {"command": self.command, "config_hash": config_hash(_jsonable(self.cfg)), "outputs": entries}
        (self.out / "run.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def _jsonable(cfg):
    return {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in cfg.items()}


def sample_config(cfg) -> SampleConfig:
    kw = dict(num_steps=cfg["num_steps"], sigma_max=cfg["sigma_max"], sigma_min=cfg["sigma_min"], rho=cfg["rho"],
              s_noise=cfg["s_noise"], s_tmin=cfg["s_tmin"], s_tmax=cfg["s_tmax"], seed=cfg["seed"],
              second_order=cfg["second_order"])
    if cfg.get("s_churn_total") is not None:
        kw.pop("num_steps")
        return SampleConfig.from_total_churn(cfg["s_churn_total"], cfg["num_steps"], **kw)
    return SampleConfig(s_churn=cfg["s_churn"], **kw)


# -- subcommands

def cmd_make_data(run: Run, cfg):
    world = BlobWorldConfig(grid=cfg["grid"], velocity=cfg["velocity"], spawn_rate=cfg["spawn_rate"], seed=cfg["seed"])
    filt = PatchFilter(min_cloud_fraction=cfg["min_cloud_fraction"], cloud_threshold=cfg["cloud_threshold"])
    counts = {k: cfg[k] for k in ("train", "val", "test") if cfg[k] > 0}
    if "train" not in counts:
        raise UsageError("make-data needs --train > 0 (normalization stats come from train)")
    build_dataset(world, filt, counts, run.out, length=cfg["length"])
    for split in counts:
        run.path(f"{split}.edmt")
        run.path(f"{split}.json")


def _train_config(cfg):
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], accumulation=cfg["accumulation"],
                       weighting=cfg["weighting"], patience=cfg["patience"], val_fraction=cfg["val_fraction"],
                       seed=cfg["seed"], lr=cfg["lr"], sigma_data=cfg["sigma_data"],
                       train_sigma=TrainSigmaDist(loc=cfg["train_sigma_loc"], scale=cfg["train_sigma_scale"]),
                       max_steps=cfg["max_steps"] or None)


def _copy_checkpoint(src, run: Run, name):
    src = Path(src)
    for suffix in (".edmt", ".json"):
        if not src.with_suffix(suffix).exists():
            raise FileNotFoundError(f"checkpoint file {src.with_suffix(suffix)} not found")
        shutil.copyfile(src.with_suffix(suffix), run.path(name + suffix))


def cmd_train(run: Run, cfg):
    task = cfg["task"]
    if task not in ("uncond", "cond", "corrdiff", "baseline", "ae", "ldm"):
        raise UsageError(f"unknown task {task!r}")
    seqs, man = pipeline.load_split(cfg["data"], "train")
    stats = man.stats
    tcfg = _train_config(cfg)
    cond, tgt = pipeline.normalized_pairs(seqs, stats)
    spec = {"widths": tuple(cfg["widths"]), "depth": cfg["depth"], "activation": cfg["activation"]}
    meta = {"task": task, "stats": stats.to_dict(), "sigma_data": cfg["sigma_data"], "window": 2,
            "field_shape": list(tgt.shape[1:]), "data_range": [float(seqs.min()), float(seqs.max())],
            "train_config": _jsonable(cfg)}

    if task == "ae":
        frames = pipeline.to_model_space(seqs.reshape(-1, *seqs.shape[2:]), stats)
        aespec = AESpec(data_channels=1, latent_channels=cfg["latent_channels"], compression=cfg["compression"],
                        width=cfg["ae_width"], seed=cfg["seed"])
        ae, history = train_autoencoder(frames, aespec, tcfg)
        save_autoencoder(run.path("autoencoder.edmt"), ae, {"stats": stats.to_dict()})
        run.path("autoencoder.json")
        _write_history(run, history)
        return

    if task == "baseline":
        result = train_baseline(cond, tgt, tcfg, spec)
        meta["kind"] = "baseline"
    elif task in ("uncond", "cond"):
        kind = "unconditional" if task == "uncond" else "conditional"
        ttask = TrainTask(kind, 0 if task == "uncond" else cond.shape[1], tgt.shape[1])
        result = train_diffusion(tgt, cond, ttask, tcfg, spec_overrides=spec)
        meta["kind"] = "diffusion"
        meta["conditional"] = task == "cond"
    elif task == "corrdiff":
        if not cfg["baseline"]:
            raise UsageError("train --task corrdiff needs --baseline <checkpoint>")
        kind, parts, _ = pipeline.load_model(cfg["baseline"])
        if kind != "baseline":
            raise UsageError(f"--baseline points at a {kind} checkpoint")
        residual, cond3, rstats = prepare_corrdiff(parts["net"], cond, tgt)
        ttask = TrainTask("corrdiff_residual", cond3.shape[1], tgt.shape[1])
        result = train_diffusion(residual, cond3, ttask, tcfg, spec_overrides=spec)
        _copy_checkpoint(cfg["baseline"], run, "baseline")
        meta.update(kind="corrdiff", baseline="baseline.edmt", residual_stats=rstats.to_dict())
    else:
        if not cfg["autoencoder"]:
            raise UsageError("train --task ldm needs --autoencoder <checkpoint>")
        ae, _ = load_autoencoder(cfg["autoencoder"])
        z_tgt = ae.encode(tgt)
        z_cond = pipeline.encode_frames(ae, cond)
        ttask = TrainTask("conditional", z_cond.shape[1], z_tgt.shape[1])
        result = train_diffusion(z_tgt, z_cond, ttask, tcfg, spec_overrides=spec)
        _copy_checkpoint(cfg["autoencoder"], run, "autoencoder")
        meta.update(kind="ldm", autoencoder="autoencoder.edmt")

    net = result.model if task == "baseline" else result.model.net
    meta["stopped_early"] = result.stopped_early
    save_checkpoint(run.path("model.edmt"), net, meta)
    run.path("model.json")
    _write_history(run, result.history)


def _write_history(run, history):
    write_loss_csv(run.path("loss.csv"), history)


def _read_windows(path, window, index=None):
    a = read_tensor_file(path)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1] < window:
        raise ContractError(f"{path}: expected (B, >= {window}, H, W) frames, got {a.shape}")
    a = a[:, :window]
    if index is not None:
        if not 0 <= index < len(a):
            raise UsageError(f"--init-index {index} out of range for {len(a)} initializations")
        a = a[index:index + 1]
    return a.astype(np.float32)


def cmd_sample(run: Run, cfg):
    scfg = sample_config(cfg)
    kind, parts, meta = pipeline.load_model(cfg["checkpoint"])
    stats = parts["stats"]
    conditional = kind != "diffusion" or meta.get("conditional", True)
    if conditional and not cfg["condition"]:
        raise UsageError(f"{kind} checkpoint needs --condition")
    if cfg["trajectory"] and kind not in ("diffusion", "ldm"):
        raise UsageError("--trajectory is available for diffusion and ldm checkpoints")
    window = None
    if conditional:
        window = pipeline.to_model_space(_read_windows(cfg["condition"], meta.get("window", 2)), stats)
    b = len(window) if window is not None else cfg["batch"]
    shape = (b, *meta["field_shape"])
    forecaster = None if kind in ("diffusion", "ldm") else pipeline.build_forecaster(cfg["checkpoint"], scfg)[0]
    out, traj = [], None
    for m in range(cfg["members"]):
        seed = member_seed(cfg["seed"], m)
        if forecaster is not None:
            out.append(forecaster.step(window, seed))
            continue
        init, churn = stream_rngs(seed)
        want = bool(cfg["trajectory"]) and m == 0
        if kind == "diffusion":
            res = generate(NetDenoiser(parts["denoiser"]), shape, scfg, window, init_rng=init, churn_rng=churn,
                           return_trajectory=want)
        else:
            res = generate_latent(NetDenoiser(parts["denoiser"]), parts["ae"], shape, scfg, window, init_rng=init,
                                  churn_rng=churn, return_trajectory=want)
        if want:
            res, traj = res
        out.append(res)
    samples = pipeline.to_kelvin(np.stack(out)[:, :, 0], stats)
    write_tensor_file(run.path("samples.edmt"), samples)
    if traj is not None:
        traj.write_csv(run.path("trajectory.csv"), cfg["trajectory"])


def cmd_rollout(run: Run, cfg):
    scfg = sample_config(cfg)
    init = _read_windows(cfg["init"], 2, cfg["init_index"])
    if cfg["model"] == "persistence":
        forecaster, stats = pipeline.build_forecaster("persistence", scfg, NormStats(0.0, 1.0))
        meta = {}
    else:
        forecaster, stats = pipeline.build_forecaster(cfg["model"], scfg)
        meta = pipeline.load_model(cfg["model"])[2]
    clamp = None
    if cfg["clamp"]:
        if "data_range" not in meta:
            raise UsageError("--clamp needs a checkpoint that records its training range")
        lo, hi = meta["data_range"]
        clamp = ((lo - stats.mean) / stats.std, (hi - stats.mean) / stats.std)
    rcfg = RolloutConfig(leads=cfg["leads"], members=cfg["members"], base_seed=cfg["seed"], clamp=clamp,
                         threads=cfg["threads"])
    ens = ensemble(forecaster, pipeline.to_model_space(init, stats), rcfg, init_tag=f"{cfg['init']}#{cfg['init_index']}")
    members = pipeline.to_kelvin(ens.members[:, 0], stats)  # (M, leads, C, H, W)
    write_tensor_file(run.path("rollout.edmt"), members.reshape(members.shape[0], -1, *members.shape[-2:]))
    side = {"shape": list(members.shape), "axes": ["member", "lead", "channel", "y", "x"], "seeds": ens.seeds,
            "config_hash": ens.config_hash, "model": cfg["model"], "init": ens.init_tag, "units": "kelvin"}
    run.path("rollout.json").write_text(json.dumps(side, indent=2), encoding="utf-8")


def _named(spec_list, default_name):
    out = {}
    for item in filter(None, (s.strip() for s in spec_list.split(","))):
        name, _, path = item.partition("=")
        if not path:
            name, path = (item if item == default_name else Path(item).stem), item
        if name in out:
            raise UsageError(f"duplicate model name {name!r}")
        out[name] = path
    if not out:
        raise UsageError("no models given")
    return out


def cmd_evaluate(run: Run, cfg):
    scfg = sample_config(cfg)
    seqs, man = pipeline.load_split(cfg["data"], cfg["split"])
    leads = min(cfg["leads"], seqs.shape[1] - 2)
    if leads < 1:
        raise UsageError("sequences too short to verify any lead")
    n = cfg["n_init"] or len(seqs)
    seqs = seqs[:n]
    init = seqs[:, :2, 0]
    truth = seqs[:, 2:2 + leads]
    metrics, curves, spectra = {}, {}, {}
    lead_k = min(max(cfg["spectrum_lead"], 1), leads) - 1
    for name, spec in _named(cfg["models"], "persistence").items():
        forecaster, stats = pipeline.build_forecaster(spec, scfg, man.stats)
        members = cfg["members"] if forecaster.stochastic else 1
        rcfg = RolloutConfig(leads=leads, members=members, base_seed=cfg["seed"], threads=cfg["threads"])
        ens = ensemble(forecaster, pipeline.to_model_space(init, stats), rcfg)
        fc = pipeline.to_kelvin(ens.members, stats).astype(np.float64)  # (M, n, leads, 1, H, W)
        if not np.all(np.isfinite(fc)):
            raise FloatingPointError(f"{name}: non-finite forecast")
        metrics[name] = metrics_by_lead(truth, fc[0])
        if members > 1:
            metrics[f"{name}_ensmean"] = metrics_by_lead(truth, fc.mean(axis=0))
            ens_samples = np.moveaxis(fc, 0, 2).reshape(n * leads, members, *fc.shape[-3:])
            curves[name] = spread_skill(ens_samples, truth.reshape(n * leads, *truth.shape[-3:]))
        spectra[name] = fractional_change(fc[0][:, lead_k, 0], truth[:, lead_k, 0], cfg["pixel_km"])
        if cfg["pgm"]:
            lo, hi = float(truth.min()), float(truth.max())
            for k in sorted({0, leads - 1}):
                write_pgm(run.path(f"{name}_lead{k + 1}.pgm"), fc[0, 0, k, 0], lo, hi)
    if cfg["pgm"]:
        lo, hi = float(truth.min()), float(truth.max())
        for k in sorted({0, leads - 1}):
            write_pgm(run.path(f"truth_lead{k + 1}.pgm"), truth[0, k, 0], lo, hi)
    write_metrics_csv(run.path("metrics.csv"), metrics, man.extra.get("config", {}).get("frame_minutes", 10.0))
    if curves:
        write_spread_skill_csv(run.path("spread_skill.csv"), curves)
    write_spectrum_csv(run.path("spectrum.csv"), spectra)
    print(f"verified {len(metrics)} forecast sets over {n} initializations x {leads} leads")


def cmd_evaluate_ae(run: Run, cfg):
    seqs, man = pipeline.load_split(cfg["data"], cfg["split"])
    frames = seqs.reshape(-1, *seqs.shape[2:])
    reports = {}
    for name, spec in _named(cfg["autoencoders"], "identity").items():
        ae = IdentityAutoencoder(1) if spec == "identity" else load_autoencoder(spec)[0]
        reports[name] = evaluate_reconstruction(ae, frames, man.stats)
    write_recon_csv(run.path("recon.csv"), reports)


def cmd_gridsearch(run: Run, cfg):
    seqs, man = pipeline.load_split(cfg["data"], cfg["split"])
    forecaster, stats = pipeline.build_forecaster(cfg["model"], SampleConfig(), man.stats)
    if not forecaster.stochastic:
        raise UsageError("grid search tunes the sampler of a diffusion checkpoint")
    n = min(cfg["n_init"], len(seqs)) if cfg["n_init"] else len(seqs)
    window = pipeline.to_model_space(seqs[:n, :2, 0], stats)
    truth = seqs[:n, 2].astype(np.float64)

    def evaluate(scfg):
        forecaster.cfg = scfg
        members = np.stack([forecaster.step(window, member_seed(cfg["seed"], m)) for m in range(cfg["members"])])
        fc = pipeline.to_kelvin(members, stats).astype(np.float64)
        rmse = pixel_metrics(truth, fc.mean(axis=0)).rmse
        return rmse, spread_skill(np.moveaxis(fc, 0, 1), truth).ratio

    grids = {"num_steps": cfg["grid_num_steps"], "s_churn": cfg["grid_s_churn"], "sigma_max": cfg["grid_sigma_max"],
             "rho": cfg["grid_rho"]}
    result = grid_search(evaluate, grids, sample_config(cfg))
    result.write_csv(run.path("grid.csv"))
    run.path("selected.json").write_text(json.dumps(_jsonable(result.selected.to_dict()), indent=2),
                                         encoding="utf-8")
    print(f"selected {json.dumps({k: getattr(result.selected, k) for k in grids})}")


HANDLERS = {"make-data": cmd_make_data, "train": cmd_train, "sample": cmd_sample, "rollout": cmd_rollout,
            "evaluate": cmd_evaluate, "evaluate-ae": cmd_evaluate_ae, "gridsearch": cmd_gridsearch}

USER_ERRORS = (UsageError, ContractError, TensorFormatError, FileNotFoundError, ValueError)


def main(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("edmcast: error: a subcommand is required", file=sys.stderr)
            return 1
        cfg = resolve_config(args.command, args, environ)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"error: {err}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, cfg["threads"]))
    try:
        run = Run(args.command, cfg)
        HANDLERS[args.command](run, cfg)
        run.finish()
    except USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
