"""Data generation, training and the three adaptation protocols."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .. import adaptation as ad
from ..geometry import Trajectory
from ..corruption import NoiseSchedule, apply_schedule, transition_labels
from ..estimator import VIOEstimator
from ..network import StateError, load_checkpoint, save_checkpoint
from ..sensorsim import generate_stream, load_kitti_sequence, load_stream, save_stream, window
from ..training import TrainConfig, TrainResult, train_vio
from .config import ExperimentConfig
from .report import MetricsReport, make_sequence, provenance

log = logging.getLogger(__name__)

ASSUMPTIONS = {
    "continual": "noise segments have equal length and cycle through the noise list",
    "single-shift": "window metrics are t_rmse over transitions ending in [0,t0), [t0,t1), [t1,T)",
    "stationary": "the whole stream carries one noise; TTA adapts for the configured epochs, "
                  "then the adapted dictionary is evaluated",
    "finetune": "fine-tuned baselines update every weight on corrupted training streams",
}


# ---- data

def _kitti(cfg: ExperimentConfig, seq: dict):
    return load_kitti_sequence(seq["image_dir"], seq["pose_file"], seq["imu_file"], cfg.network.r_imu,
                               tuple(cfg.network.image_size), seq.get("frame_period", 0.1))


def gen_data(cfg: ExperimentConfig, out) -> Path:
    """Write training streams and the proxy-sample stream under ``out/data``."""
    root = Path(out) / "data"
    if cfg.data.source == "kitti":
        streams = [_kitti(cfg, s) for s in cfg.data.kitti["train"]]
    else:
        streams = [generate_stream(cfg.scene(s, cfg.data.train_length)) for s in cfg.data.train_seeds]
    for i, s in enumerate(streams):
        save_stream(s, root / f"train_{i:02d}")
    if cfg.data.source == "kitti":
        proxy = streams[0]
    else:
        proxy = generate_stream(cfg.scene(cfg.data.proxy_seed, cfg.data.proxy_length))
    save_stream(proxy, root / "proxy")
    return root


def _data_root(out) -> Path:
    root = Path(out) / "data"
    if not (root / "proxy" / "manifest.json").exists():
        raise StateError(f"no generated data under {root}; run gen-data first")
    return root


def load_training_streams(out):
    root = _data_root(out)
    return [load_stream(p) for p in sorted(root.glob("train_*"))]


def test_stream(cfg: ExperimentConfig, seed: int, length: int):
    if cfg.data.source == "kitti":
        s = _kitti(cfg, cfg.data.kitti["test"])
        if s.T < length:
            raise StateError(f"test sequence has {s.T} frames, protocol needs {length}")
        gt = Trajectory(s.gt.poses[:length], s.gt.timestamps[:length])
        return replace(s, frames=s.frames[:length], imu=s.imu[:length - 1], gt=gt)
    return generate_stream(cfg.scene(cfg.data.test_seed_offset + seed, length))


# ---- training and proxies

def estimator_for(cfg: ExperimentConfig) -> VIOEstimator:
    t1, t2 = cfg.train, cfg.train_stage2
    return VIOEstimator(profile=cfg.profile, lr=t1.lr, epochs=t1.epochs, batch_size=t1.batch_size,
                        weight_decay=t1.weight_decay, alpha=t1.alpha, stage2_lr=t2.lr,
                        stage2_epochs=t2.epochs, stage2_batch_size=t2.batch_size,
                        val_fraction=t1.val_fraction, patience=t1.patience, seed=cfg.seed)


def train_model(cfg: ExperimentConfig, out) -> Path:
    out = Path(out)
    streams = load_training_streams(out)
    est = estimator_for(cfg).fit(streams, out_dir=out)
    curves = out / "train_curves.csv"
    TrainResult(curves=est.history_[0].curves + est.history_[1].curves).write_csv(curves)
    return est.save(out / "model.pt", experiment=cfg.to_dict(), seed=cfg.seed,
                    train=[cfg.train.to_dict(), cfg.train_stage2.to_dict()])


def _load_model(out):
    path = Path(out) / "model.pt"
    if not path.exists():
        raise StateError(f"missing checkpoint {path}; run train first")
    return load_checkpoint(path)


def build_proxies(cfg: ExperimentConfig, out) -> Path:
    net, _ = _load_model(out)
    proxy = load_stream(_data_root(out) / "proxy")
    n = cfg.adapt.proxy_samples
    idx = np.linspace(0, len(proxy) - 1, min(n, len(proxy))).round().astype(int)
    bank = ad.init_proxies(net, [window(proxy, int(t)) for t in idx], cfg.noises, cfg.severity, cfg.seed)
    path = Path(out) / "proxies.json"
    path.write_text(json.dumps({**bank.to_dict(), "severity": cfg.severity}, indent=1) + "\n")
    return path


def load_bank(out) -> ad.ProxyBank:
    path = Path(out) / "proxies.json"
    if not path.exists():
        raise StateError(f"missing proxies {path}; run init-proxies first")
    return ad.ProxyBank.from_dict(json.loads(path.read_text()))


def finetune_baselines(cfg: ExperimentConfig, out, noises=None) -> list[Path]:
    """Fine-tune every weight on fully corrupted training streams, one model per noise."""
    streams = load_training_streams(out)
    paths = []
    for noise in noises or cfg.stationary_noises():
        net, _ = _load_model(out)
        corrupted = [apply_schedule(s, NoiseSchedule.single_shift(s.T, 0, s.T, noise, cfg.severity),
                                    cfg.seed + i)[0] for i, s in enumerate(streams)]
        f = cfg.finetune
        tc = TrainConfig(lr=f.lr, epochs=min(f.epochs, 20), batch_size=f.batch_size,
                         weight_decay=cfg.train.weight_decay, alpha=cfg.train.alpha, seed=cfg.seed,
                         val_fraction=cfg.train.val_fraction, patience=cfg.train.patience)
        torch.manual_seed(cfg.seed)
        train_vio(net, corrupted, tc, out)
        paths.append(save_checkpoint(net, Path(out) / "finetune" / f"{noise}.pt", noise=noise,
                                     finetune=tc.to_dict()))
    return paths


# ---- protocols

def _continual_seed(cfg, out, seed, eta, schedule, protocol):
    net, _ = _load_model(out)
    bank = load_bank(out)
    clean = test_stream(cfg, seed, schedule.T)
    stream, labels = apply_schedule(clean, schedule, seed)
    net.reset_bn_dictionary(bank.K)
    base, inert = ad.predict_frozen(net, stream, cfg.adapt.mode)
    pred, trace = ad.run_online(net, stream, bank, cfg.adapt_config(seed, eta))
    series = {"gt": stream.deltas(), "baseline": base, "tta": pred, "inertial": inert,
              "label": transition_labels(labels), "k": trace.k,
              "loss": [None if r.loss is None else r.loss for r in trace.records]}
    window_ = (cfg.single_shift.t0, cfg.single_shift.t1) if protocol == "single-shift" else None
    tag = "continual" if protocol == "continual" else cfg.single_shift.noise
    return [make_sequence(seed, tag, series, schedule.to_list(),
                          [lab.name.lower() for lab in bank.labels], window_)]


def _stationary_seed(cfg, out, seed, eta, schedule, protocol):
    bank = load_bank(out)
    clean = test_stream(cfg, seed, cfg.stationary.length)
    seqs = []
    for noise in cfg.stationary_noises():
        sched = NoiseSchedule.single_shift(clean.T, 0, clean.T, noise, cfg.severity)
        stream, labels = apply_schedule(clean, sched, seed)
        net, _ = _load_model(out)
        net.reset_bn_dictionary(bank.K)
        base, inert = ad.predict_frozen(net, stream, cfg.adapt.mode)
        res = ad.run_stationary_tta(net, stream, bank, cfg.adapt_config(seed, eta), cfg.stationary.epochs)
        series = {"gt": stream.deltas(), "baseline": base, "tta": res["pred"], "inertial": inert,
                  "label": transition_labels(labels), "k": res["k"]}
        ft = Path(out) / "finetune" / f"{noise}.pt"
        if ft.exists():
            ft_net, _ = load_checkpoint(ft)
            series["finetuned"] = ad.predict_frozen(ft_net, stream)[0]
        seqs.append(make_sequence(seed, noise, series, sched.to_list(),
                                  [lab.name.lower() for lab in bank.labels]))
    return seqs


def _clean_seed(cfg, out, seed, eta, schedule, protocol):
    net, _ = _load_model(out)
    stream = test_stream(cfg, seed, cfg.stationary.length)
    base, inert = ad.predict_frozen(net, stream)
    series = {"gt": stream.deltas(), "baseline": base, "inertial": inert,
              "label": np.zeros(stream.T - 1, dtype=int)}
    return [make_sequence(seed, "clean", series)]


_RUNNERS = {"continual": _continual_seed, "single-shift": _continual_seed,
            "stationary": _stationary_seed, "clean": _clean_seed}


def _run_job(args):
    cfg_dict, out, seed, eta, schedule_list, schedule_T, protocol = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    torch.set_num_threads(cfg.threads)
    schedule = NoiseSchedule.from_list(schedule_T, schedule_list) if schedule_T else None
    return _RUNNERS[protocol](cfg, out, seed, eta, schedule, protocol)


def run_protocol(cfg: ExperimentConfig, protocol: str, out, eta: float | None = None,
                 schedule: NoiseSchedule | None = None) -> MetricsReport:
    """Run one protocol for every seed; sequences are reduced in seed order.

    ``protocol`` is ``stationary``, ``single-shift``, ``continual`` or
    ``clean`` (frozen evaluation without corruption).
    """
    if protocol not in _RUNNERS:
        raise ValueError(f"unknown protocol {protocol!r}")
    _load_model(out)
    if protocol != "clean":
        load_bank(out)
    if schedule is None and protocol == "continual":
        schedule = cfg.continual_schedule()
    elif schedule is None and protocol == "single-shift":
        schedule = cfg.single_shift_schedule()
    jobs = [(cfg.to_dict(), str(out), s, eta, schedule.to_list() if schedule else None,
             schedule.T if schedule else 0, protocol) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    sequences = [seq for r in results for seq in r]
    assumptions = [ASSUMPTIONS[protocol]] if protocol in ASSUMPTIONS else []
    if protocol == "stationary" and any("finetuned" in s["series"] for s in sequences):
        assumptions.append(ASSUMPTIONS["finetune"])
    config = cfg.to_dict()
    config["run"] = {"protocol": protocol, "eta": cfg.adapt.eta if eta is None else eta,
                     "schedule": schedule.to_list() if schedule else None}
    return MetricsReport(protocol, sequences, config, assumptions, provenance())
