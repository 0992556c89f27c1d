"""Supervised source-domain training in two stages.

Stage 1 fits the visual encoder, inertial encoder and fused decoder;
stage 2 fits the inertial decoder alone with every other tensor frozen.
"""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .network import VIONetwork

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 100
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 5e-6
    alpha: float = 100.0
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 10
    grad_clip: float | None = 10.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lr < 0:
            raise ValueError("lr must be nonnegative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def train_loss(pred: torch.Tensor, gt: torch.Tensor, alpha: float = 100.0) -> torch.Tensor:
    """Batch mean of ``|v - v_hat|^2 + alpha |phi - phi_hat|^2`` on ``[phi, v]`` rows."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape or pred.shape[-1] != 6:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    pred = pred.reshape(-1, 6)
    gt = gt.reshape(-1, 6)
    err = pred - gt
    per = (err[:, 3:] ** 2).sum(dim=1) + alpha * (err[:, :3] ** 2).sum(dim=1)
    return per.mean()


class WindowDataset:
    """All transitions of a list of streams, addressed as ``(stream, t)`` pairs."""

    def __init__(self, streams):
        self.streams = list(streams)
        if not self.streams or sum(len(s) for s in self.streams) == 0:
            raise ValueError("no training windows")
        self.index = np.array([(i, t) for i, s in enumerate(self.streams) for t in range(len(s))])
        self.targets = np.concatenate([s.deltas() for s in self.streams]).astype(np.float32)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, rows, dtype=torch.float32):
        imgs, imus = [], []
        for i, t in self.index[rows]:
            s = self.streams[i]
            imgs.append(np.concatenate([s.frames[t], s.frames[t + 1]], axis=0))
            imus.append(s.imu[t])
        return (torch.as_tensor(np.stack(imgs), dtype=dtype),
                torch.as_tensor(np.stack(imus), dtype=dtype),
                torch.as_tensor(self.targets[rows], dtype=dtype))

    def imu_rows(self, rows):
        return np.stack([self.streams[i].imu[t] for i, t in self.index[rows]])


class ArrayDataset:
    """Pre-stacked windows: image pairs (N, 2c, h, w), IMU (N, r, 6), targets (N, 6)."""

    def __init__(self, pairs, imu, targets):
        self.pairs = np.asarray(pairs, dtype=np.float32)
        self.imu = np.asarray(imu)
        self.targets = np.asarray(targets, dtype=np.float32).reshape(-1, 6)
        if not len(self.pairs) == len(self.imu) == len(self.targets):
            raise ValueError("pairs, imu and targets must have equal length")
        if len(self.pairs) == 0:
            raise ValueError("no training windows")

    def __len__(self) -> int:
        return len(self.pairs)

    def batch(self, rows, dtype=torch.float32):
        return (torch.as_tensor(self.pairs[rows], dtype=dtype),
                torch.as_tensor(self.imu[rows], dtype=dtype),
                torch.as_tensor(self.targets[rows], dtype=dtype))

    def imu_rows(self, rows):
        return self.imu[rows]


def imu_stats(data, rows) -> tuple[np.ndarray, np.ndarray]:
    samples = data.imu_rows(rows).reshape(-1, 6)
    std = samples.std(axis=0)
    return samples.mean(axis=0), np.where(std > 1e-8, std, 1.0)


def as_dataset(data):
    if isinstance(data, (WindowDataset, ArrayDataset)):
        return data
    if hasattr(data, "frames"):
        return WindowDataset([data])
    return WindowDataset(data)


def split_indices(n: int, val_fraction: float, seed: int):
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_val = int(round(n * val_fraction))
    if val_fraction > 0:
        n_val = max(1, min(n - 1, n_val))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainResult:
    curves: list = field(default_factory=list)     # (stage, epoch, split, loss)
    best_epoch: int = -1
    best_val: float = float("nan")
    initial_val: float = float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "epoch", "split", "loss"])
            for row in self.curves:
                w.writerow([row[0], row[1], row[2], repr(float(row[3]))])


def _dump_and_fail(net, where, out_dir):
    path = Path(out_dir or ".") / "nan_dump.pt"
    torch.save({"where": where, "state_dict": net.state_dict()}, path)
    raise TrainingError(f"non-finite loss at {where}; state dumped to {path}")


def _evaluate(net, data, rows, alpha, predict, batch=64):
    if len(rows) == 0:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(rows), batch):
            r = rows[start:start + batch]
            img, imu, y = data.batch(r, next(net.parameters()).dtype)
            total += float(train_loss(predict(img, imu), y, alpha)) * len(r)
    return total / len(rows)


def _fit(net, params, data, cfg, predict_train, predict_eval, stage, result, out_dir):
    train_rows, val_rows = split_indices(len(data), cfg.val_fraction, cfg.seed)
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11, len(stage)]))
    eval_rows = val_rows if len(val_rows) else train_rows
    if stage == "stage1" and int(net.visual.layers[0].bn.num_batches_tracked) == 0:
        # no running statistics yet: score the untrained net with per-sample statistics
        best = _evaluate(net, data, eval_rows, cfg.alpha, lambda i, u: net(i, u, "instance")[0])
    else:
        best = _evaluate(net, data, eval_rows, cfg.alpha, predict_eval)
    result.initial_val = best
    result.curves.append((stage, 0, "val", best))
    best_state = copy.deepcopy(net.state_dict())
    result.best_epoch, stale = 0, 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_rows)
        run, n = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            if len(rows) < 2 and stage == "stage1":
                continue  # batch statistics need more than one sample
            img, imu, y = data.batch(rows, next(net.parameters()).dtype)
            loss = train_loss(predict_train(img, imu), y, cfg.alpha)
            if not torch.isfinite(loss):
                _dump_and_fail(net, f"{stage} epoch {epoch} batch {start}", out_dir)
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            run += float(loss.detach()) * len(rows)
            n += len(rows)
        val = _evaluate(net, data, eval_rows, cfg.alpha, predict_eval)
        result.curves.append((stage, epoch, "train", run / max(n, 1)))
        result.curves.append((stage, epoch, "val", val))
        log.info("%s epoch %d train %.5f val %.5f", stage, epoch, run / max(n, 1), val)
        if val < best:
            best, result.best_epoch, stale = val, epoch, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                break
    result.best_val = best
    net.load_state_dict(best_state)
    return result


def train_vio(net: VIONetwork, streams, cfg: TrainConfig = TrainConfig(), out_dir=None) -> TrainResult:
    """Stage 1: Adam on the training loss over every parameter except the inertial decoder."""
    data = as_dataset(streams)
    torch.manual_seed(cfg.seed)
    train_rows, _ = split_indices(len(data), cfg.val_fraction, cfg.seed)
    mean, std = imu_stats(data, train_rows)
    with torch.no_grad():
        net.imu_mean.copy_(torch.as_tensor(mean, dtype=net.imu_mean.dtype))
        net.imu_std.copy_(torch.as_tensor(std, dtype=net.imu_std.dtype))
    params = [p for n, p in net.named_parameters() if not n.startswith("inertial_decoder.")]
    result = TrainResult()
    _fit(net, params, data, cfg,
         lambda img, imu: net(img, imu, "batch")[0],
         lambda img, imu: net(img, imu, "running")[0],
         "stage1", result, out_dir)
    return result


def train_inertial_decoder(net: VIONetwork, streams, cfg: TrainConfig = TrainConfig(batch_size=64),
                           out_dir=None) -> TrainResult:
    """Stage 2: fit the inertial decoder on frozen inertial features."""
    data = as_dataset(streams)
    torch.manual_seed(cfg.seed)
    params = list(net.inertial_decoder.parameters())
    result = TrainResult()
    _fit(net, params, data, cfg,
         lambda img, imu: net.predict_inertial(imu),
         lambda img, imu: net.predict_inertial(imu),
         "stage2", result, out_dir)
    return result
