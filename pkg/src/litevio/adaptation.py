"""Online test-time adaptation of visual BatchNorm affine parameters.

Each transition is matched to a domain by comparing its domain-distinctive
feature (ddf) against stored proxies. When the match is not the source
domain, the matched BN dictionary entry takes one gradient step on the
disagreement between the fused prediction and the inertial-only prediction,
which serves as a pseudo label.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .corruption import NoiseId, corrupt, transition_labels
from .geometry import pose_rmse
from .network import MODES, VIONetwork, gradients
from .sensorsim import SensorStream, SensorWindow


class ContractError(RuntimeError):
    """An adaptation precondition was violated."""


@dataclass(frozen=True)
class AdaptConfig:
    """``mode`` selects the normalization statistics used while adapting.

    ``"infer"`` normalizes with the frozen running statistics so that a zero
    learning rate reproduces plain inference exactly; ``"adapt"`` uses the
    current input's spatial statistics.
    """
    eta: float = 1e-4
    alpha: float = 100.0
    optimizer: str = "sgd"
    proxy_samples: int = 16
    gating: bool = True
    mode: str = "infer"
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.proxy_samples < 1:
            raise ValueError("proxy_samples must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.mode not in ("infer", "adapt"):
            raise ValueError("mode must be 'infer' or 'adapt'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProxyBank:
    proxies: np.ndarray            # (K + 1, ddf_dim)
    labels: tuple                  # NoiseId per entry; entry 0 is clean

    def __post_init__(self):
        self.proxies = np.asarray(self.proxies, dtype=float)
        self.labels = tuple(NoiseId.parse(lab) for lab in self.labels)
        if self.proxies.ndim != 2 or len(self.proxies) != len(self.labels):
            raise ValueError("one proxy per label required")
        if not np.all(np.isfinite(self.proxies)):
            raise ValueError("proxies must be finite")
        if self.labels[0] != NoiseId.CLEAN:
            raise ValueError("proxy 0 must be the clean source domain")

    @property
    def K(self) -> int:
        return len(self.labels) - 1

    def to_dict(self) -> dict:
        return {"proxies": self.proxies.tolist(), "labels": [lab.name.lower() for lab in self.labels]}

    @classmethod
    def from_dict(cls, d) -> "ProxyBank":
        return cls(np.array(d["proxies"]), tuple(d["labels"]))


@dataclass
class StepRecord:
    t: int
    k: int
    loss: float | None
    y_fused: np.ndarray
    y_inertial: np.ndarray
    entry: int


@dataclass
class AdaptTrace:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def k(self) -> np.ndarray:
        return np.array([r.k for r in self.records], dtype=int)

    @property
    def losses(self) -> np.ndarray:
        return np.array([np.nan if r.loss is None else r.loss for r in self.records])

    def fused(self) -> np.ndarray:
        return np.array([r.y_fused for r in self.records]).reshape(-1, 6)

    def inertial(self) -> np.ndarray:
        return np.array([r.y_inertial for r in self.records]).reshape(-1, 6)

    def write_csv(self, path, bank: ProxyBank, labels=None, gt=None) -> None:
        """Columns ``t, k, label, L_TTA, t_err, r_err`` (errors need ``gt`` deltas)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "k", "label", "L_TTA", "t_err", "r_err"])
            for i, r in enumerate(self.records):
                lab = "" if labels is None else NoiseId(int(labels[i])).name.lower()
                if gt is not None:
                    e = r.y_fused - gt[i]
                    t_err, r_err = repr(float(np.linalg.norm(e[3:]))), repr(float(np.linalg.norm(e[:3])))
                else:
                    t_err = r_err = ""
                w.writerow([r.t, r.k, lab, "" if r.loss is None else repr(r.loss), t_err, r_err])


def consistency_loss(y_fused, y_inertial, alpha: float = 100.0) -> torch.Tensor:
    """``|v_i - v_f|^2 + alpha |phi_i - phi_f|^2``; the inertial side carries no gradient."""
    y_fused = torch.as_tensor(y_fused)
    y_inertial = torch.as_tensor(y_inertial, dtype=y_fused.dtype).detach()
    d = (y_inertial - y_fused).reshape(-1, 6)
    return ((d[:, 3:] ** 2).sum(dim=1) + alpha * (d[:, :3] ** 2).sum(dim=1)).sum()


def _dtype(net) -> torch.dtype:
    return next(net.parameters()).dtype


def _window_tensors(net, w: SensorWindow):
    dt = _dtype(net)
    return (torch.as_tensor(np.asarray(w.image_pair)[None], dtype=dt),
            torch.as_tensor(np.asarray(w.imu)[None], dtype=dt))


def window_ddf(net: VIONetwork, w: SensorWindow) -> np.ndarray:
    img, _ = _window_tensors(net, w)
    with torch.no_grad():
        return net.ddf_from(net.visual.layers[0].conv(img))[0].numpy().astype(float)


def _corrupt_window(w: SensorWindow, noise, severity, seed, index) -> SensorWindow:
    c = w.image_pair.shape[0] // 2
    a = corrupt(w.image_pair[:c], noise, severity, seed, 2 * index)
    b = corrupt(w.image_pair[c:], noise, severity, seed, 2 * index + 1)
    return SensorWindow(np.concatenate([a, b]), w.imu, w.t)


def init_proxies(net: VIONetwork, samples, noises, severity: int = 3, seed: int = 0) -> ProxyBank:
    """Mean ddf over ``samples`` (clean windows) corrupted with each noise.

    ``noises`` lists the K target domains; the clean proxy is always entry 0.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("init_proxies needs at least one sample window")
    labels = [NoiseId.CLEAN] + [NoiseId.parse(n) for n in noises if NoiseId.parse(n) != NoiseId.CLEAN]
    proxies = []
    for lab in labels:
        feats = [window_ddf(net, _corrupt_window(w, lab, severity, seed, i) if lab else w)
                 for i, w in enumerate(samples)]
        proxies.append(np.mean(feats, axis=0))
    return ProxyBank(np.array(proxies), tuple(labels))


def match_domain(ddf, bank: ProxyBank) -> int:
    """Nearest proxy in Euclidean distance; ties go to the smaller index."""
    ddf = np.asarray(ddf, dtype=float)
    if ddf.shape != bank.proxies.shape[1:]:
        raise ValueError(f"ddf shape {ddf.shape} != proxy shape {bank.proxies.shape[1:]}")
    return int(np.argmin(np.linalg.norm(bank.proxies - ddf, axis=1)))


class EntryOptimizer:
    """Per-dictionary-entry optimizer state for the BN affine parameters."""

    def __init__(self, net: VIONetwork, cfg: AdaptConfig):
        self.net = net
        self.cfg = cfg
        self._params: dict[int, dict[str, nn.Parameter]] = {}
        self._opts: dict[int, torch.optim.Optimizer] = {}

    def step(self, k: int, grads: dict[str, torch.Tensor]) -> None:
        entry = self.net.bn_dictionary[k]
        if k not in self._params:
            self._params[k] = {n: nn.Parameter(t.clone()) for n, t in entry.items()}
            ps = list(self._params[k].values())
            if self.cfg.optimizer == "adam":
                self._opts[k] = torch.optim.Adam(ps, lr=self.cfg.eta)
            else:
                self._opts[k] = torch.optim.SGD(ps, lr=self.cfg.eta)
        params = self._params[k]
        with torch.no_grad():
            for n, p in params.items():
                p.copy_(entry[n])
                p.grad = grads[n].detach().clone()
        self._opts[k].step()
        self.net.bn_dictionary[k] = {n: p.detach().clone() for n, p in params.items()}
        self.net.load_bn_entry(k)


def _adapt_forward(net, img, imu, cfg: AdaptConfig, track: bool):
    with torch.set_grad_enabled(track):
        y_f, y_i, _ = net(img, imu, MODES[cfg.mode])
    return y_f, y_i


def tta_step(net: VIONetwork, w: SensorWindow, k: int, cfg: AdaptConfig,
             optimizer: EntryOptimizer | None = None) -> float:
    """One gradient step on entry ``k`` (never the source entry); returns the pre-step loss."""
    if k == 0:
        raise ContractError("the source BN entry (k=0) is never adapted")
    if net.active_entry != k:
        net.load_bn_entry(k)
    img, imu = _window_tensors(net, w)
    y_f, y_i = _adapt_forward(net, img, imu, cfg, True)
    loss = consistency_loss(y_f, y_i, cfg.alpha)
    optimizer = optimizer or EntryOptimizer(net, cfg)
    optimizer.step(k, gradients(net, loss, "theta_a"))
    return float(loss.detach())


def run_online(net: VIONetwork, stream: SensorStream, bank: ProxyBank, cfg: AdaptConfig,
               optimizer: EntryOptimizer | None = None):
    """Match, predict and adapt transition by transition.

    The ddf is computed from the current transition only, with the source
    entry's affine parameters. Predictions are logged before the update.
    Pass ``optimizer`` to carry optimizer state across calls.
    Returns ``(fused predictions (T-1, 6), AdaptTrace)``.
    """
    if len(net.bn_dictionary) != bank.K + 1:
        raise ContractError(f"BN dictionary has {len(net.bn_dictionary)} entries, bank needs {bank.K + 1}")
    opt = optimizer or EntryOptimizer(net, cfg)
    trace = AdaptTrace()
    net.load_bn_entry(0)
    dt = _dtype(net)
    for t in range(stream.T - 1):
        img = torch.as_tensor(np.concatenate([stream.frames[t], stream.frames[t + 1]])[None], dtype=dt)
        imu = torch.as_tensor(stream.imu[t][None], dtype=dt)
        with torch.no_grad():
            ddf = net.ddf_from(net.visual.layers[0].conv(img))[0].numpy().astype(float)
        k = match_domain(ddf, bank)
        if net.active_entry != k:
            net.load_bn_entry(k)
        adapt = cfg.eta > 0 and (k != 0 or not cfg.gating)
        y_f, y_i = _adapt_forward(net, img, imu, cfg, adapt)
        loss = None
        if k != 0 or not cfg.gating:
            loss_t = consistency_loss(y_f, y_i, cfg.alpha)
            loss = float(loss_t.detach())
            if adapt:
                opt.step(k, gradients(net, loss_t, "theta_a"))
        trace.records.append(StepRecord(t, k, loss, y_f.detach()[0].numpy().astype(float),
                                        y_i.detach()[0].numpy().astype(float), net.active_entry))
    net.load_bn_entry(0)
    return trace.fused(), trace


def predict_frozen(net: VIONetwork, stream: SensorStream, mode: str = "infer"):
    """Source-entry inference, one transition at a time. Returns ``(fused, inertial)``."""
    if net.bn_dictionary:
        net.load_bn_entry(0)
    dt = _dtype(net)
    yf, yi = [], []
    with torch.no_grad():
        for t in range(stream.T - 1):
            img = torch.as_tensor(np.concatenate([stream.frames[t], stream.frames[t + 1]])[None], dtype=dt)
            imu = torch.as_tensor(stream.imu[t][None], dtype=dt)
            f, i, _ = net(img, imu, MODES[mode])
            yf.append(f[0].numpy().astype(float))
            yi.append(i[0].numpy().astype(float))
    return np.array(yf).reshape(-1, 6), np.array(yi).reshape(-1, 6)


def predict_matched(net: VIONetwork, stream: SensorStream, bank: ProxyBank, mode: str = "infer"):
    """Inference with the matched dictionary entry per transition, without updates."""
    dt = _dtype(net)
    yf, ks = [], []
    with torch.no_grad():
        for t in range(stream.T - 1):
            img = torch.as_tensor(np.concatenate([stream.frames[t], stream.frames[t + 1]])[None], dtype=dt)
            imu = torch.as_tensor(stream.imu[t][None], dtype=dt)
            k = match_domain(net.ddf_from(net.visual.layers[0].conv(img))[0].numpy(), bank)
            net.load_bn_entry(k)
            yf.append(net(img, imu, MODES[mode])[0][0].numpy().astype(float))
            ks.append(k)
    net.load_bn_entry(0)
    return np.array(yf).reshape(-1, 6), np.array(ks)


def run_stationary_tta(net: VIONetwork, stream: SensorStream, bank: ProxyBank, cfg: AdaptConfig,
                       epochs: int = 5) -> dict:
    """Adapt over ``epochs`` passes of a fixed-noise stream, then evaluate with the adapted entries."""
    opt = EntryOptimizer(net, cfg)
    dt = _dtype(net)
    for _ in range(epochs):
        for t in range(stream.T - 1):
            img = torch.as_tensor(np.concatenate([stream.frames[t], stream.frames[t + 1]])[None], dtype=dt)
            imu = torch.as_tensor(stream.imu[t][None], dtype=dt)
            with torch.no_grad():
                k = match_domain(net.ddf_from(net.visual.layers[0].conv(img))[0].numpy(), bank)
            if k == 0 or cfg.eta == 0:
                continue
            net.load_bn_entry(k)
            y_f, y_i = _adapt_forward(net, img, imu, cfg, True)
            opt.step(k, gradients(net, consistency_loss(y_f, y_i, cfg.alpha), "theta_a"))
    net.load_bn_entry(0)
    pred, ks = predict_matched(net, stream, bank, cfg.mode)
    gt = stream.deltas()
    t_rmse, r_rmse = pose_rmse(pred, gt)
    return {"pred": pred, "k": ks, "t_rmse": t_rmse, "r_rmse": r_rmse}


def ddf_accuracy(trace, labels, bank: ProxyBank) -> float:
    """Percent of transitions whose matched domain label equals the active label.

    ``labels`` may be per transition (T-1) or per frame (T, reduced with
    :func:`transition_labels`).
    """
    ks = trace.k if isinstance(trace, AdaptTrace) else np.asarray(trace, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if len(labels) == len(ks) + 1:
        labels = transition_labels(labels)
    if len(labels) != len(ks):
        raise ValueError(f"{len(ks)} trace records vs {len(labels)} labels")
    if len(ks) == 0:
        raise ValueError("empty trace")
    matched = np.array([int(bank.labels[k]) for k in ks])
    return float(np.mean(matched == labels) * 100.0)
