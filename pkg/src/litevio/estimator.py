"""scikit-learn style wrappers around training and online adaptation."""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import adaptation as ad
from .network import PROFILES, VIONetwork, init_network, load_checkpoint, save_checkpoint
from .sensorsim import SensorStream, SensorWindow, window
from .training import ArrayDataset, TrainConfig, WindowDataset, train_inertial_decoder, train_vio
from .validation import check_streams, check_windows


def _dataset(X, y, cfg):
    if isinstance(X, (SensorStream, list, tuple)) and not (
            isinstance(X, tuple) and len(X) == 2 and isinstance(X[0], np.ndarray)):
        return WindowDataset(check_streams(X, cfg))
    pairs, imu = X
    if y is None:
        raise ValueError("array input needs target deltas y")
    return ArrayDataset(*check_windows(pairs, imu, cfg, y))


class VIOEstimator(RegressorMixin, BaseEstimator):
    """Two-stage trained VIO regressor.

    ``fit`` accepts a stream, a list of streams (targets come from their
    ground truth) or a ``(pairs, imu)`` tuple with ``y`` deltas of shape
    (N, 6). ``predict`` returns fused ``[phi, v]`` deltas.
    """

    def __init__(self, profile="desk", lr=1e-4, epochs=100, batch_size=16, weight_decay=5e-6,
                 alpha=100.0, stage2_lr=1e-4, stage2_epochs=100, stage2_batch_size=64,
                 val_fraction=0.1, patience=10, seed=0):
        self.profile = profile
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.stage2_lr = stage2_lr
        self.stage2_epochs = stage2_epochs
        self.stage2_batch_size = stage2_batch_size
        self.val_fraction = val_fraction
        self.patience = patience
        self.seed = seed

    def _train_configs(self):
        common = dict(weight_decay=self.weight_decay, alpha=self.alpha, seed=self.seed,
                      val_fraction=self.val_fraction, patience=self.patience)
        return (TrainConfig(batch_size=self.batch_size, epochs=self.epochs, lr=self.lr, **common),
                TrainConfig(batch_size=self.stage2_batch_size, epochs=self.stage2_epochs,
                            lr=self.stage2_lr, **common))

    def fit(self, X, y=None, out_dir=None):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        cfg = PROFILES[self.profile]
        data = _dataset(X, y, cfg)
        stage1, stage2 = self._train_configs()
        torch.manual_seed(self.seed)
        net = init_network(cfg, self.seed)
        self.history_ = [train_vio(net, data, stage1, out_dir),
                         train_inertial_decoder(net, data, stage2, out_dir)]
        net.eval()
        self.network_ = net
        self.n_windows_ = len(data)
        return self

    @classmethod
    def from_network(cls, net: VIONetwork, **params) -> "VIOEstimator":
        est = cls(profile=params.pop("profile", net.cfg.profile), **params)
        est.network_ = net
        est.history_ = []
        return est

    def _predict(self, X, inertial: bool):
        check_is_fitted(self, "network_")
        net = self.network_
        if isinstance(X, SensorStream):
            fused, inert = ad.predict_frozen(net, check_streams(X, net.cfg)[0])
            return inert if inertial else fused
        if isinstance(X, SensorWindow):
            X = (X.image_pair[None], X.imu[None])
        pairs, imu = check_windows(*X, cfg=net.cfg)
        if net.bn_dictionary:
            net.load_bn_entry(0)
        dt = next(net.parameters()).dtype
        out = []
        with torch.no_grad():
            for start in range(0, len(pairs), 64):
                img = torch.as_tensor(pairs[start:start + 64], dtype=dt)
                u = torch.as_tensor(imu[start:start + 64], dtype=dt)
                y = net.predict_inertial(u) if inertial else net(img, u, "running")[0]
                out.append(y.numpy().astype(float))
        return np.concatenate(out).reshape(-1, 6)

    def predict(self, X) -> np.ndarray:
        return self._predict(X, inertial=False)

    def predict_inertial(self, X) -> np.ndarray:
        return self._predict(X, inertial=True)

    def save(self, path, **extra):
        check_is_fitted(self, "network_")
        return save_checkpoint(self.network_, path, estimator_params=self.get_params(), **extra)

    @classmethod
    def load(cls, path) -> "VIOEstimator":
        net, blob = load_checkpoint(path)
        params = blob.get("estimator_params") or {"profile": net.cfg.profile}
        return cls.from_network(net, **params)


class TestTimeAdapter(BaseEstimator):
    """Online BN-affine adaptation around a trained :class:`VIOEstimator`.

    ``fit`` computes one proxy per noise from clean sample windows and resets
    the BN dictionary on a private copy of the network. Each ``predict``
    call continues adapting from the current dictionary state, so calls on
    consecutive stream chunks form one continual run.
    """
    __test__ = False  # not a pytest class

    def __init__(self, model=None, noises=("blur", "brightness", "contrast"), severity=3, eta=1e-4,
                 optimizer="sgd", alpha=100.0, proxy_samples=16, gating=True, mode="infer", seed=0):
        self.model = model
        self.noises = noises
        self.severity = severity
        self.eta = eta
        self.optimizer = optimizer
        self.alpha = alpha
        self.proxy_samples = proxy_samples
        self.gating = gating
        self.mode = mode
        self.seed = seed

    def _config(self) -> ad.AdaptConfig:
        return ad.AdaptConfig(eta=self.eta, alpha=self.alpha, optimizer=self.optimizer,
                              proxy_samples=self.proxy_samples, gating=self.gating, mode=self.mode,
                              seed=self.seed)

    def _source_network(self) -> VIONetwork:
        if isinstance(self.model, VIONetwork):
            return self.model
        if isinstance(self.model, VIOEstimator):
            check_is_fitted(self.model, "network_")
            return self.model.network_
        raise TypeError("model must be a fitted VIOEstimator or a VIONetwork")

    def fit(self, X, y=None):
        """``X``: clean sample windows, or a stream from which evenly spaced windows are drawn."""
        cfg = self._config()
        net = copy.deepcopy(self._source_network())
        if isinstance(X, SensorStream):
            n = len(X)
            idx = np.linspace(0, n - 1, min(cfg.proxy_samples, n)).round().astype(int)
            samples = [window(X, int(t)) for t in idx]
        else:
            samples = list(X)[:cfg.proxy_samples]
        self.bank_ = ad.init_proxies(net, samples, self.noises, self.severity, self.seed)
        net.reset_bn_dictionary(self.bank_.K)
        self.network_ = net
        self._optimizer = ad.EntryOptimizer(net, cfg)
        self.trace_ = ad.AdaptTrace()
        return self

    def reset(self):
        check_is_fitted(self, "network_")
        self.network_.reset_bn_dictionary(self.bank_.K)
        self._optimizer = ad.EntryOptimizer(self.network_, self._config())
        self.trace_ = ad.AdaptTrace()
        return self

    def predict(self, X: SensorStream) -> np.ndarray:
        check_is_fitted(self, "network_")
        stream = check_streams(X, self.network_.cfg)[0]
        pred, trace = ad.run_online(self.network_, stream, self.bank_, self._config(),
                                    optimizer=self._optimizer)
        self.trace_.records.extend(trace.records)
        return pred

    def match(self, X: SensorStream) -> np.ndarray:
        """Matched dictionary index per transition, without adapting."""
        check_is_fitted(self, "network_")
        return ad.predict_matched(self.network_, check_streams(X, self.network_.cfg)[0], self.bank_,
                                  self._config().mode)[1]
