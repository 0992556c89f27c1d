"""Input checks shared by the estimator API and the harness."""
from __future__ import annotations

import numpy as np

from .network import NetworkConfig
from .sensorsim import SensorStream


def check_stream(stream, cfg: NetworkConfig | None = None) -> SensorStream:
    if not isinstance(stream, SensorStream):
        raise TypeError(f"expected a SensorStream, got {type(stream).__name__}")
    if cfg is not None:
        c = cfg.in_channels // 2
        if stream.frames.shape[1:] != (c,) + tuple(cfg.image_size):
            raise ValueError(f"frames of shape {stream.frames.shape[1:]} do not match the network "
                             f"input {(c,) + tuple(cfg.image_size)}")
        if stream.imu.shape[1] != cfg.r_imu:
            raise ValueError(f"stream has {stream.imu.shape[1]} IMU samples per window, "
                             f"network expects {cfg.r_imu}")
    return stream


def check_streams(X, cfg: NetworkConfig | None = None) -> list[SensorStream]:
    streams = [X] if isinstance(X, SensorStream) else list(X)
    if not streams:
        raise ValueError("no streams given")
    return [check_stream(s, cfg) for s in streams]


def check_windows(pairs, imu, cfg: NetworkConfig | None = None, targets=None):
    """Validate stacked windows; returns float arrays ``(pairs, imu[, targets])``."""
    pairs = np.asarray(pairs, dtype=np.float32)
    imu = np.asarray(imu, dtype=np.float64)
    if pairs.ndim != 4 or imu.ndim != 3 or imu.shape[-1] != 6:
        raise ValueError(f"expected pairs (N, 2c, h, w) and imu (N, r, 6), got {pairs.shape}, {imu.shape}")
    if len(pairs) != len(imu):
        raise ValueError(f"{len(pairs)} image pairs vs {len(imu)} IMU windows")
    if not (np.all(np.isfinite(pairs)) and np.all(np.isfinite(imu))):
        raise ValueError("inputs contain non-finite values")
    if cfg is not None:
        if pairs.shape[1:] != (cfg.in_channels,) + tuple(cfg.image_size):
            raise ValueError(f"pairs of shape {pairs.shape[1:]} do not match the network config")
        if imu.shape[1] != cfg.r_imu:
            raise ValueError(f"imu windows carry {imu.shape[1]} samples, expected {cfg.r_imu}")
    if targets is None:
        return pairs, imu
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (len(pairs), 6):
        raise ValueError(f"targets must have shape ({len(pairs)}, 6), got {targets.shape}")
    return pairs, imu, targets


def check_seeds(seeds) -> list[int]:
    seeds = [int(s) for s in ([seeds] if np.isscalar(seeds) else seeds)]
    if not seeds:
        raise ValueError("seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return seeds
