"""Synthetic camera + IMU streams and KITTI-format ingestion.

The synthetic world is a procedurally textured ground plane with a distant
skyline. A vehicle drives over it with smooth random speed and yaw-rate
profiles; a forward-looking camera renders frames and an IMU reports body
angular rate and specific force, oversampled relative to the camera.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.integrate import cumulative_trapezoid

from .geometry import (Pose, Trajectory, euler_to_matrix, matrix_to_euler,
                       read_kitti_poses, trajectory_to_deltas, write_kitti_poses)

GRAVITY = np.array([0.0, 0.0, -9.81])


class StreamError(ValueError):
    """Structurally inconsistent sensor data."""


@dataclass(frozen=True)
class SceneConfig:
    """Synthetic scene, motion and IMU parameters.

    ``imu_rate`` is the IMU/camera rate ratio; each transition carries
    ``imu_rate + 1`` samples (both frame instants included).
    """
    seed: int = 0
    T: int = 200
    height: int = 64
    width: int = 64
    channels: int = 3
    texture_density: float = 1.2
    max_speed: float = 12.0
    min_speed_frac: float = 0.25
    max_yaw_rate: float = 0.35
    knot_period: float = 1.5
    frame_period: float = 0.1
    imu_rate: int = 10
    gyro_bias_std: float = 0.002
    accel_bias_std: float = 0.05
    gyro_noise_std: float = 0.005
    accel_noise_std: float = 0.1
    gravity: bool = True
    camera_height: float = 1.6
    camera_pitch: float = 0.35
    fov: float = 1.6

    def __post_init__(self):
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if self.height < 16 or self.width < 16:
            raise ValueError("image size must be at least 16x16")
        for name in ("gyro_bias_std", "accel_bias_std", "gyro_noise_std", "accel_noise_std",
                     "max_speed", "max_yaw_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.imu_rate < 1:
            raise ValueError("imu_rate must be >= 1")

    @property
    def r_imu(self) -> int:
        return self.imu_rate + 1


@dataclass
class SensorStream:
    frames: np.ndarray          # (T, c, h, w) in [0, 1]
    imu: np.ndarray             # (T-1, r_imu, 6): gyro xyz, accel xyz
    gt: Trajectory
    frame_period: float = 0.1
    imu_rate: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.frames)
        if len(self.gt) != T:
            raise StreamError(f"{T} frames but {len(self.gt)} poses")
        if self.imu.ndim != 3 or self.imu.shape[0] != T - 1 or self.imu.shape[2] != 6:
            raise StreamError(f"imu shape {self.imu.shape} incompatible with T={T}")
        if not np.all(np.isfinite(self.imu)):
            raise StreamError("non-finite IMU sample")
        if self.frames.ndim != 4:
            raise StreamError(f"frames must be (T, c, h, w), got {self.frames.shape}")

    @property
    def T(self) -> int:
        return len(self.frames)

    def __len__(self) -> int:
        return self.T - 1

    def deltas(self) -> np.ndarray:
        return trajectory_to_deltas(self.gt)

    def image_pairs(self) -> np.ndarray:
        return np.concatenate([self.frames[:-1], self.frames[1:]], axis=1)


@dataclass(frozen=True)
class SensorWindow:
    image_pair: np.ndarray      # (2c, h, w)
    imu: np.ndarray             # (r_imu, 6)
    t: int


def window(stream: SensorStream, t: int) -> SensorWindow:
    if not 0 <= t < stream.T - 1:
        raise IndexError(f"window index {t} out of range for {stream.T - 1} transitions")
    pair = np.concatenate([stream.frames[t], stream.frames[t + 1]], axis=0)
    return SensorWindow(pair, stream.imu[t], t)


def _rng(cfg: SceneConfig, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, tag]))


# ---------------------------------------------------------------- motion

def _bounded_profile(rng, times, knot_period, lo, hi):
    n = max(4, int(np.ceil(times[-1] / knot_period)) + 2)
    knot_t = np.arange(n) * knot_period - knot_period
    u = CubicSpline(knot_t, rng.uniform(0.0, 1.0, n))(times)
    # affine squeeze keeps C2 smoothness while respecting the bounds
    u_lo, u_hi = min(0.0, u.min()), max(1.0, u.max())
    u = (u - u_lo) / (u_hi - u_lo)
    return lo + (hi - lo) * u


def generate_trajectory(cfg: SceneConfig) -> Trajectory:
    """Smooth planar driving trajectory sampled at the camera rate."""
    if cfg.max_speed == 0 and cfg.max_yaw_rate == 0:
        raise ValueError("degenerate motion bounds: zero speed and zero yaw rate")
    rng = _rng(cfg, 1)
    sub = 20
    dt = cfg.frame_period
    t_fine = np.arange((cfg.T - 1) * sub + 1) * (dt / sub)
    # 0.98 margin absorbs integration error in the chord-speed bound
    vmax = 0.98 * cfg.max_speed
    speed = _bounded_profile(rng, t_fine, cfg.knot_period, cfg.min_speed_frac * vmax, vmax)
    yaw_rate = _bounded_profile(rng, t_fine, cfg.knot_period,
                                -0.98 * cfg.max_yaw_rate, 0.98 * cfg.max_yaw_rate)
    heading = cumulative_trapezoid(yaw_rate, t_fine, initial=0.0)
    x = cumulative_trapezoid(speed * np.cos(heading), t_fine, initial=0.0)
    y = cumulative_trapezoid(speed * np.sin(heading), t_fine, initial=0.0)
    idx = np.arange(cfg.T) * sub
    poses = []
    for i in idx:
        R = euler_to_matrix(np.array([0.0, 0.0, heading[i]]))
        poses.append(Pose(R, np.array([x[i], y[i], 0.0])))
    return Trajectory(poses, t_fine[idx])


# ---------------------------------------------------------------- rendering

def _hash01(ix, iy, salt):
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (salt * 83492791)
    h = h.astype(np.uint64)
    h ^= h >> np.uint64(13)
    h *= np.uint64(0x5BD1E995)
    h ^= h >> np.uint64(15)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0xFFFFFF)


def _value_noise(x, y, salt):
    ix, iy = np.floor(x), np.floor(y)
    fx, fy = x - ix, y - iy
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    a = _hash01(ix, iy, salt)
    b = _hash01(ix + 1, iy, salt)
    c = _hash01(ix, iy + 1, salt)
    d = _hash01(ix + 1, iy + 1, salt)
    return (a * (1 - sx) + b * sx) * (1 - sy) + (c * (1 - sx) + d * sx) * sy


def _fbm(x, y, salt, footprint, octaves=5):
    out = np.zeros_like(x)
    norm = 0.0
    for o in range(octaves):
        f = 2.0 ** o
        amp = 0.55 ** o
        # attenuate octaves finer than the pixel footprint (cheap anti-aliasing)
        w = amp * np.exp(-0.7 * (f * footprint) ** 2)
        out += w * (_value_noise(x * f, y * f, salt + 17 * o) - 0.5)
        norm += amp
    return out / norm


def _camera_rays(cfg: SceneConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    f = 0.5 * w / np.tan(0.5 * cfg.fov)
    u = np.arange(w) + 0.5 - 0.5 * w
    v = np.arange(h) + 0.5 - 0.5 * h
    uu, vv = np.meshgrid(u, v)
    # body frame: x forward, y left, z up
    d = np.stack([np.full_like(uu, f), -uu, -vv], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    cp, sp = np.cos(cfg.camera_pitch), np.sin(cfg.camera_pitch)
    pitch = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    return d @ pitch.T, f


def _render_one(pose: Pose, cfg: SceneConfig, rays, focal, salt) -> np.ndarray:
    dirs = rays @ pose.R.T
    cam = pose.t + pose.R @ np.array([0.0, 0.0, cfg.camera_height])
    dz = dirs[..., 2]
    ground = dz < -1e-3
    lam = np.where(ground, -cam[2] / np.where(ground, dz, -1.0), 0.0)
    gx = cam[0] + lam * dirs[..., 0]
    gy = cam[1] + lam * dirs[..., 1]
    rng_m = lam
    footprint = cfg.texture_density * rng_m / focal / np.maximum(-dz, 0.05)
    ga = _fbm(gx * cfg.texture_density, gy * cfg.texture_density, salt, footprint)
    gb = _fbm(gx * cfg.texture_density, gy * cfg.texture_density, salt + 1000, footprint)
    fog = np.exp(-rng_m / 40.0)

    az = np.arctan2(dirs[..., 1], dirs[..., 0])
    el = np.arctan2(dz, np.hypot(dirs[..., 0], dirs[..., 1]))
    az_u = (az + np.pi) / (2 * np.pi) * 48.0
    skyline = 0.05 + 0.25 * _value_noise(az_u, np.zeros_like(az_u), salt + 2000)
    facade = _value_noise(az_u * 8.0, el * 30.0, salt + 3000)
    building = el < skyline

    img = np.empty((3,) + rays.shape[:2])
    for c, (wa, wb, sky) in enumerate([(1.0, 0.0, 0.75), (0.6, 0.4, 0.82), (0.0, 1.0, 0.95)]):
        g = 0.5 + 1.6 * (wa * ga + wb * gb)
        g = fog * g + (1 - fog) * 0.5
        s = np.where(building, 0.25 + 0.4 * facade * (0.7 + 0.3 * c / 2), sky - 0.3 * el)
        img[c] = np.where(ground, g, s)
    img = np.clip(img, 0.0, 1.0)
    if cfg.channels != 3:
        img = np.resize(img, (cfg.channels,) + img.shape[1:])
    return img.astype(np.float32)


def render_frames(traj: Trajectory, cfg: SceneConfig) -> np.ndarray:
    """Render one frame per pose; identical poses give identical frames."""
    rays, focal = _camera_rays(cfg)
    salt = int(_rng(cfg, 2).integers(0, 2**20))
    return np.stack([_render_one(p, cfg, rays, focal, salt) for p in traj.poses])


# ---------------------------------------------------------------- inertial

def _body_rates(eul, eul_dot):
    roll, pitch = eul[:, 0], eul[:, 1]
    dr, dp, dy = eul_dot[:, 0], eul_dot[:, 1], eul_dot[:, 2]
    wx = dr - dy * np.sin(pitch)
    wy = dp * np.cos(roll) + dy * np.sin(roll) * np.cos(pitch)
    wz = -dp * np.sin(roll) + dy * np.cos(roll) * np.cos(pitch)
    return np.stack([wx, wy, wz], axis=-1)


def synthesize_imu(traj: Trajectory, cfg: SceneConfig) -> np.ndarray:
    """IMU windows of shape (T-1, r_imu, 6) from spline-resampled motion."""
    T = len(traj)
    if T < 2:
        raise ValueError("need at least two poses")
    ts = traj.timestamps
    pos = traj.positions()
    eul = np.unwrap(matrix_to_euler(np.array([p.R for p in traj.poses])), axis=0)
    pos_s = CubicSpline(ts, pos, axis=0)
    eul_s = CubicSpline(ts, eul, axis=0)

    r = cfg.r_imu
    frac = np.linspace(0.0, 1.0, r)
    t_imu = (ts[:-1, None] + frac[None, :] * np.diff(ts)[:, None]).reshape(-1)
    acc_w = pos_s(t_imu, 2)
    if cfg.gravity:
        acc_w = acc_w - GRAVITY
    e = eul_s(t_imu)
    Rs = euler_to_matrix(e)
    f_body = np.einsum("nji,nj->ni", Rs, acc_w)
    w_body = _body_rates(e, eul_s(t_imu, 1))
    imu = np.concatenate([w_body, f_body], axis=1).reshape(T - 1, r, 6)

    rng = _rng(cfg, 3)
    bias = np.concatenate([rng.normal(0, cfg.gyro_bias_std, 3), rng.normal(0, cfg.accel_bias_std, 3)])
    std = np.array([cfg.gyro_noise_std] * 3 + [cfg.accel_noise_std] * 3)
    noise = rng.normal(0.0, 1.0, imu.shape) * std
    return imu + bias + noise


def generate_stream(cfg: SceneConfig) -> SensorStream:
    traj = generate_trajectory(cfg)
    frames = render_frames(traj, cfg)
    imu = synthesize_imu(traj, cfg)
    return SensorStream(frames, imu, traj, cfg.frame_period, cfg.imu_rate,
                        meta={"source": "synthetic", "scene": asdict(cfg)})


# ---------------------------------------------------------------- persistence / KITTI

def save_stream(stream: SensorStream, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "frames.npy", stream.frames)
    np.save(d / "imu.npy", stream.imu)
    np.save(d / "timestamps.npy", stream.gt.timestamps)
    write_kitti_poses(d / "poses.txt", stream.gt)
    manifest = {
        "frames_shape": list(stream.frames.shape),
        "imu_shape": list(stream.imu.shape),
        "frame_period": stream.frame_period,
        "imu_rate": stream.imu_rate,
        "meta": stream.meta,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_stream(directory) -> SensorStream:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    gt = read_kitti_poses(d / "poses.txt", np.load(d / "timestamps.npy"))
    return SensorStream(np.load(d / "frames.npy"), np.load(d / "imu.npy"), gt,
                        manifest["frame_period"], manifest["imu_rate"], manifest["meta"])


def _read_imu_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = [p for p in line.replace(",", " ").split()]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            if lineno == 1:
                continue  # header
            raise StreamError(f"{path}:{lineno}: malformed IMU row") from None
        if len(vals) != 6:
            raise StreamError(f"{path}:{lineno}: expected 6 values, got {len(vals)}")
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, 6)


def load_kitti_sequence(image_dir, pose_file, imu_file, r: int,
                        size: tuple[int, int] = (64, 64), frame_period: float = 0.1) -> SensorStream:
    """Load a KITTI-format sequence; ``r`` is the number of IMU rows per transition."""
    from PIL import Image

    gt = read_kitti_poses(pose_file)
    gt = Trajectory(gt.poses, np.arange(len(gt)) * frame_period)
    files = sorted(p for p in Path(image_dir).iterdir()
                   if p.suffix.lower() in {".png", ".jpg", ".jpeg", ".bmp", ".ppm"})
    if len(files) != len(gt):
        raise StreamError(f"{len(files)} images but {len(gt)} poses")
    h, w = size
    frames = []
    for f in files:
        img = Image.open(f).convert("RGB").resize((w, h), Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    imu = _read_imu_csv(imu_file)
    if len(imu) != (len(gt) - 1) * r:
        raise StreamError(f"{len(imu)} IMU rows do not split into {len(gt) - 1} windows of {r}")
    return SensorStream(np.stack(frames), imu.reshape(len(gt) - 1, r, 6), gt, frame_period,
                        r - 1, meta={"source": "kitti", "image_dir": str(image_dir)})


def with_frames(stream: SensorStream, frames: np.ndarray) -> SensorStream:
    return replace(stream, frames=frames, meta=dict(stream.meta))
