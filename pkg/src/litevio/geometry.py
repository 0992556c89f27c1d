"""SE(3) pose algebra, trajectory integration and odometry error metrics.

Pose deltas use the ZYX (yaw-pitch-roll) Euler convention:
``R = Rz(phi_z) @ Ry(phi_y) @ Rx(phi_x)``. A delta is stored as the
6-vector ``[phi_x, phi_y, phi_z, v_x, v_y, v_z]`` (rotation first).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

SEGMENT_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class GeometryError(ValueError):
    """Invalid argument to a geometry routine."""


@dataclass(frozen=True)
class PoseDelta:
    phi: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float).reshape(3)
        v = np.asarray(self.v, dtype=float).reshape(3)
        if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(v))):
            raise GeometryError("pose delta components must be finite")
        if np.any(np.abs(phi) >= np.pi):
            raise GeometryError(f"euler angles out of canonical range: {phi}")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "v", v)

    @classmethod
    def from_vector(cls, y) -> "PoseDelta":
        y = np.asarray(y, dtype=float).reshape(6)
        return cls(y[:3], y[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.v])


@dataclass(frozen=True)
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("R is not a proper rotation matrix")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def _trusted(cls, R, t) -> "Pose":
        # skips the 1e-9 orthonormality check; used for externally rounded files
        obj = object.__new__(cls)
        object.__setattr__(obj, "R", np.asarray(R, dtype=float).reshape(3, 3))
        object.__setattr__(obj, "t", np.asarray(t, dtype=float).reshape(3))
        return obj

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> "Pose":
        return Pose._trusted(self.R.T, -self.R.T @ self.t)


@dataclass
class Trajectory:
    poses: list[Pose]
    timestamps: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.poses) < 1:
            raise GeometryError("trajectory needs at least one pose")
        if len(self.timestamps) != len(self.poses):
            raise GeometryError(
                f"{len(self.poses)} poses but {len(self.timestamps)} timestamps")
        if np.any(np.diff(self.timestamps) <= 0):
            raise GeometryError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def __getitem__(self, i) -> Pose:
        return self.poses[i]

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    def matrices(self) -> np.ndarray:
        return np.array([p.as_matrix() for p in self.poses])

    @classmethod
    def from_matrices(cls, mats, timestamps=None) -> "Trajectory":
        mats = np.asarray(mats, dtype=float)
        if timestamps is None:
            timestamps = np.arange(len(mats), dtype=float)
        return cls([Pose.from_matrix(m) for m in mats], timestamps)


def euler_to_matrix(phi) -> np.ndarray:
    """ZYX Euler angles ``(phi_x, phi_y, phi_z)`` -> rotation matrix; batched over leading axes."""
    phi = np.asarray(phi, dtype=float)
    zyx = phi[..., ::-1].reshape(-1, 3)
    R = Rotation.from_euler("ZYX", zyx).as_matrix()
    return R.reshape(phi.shape[:-1] + (3, 3))


def matrix_to_euler(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    zyx = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_euler("ZYX")
    return zyx[:, ::-1].reshape(R.shape[:-2] + (3,))


def delta_to_transform(d: PoseDelta) -> Pose:
    if not isinstance(d, PoseDelta):
        d = PoseDelta.from_vector(d)
    return Pose(euler_to_matrix(d.phi), d.v.copy())


def transform_to_delta(T: Pose) -> PoseDelta:
    return PoseDelta(matrix_to_euler(T.R), T.t.copy())


def compose(p: Pose, T: Pose) -> Pose:
    return Pose._trusted(p.R @ T.R, p.R @ T.t + p.t)


def relative(p: Pose, q: Pose) -> Pose:
    """The transform ``T`` with ``p @ T == q``."""
    return compose(p.inverse(), q)


def integrate(p0: Pose, deltas: Sequence, timestamps=None) -> Trajectory:
    poses = [p0]
    for d in deltas:
        poses.append(compose(poses[-1], delta_to_transform(d)))
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=float)
    return Trajectory(poses, timestamps)


def trajectory_to_deltas(traj: Trajectory) -> np.ndarray:
    """Per-step deltas ``T_{t->t+1}`` of a trajectory, shape (T-1, 6)."""
    out = [transform_to_delta(relative(a, b)).as_vector()
           for a, b in zip(traj.poses[:-1], traj.poses[1:])]
    return np.array(out).reshape(-1, 6)


def _as_delta_array(deltas) -> np.ndarray:
    if isinstance(deltas, np.ndarray):
        arr = deltas.astype(float)
    else:
        arr = np.array([d.as_vector() if isinstance(d, PoseDelta) else np.asarray(d, float)
                        for d in deltas], dtype=float)
    return arr.reshape(-1, 6)


def pose_rmse(pred, gt) -> tuple[float, float]:
    """Translation and rotation RMSE over per-step deltas (Euler-component differences)."""
    pred = _as_delta_array(pred)
    gt = _as_delta_array(gt)
    if len(pred) == 0 or len(pred) != len(gt):
        raise GeometryError(f"need equal nonempty lengths, got {len(pred)} and {len(gt)}")
    err = pred - gt
    t_rmse = float(np.sqrt(np.mean(np.sum(err[:, 3:] ** 2, axis=1))))
    r_rmse = float(np.sqrt(np.mean(np.sum(err[:, :3] ** 2, axis=1))))
    return t_rmse, r_rmse


def posewise_errors(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    """Per-pose translation and rotation error norms."""
    err = _as_delta_array(pred) - _as_delta_array(gt)
    return np.linalg.norm(err[:, 3:], axis=1), np.linalg.norm(err[:, :3], axis=1)


class RelativeErrors(NamedTuple):
    """KITTI-style relative errors; ``t_rel``/``r_rel`` are ``None`` when no segment fits."""
    t_rel: float | None
    r_rel: float | None
    n_segments: int

    @property
    def valid(self) -> bool:
        return self.n_segments > 0


def _rotation_angle(R: np.ndarray) -> float:
    # atan2 form stays accurate near 0 and pi, unlike arccos of the trace
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, 0.5 * (np.trace(R) - 1.0)))


def relative_errors(pred: Trajectory, gt: Trajectory,
                    lengths: Sequence[float] = SEGMENT_LENGTHS) -> RelativeErrors:
    """Segment errors over 100..800 m of ground-truth arc length.

    Every frame is a segment start. A segment ends at the first frame whose
    arc length reaches ``start + L``. ``t_rel`` is in percent, ``r_rel`` in
    degrees per 100 m.
    """
    if len(pred) != len(gt):
        raise GeometryError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(gt) < 2:
        raise GeometryError("need at least two poses")
    P = pred.matrices()
    G = gt.matrices()
    steps = np.linalg.norm(np.diff(G[:, :3, 3], axis=0), axis=1)
    dist = np.concatenate([[0.0], np.cumsum(steps)])

    def rel(M, a, b):
        R = M[a, :3, :3].T
        return R @ M[b, :3, :3], R @ (M[b, :3, 3] - M[a, :3, 3])

    t_errs, r_errs = [], []
    for first in range(len(G)):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(G):
                continue
            Rg, tg = rel(G, first, last)
            Rp, tp = rel(P, first, last)
            # error transform inv(d_pred) @ d_gt = [Rp^T Rg | Rp^T (tg - tp)]
            t_errs.append(np.linalg.norm(tg - tp) / L)
            r_errs.append(_rotation_angle(Rp.T @ Rg) / L)
    if not t_errs:
        return RelativeErrors(None, None, 0)
    t_rel = float(np.mean(t_errs)) * 100.0
    r_rel = float(np.degrees(np.mean(r_errs))) * 100.0
    return RelativeErrors(t_rel, r_rel, len(t_errs))


# KITTI pose text format: one row-major 3x4 [R | t] per line.

def format_kitti_line(p: Pose) -> str:
    return " ".join(f"{x:.17g}" for x in p.as_matrix()[:3, :].reshape(-1))


def parse_kitti_line(line: str, lineno: int = 1) -> Pose:
    parts = line.split()
    if len(parts) != 12:
        raise KittiFormatError(f"line {lineno}: expected 12 values, got {len(parts)}", lineno)
    try:
        vals = np.array([float(x) for x in parts])
    except ValueError as exc:
        raise KittiFormatError(f"line {lineno}: {exc}", lineno) from None
    M = vals.reshape(3, 4)
    R = M[:, :3]
    # published KITTI poses carry ~1e-6 rounding, so the check here is looser
    if (not np.all(np.isfinite(vals)) or np.max(np.abs(R.T @ R - np.eye(3))) > 1e-4
            or abs(np.linalg.det(R) - 1.0) > 1e-4):
        raise KittiFormatError(f"line {lineno}: not a rigid transform", lineno)
    return Pose._trusted(R, M[:, 3])


class KittiFormatError(ValueError):
    def __init__(self, message: str, lineno: int):
        super().__init__(message)
        self.lineno = lineno


def read_kitti_poses(path, timestamps=None) -> Trajectory:
    lines = [ln for ln in Path(path).read_text().splitlines()]
    poses = [parse_kitti_line(ln, i + 1) for i, ln in enumerate(lines) if ln.strip()]
    if not poses:
        raise KittiFormatError(f"{path}: no poses", 0)
    if timestamps is None:
        timestamps = np.arange(len(poses), dtype=float)
    return Trajectory(poses, timestamps)


def write_kitti_poses(path, traj: Trajectory) -> None:
    text = "\n".join(format_kitti_line(p) for p in traj.poses) + "\n"
    Path(path).write_text(text)
