import numpy as np
import pytest
from PIL import Image
from scipy.spatial.transform import Rotation

from litevio.geometry import Pose, Trajectory, euler_to_matrix, read_kitti_poses, write_kitti_poses
from litevio.sensorsim import (
    GRAVITY, SceneConfig, StreamError, generate_stream, generate_trajectory, load_kitti_sequence,
    load_stream, render_frames, save_stream, synthesize_imu, window,
)

QUIET = dict(gyro_bias_std=0, accel_bias_std=0, gyro_noise_std=0, accel_noise_std=0)


def test_trajectory_determinism():
    a = generate_trajectory(SceneConfig(seed=3, T=50))
    b = generate_trajectory(SceneConfig(seed=3, T=50))
    assert np.array_equal(a.matrices(), b.matrices())
    c = generate_trajectory(SceneConfig(seed=4, T=50))
    assert not np.array_equal(a.matrices(), c.matrices())


def test_zero_yaw_rate_keeps_heading():
    traj = generate_trajectory(SceneConfig(seed=1, T=60, max_yaw_rate=0.0))
    for p in traj.poses:
        assert np.array_equal(p.R, traj[0].R)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_speed_bound_by_differencing(seed):
    cfg = SceneConfig(seed=seed, T=300, max_speed=8.0)
    traj = generate_trajectory(cfg)
    pos = traj.positions()
    speeds = [np.linalg.norm(pos[i + 1] - pos[i]) / cfg.frame_period for i in range(len(pos) - 1)]
    assert max(speeds) <= cfg.max_speed
    assert min(speeds) > 0


def test_degenerate_bounds_rejected():
    with pytest.raises(ValueError):
        generate_trajectory(SceneConfig(max_speed=0.0, max_yaw_rate=0.0))


def _line(steps, T=2):
    poses = [Pose(euler_to_matrix([0, 0, 0.3]), [s * np.cos(0.3), s * np.sin(0.3), 0])
             for s in np.arange(T) * steps]
    return Trajectory(poses, np.arange(T) * 0.1)


def test_static_trajectory_renders_identical_frames():
    cfg = SceneConfig(seed=2, T=4)
    frames = render_frames(_line(0.0, 4), cfg)
    assert all(np.array_equal(frames[0], f) for f in frames[1:])
    assert frames.min() >= 0 and frames.max() <= 1


def test_render_determinism():
    cfg = SceneConfig(seed=5, T=6)
    traj = generate_trajectory(cfg)
    assert np.array_equal(render_frames(traj, cfg), render_frames(traj, cfg))


def test_larger_step_larger_frame_difference():
    cfg = SceneConfig(seed=0, T=2)
    diffs = []
    for step in np.linspace(0.05, 0.95, 10):
        f = render_frames(_line(step), cfg)
        diffs.append(np.mean(np.abs(f[1] - f[0])))
    assert all(b > a for a, b in zip(diffs, diffs[1:]))


def test_imu_constant_velocity_reads_zero():
    cfg = SceneConfig(T=20, gravity=False, **QUIET)
    imu = synthesize_imu(_line(1.2, 20), cfg)
    assert imu.shape == (19, cfg.r_imu, 6)
    assert np.max(np.abs(imu)) < 1e-9


def test_imu_constant_yaw_rate():
    w = 0.4
    cfg = SceneConfig(T=30, gravity=False, **QUIET)
    poses = [Pose(euler_to_matrix([0, 0, w * 0.1 * i]), np.zeros(3)) for i in range(30)]
    imu = synthesize_imu(Trajectory(poses, np.arange(30) * 0.1), cfg)
    assert np.max(np.abs(imu[..., 2] - w)) < 1e-6
    assert np.max(np.abs(imu[..., :2])) < 1e-9


def test_imu_dead_reckoning_oracle():
    cfg = SceneConfig(seed=11, T=40, **QUIET)
    traj = generate_trajectory(cfg)
    imu = synthesize_imu(traj, cfg)
    dt = cfg.frame_period / cfg.imu_rate
    k0, n = 5, 20
    pos = traj.positions()
    v = (pos[k0 + 1] - pos[k0 - 1]) / (2 * cfg.frame_period)
    p = pos[k0].copy()
    R = traj[k0].R.copy()
    for t in range(k0, k0 + n):
        w = imu[t]
        for j in range(cfg.imu_rate):
            a0 = R @ w[j, 3:] + GRAVITY
            R1 = R @ Rotation.from_rotvec(0.5 * (w[j, :3] + w[j + 1, :3]) * dt).as_matrix()
            a1 = R1 @ w[j + 1, 3:] + GRAVITY
            p = p + v * dt + (2 * a0 + a1) / 6 * dt ** 2
            v = v + 0.5 * (a0 + a1) * dt
            R = R1
    moved = np.linalg.norm(pos[k0 + n] - pos[k0])
    assert np.linalg.norm(p - pos[k0 + n]) < 0.01 * moved


def test_window_contract():
    s = generate_stream(SceneConfig(seed=1, T=2))
    w = window(s, 0)
    assert w.image_pair.shape[0] == 2 * s.frames.shape[1]
    with pytest.raises(IndexError):
        window(s, 1)


def test_windows_partition_stream():
    s = generate_stream(SceneConfig(seed=1, T=7))
    c = s.frames.shape[1]
    firsts = [window(s, t).image_pair[:c] for t in range(s.T - 1)]
    rebuilt = np.stack(firsts + [window(s, s.T - 2).image_pair[c:]])
    assert np.array_equal(rebuilt, s.frames)


def test_stream_save_load(tmp_path):
    s = generate_stream(SceneConfig(seed=2, T=5))
    back = load_stream(save_stream(s, tmp_path / "s"))
    assert np.array_equal(back.frames, s.frames) and np.array_equal(back.imu, s.imu)
    assert np.array_equal(back.gt.matrices(), s.gt.matrices())


def _kitti_dir(tmp_path, n_img, n_pose, r=3):
    img_dir = tmp_path / "image_2"
    img_dir.mkdir()
    rng = np.random.default_rng(0)
    for i in range(n_img):
        Image.fromarray(rng.integers(0, 255, (20, 40, 3), dtype=np.uint8)).save(img_dir / f"{i:06d}.png")
    traj = generate_trajectory(SceneConfig(seed=0, T=n_pose))
    write_kitti_poses(tmp_path / "poses.txt", traj)
    imu = rng.normal(size=((n_pose - 1) * r, 6))
    np.savetxt(tmp_path / "imu.csv", imu, delimiter=",", header="wx,wy,wz,ax,ay,az", comments="")
    return img_dir, tmp_path / "poses.txt", tmp_path / "imu.csv"


def test_load_kitti_sequence(tmp_path):
    img, poses, imu = _kitti_dir(tmp_path, 4, 4)
    s = load_kitti_sequence(img, poses, imu, r=3, size=(16, 32))
    assert s.frames.shape == (4, 3, 16, 32) and s.imu.shape == (3, 3, 6)
    write_kitti_poses(tmp_path / "again.txt", s.gt)
    assert (tmp_path / "again.txt").read_bytes() == poses.read_bytes()
    assert np.array_equal(read_kitti_poses(poses).matrices(), s.gt.matrices())


def test_load_kitti_count_mismatch(tmp_path):
    img, poses, imu = _kitti_dir(tmp_path, 3, 2)
    with pytest.raises(StreamError):
        load_kitti_sequence(img, poses, imu, r=3)
