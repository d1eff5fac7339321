import sys

import numpy as np
import pytest

from slamprobe.dataset import (
    Frame,
    ImageBuffer,
    ImuSample,
    PointCloud,
    Pose,
    SensorKind,
    SensorSpec,
    Trajectory,
)

ORACLE_CMD = [sys.executable, "-m", "slamprobe.mocks", "oracle"]
NOISY_CMD = [sys.executable, "-m", "slamprobe.mocks", "noisy"]
SCRIPTED_CMD = [sys.executable, "-m", "slamprobe.mocks", "scripted"]


def all_sensor_specs():
    return [
        SensorSpec(0, SensorKind.CAMERA_RGB, "rgb", '{"fps": 10}'),
        SensorSpec(1, SensorKind.CAMERA_GREY, "grey"),
        SensorSpec(2, SensorKind.CAMERA_DEPTH, "depth"),
        SensorSpec(3, SensorKind.LIDAR, "lidar"),
        SensorSpec(4, SensorKind.IMU, "imu"),
        SensorSpec(5, SensorKind.GROUND_TRUTH, "gt"),
    ]


def random_payload(rng: np.random.Generator, kind: SensorKind, timestamp_ns: int):
    if kind in (SensorKind.CAMERA_RGB, SensorKind.CAMERA_GREY):
        channels = 3 if kind == SensorKind.CAMERA_RGB else 1
        w = int(rng.integers(1, 9))
        h = int(rng.integers(1, 9))
        pixels = rng.integers(0, 256, size=h * w * channels, dtype=np.uint8)
        return ImageBuffer(w, h, channels, pixels.tobytes())
    if kind == SensorKind.CAMERA_DEPTH:
        w = int(rng.integers(1, 9))
        h = int(rng.integers(1, 9))
        depth = rng.integers(0, 65536, size=h * w, dtype=np.uint16)
        return DepthBufferFactory(w, h, depth)
    if kind == SensorKind.LIDAR:
        n = int(rng.integers(0, 16))
        points = rng.normal(0, 5, size=(n, 4)).astype(np.float32)
        return PointCloud(points)
    if kind == SensorKind.IMU:
        return ImuSample(tuple(rng.normal(0, 1, 3)), tuple(rng.normal(0, 9.8, 3)))
    if kind == SensorKind.GROUND_TRUTH:
        return random_pose(rng, timestamp_ns)
    raise AssertionError(kind)


def DepthBufferFactory(w, h, depth):
    from slamprobe.dataset import DepthBuffer

    return DepthBuffer(w, h, np.ascontiguousarray(depth, dtype="<u2").tobytes())


def random_pose(rng: np.random.Generator, timestamp_ns: int) -> Pose:
    quat = rng.normal(0, 1, 4)
    quat /= np.linalg.norm(quat)
    return Pose(timestamp_ns, tuple(rng.normal(0, 3, 3)), tuple(quat))


def random_dataset(rng: np.random.Generator, n_frames=None):
    """(sensors, frames) with seq_index already matching reader assignment."""
    sensors = all_sensor_specs()
    if n_frames is None:
        n_frames = int(rng.integers(0, 25))
    frames = []
    ts = 0
    for seq in range(n_frames):
        ts += int(rng.integers(0, 5_000_000))  # non-decreasing, repeats allowed
        spec = sensors[int(rng.integers(0, len(sensors)))]
        payload = random_payload(rng, spec.kind, ts)
        frames.append(Frame(spec.sensor_id, ts, payload, seq))
    return sensors, frames


def random_trajectory(rng: np.random.Generator, n=10, step_ns=100_000_000) -> Trajectory:
    poses = []
    ts = 0
    for _ in range(n):
        ts += step_ns
        poses.append(random_pose(rng, ts))
    return Trajectory(tuple(poses))


def grey_image(values) -> ImageBuffer:
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim == 1:
        arr = arr[np.newaxis, :]
    return ImageBuffer(arr.shape[1], arr.shape[0], 1, arr.tobytes())


def random_rigid_transform(rng: np.random.Generator):
    from slamprobe.trajectory_metrics import RigidTransform

    quat = rng.normal(0, 1, 4)
    quat /= np.linalg.norm(quat)
    return RigidTransform(tuple(quat), tuple(rng.normal(0, 5, 3)))


def transform_trajectory(trajectory: Trajectory, transform) -> Trajectory:
    """Apply a global rigid transform to every pose of a trajectory."""
    from slamprobe.trajectory_metrics import matrix_to_quat, pose_matrix, quat_to_matrix

    r = quat_to_matrix(transform.rotation)
    t = np.asarray(transform.translation)
    poses = []
    for pose in trajectory.poses:
        m = pose_matrix(pose)
        new_rot = r @ m[:3, :3]
        new_trans = r @ m[:3, 3] + t
        poses.append(Pose(pose.timestamp_ns, tuple(new_trans), matrix_to_quat(new_rot)))
    return Trajectory(tuple(poses))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
