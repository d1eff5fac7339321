"""Sensor/frame data model and the binary frame-stream file format.

File layout (all integers little-endian):

    magic    4 bytes   ``SLMF``
    version  u16       currently 1
    count    u16       number of sensors
    per sensor:
        sensor_id  u32
        kind       u8    0=CameraRGB 1=CameraGrey 2=CameraDepth
                         3=Lidar 4=IMU 5=GroundTruth
        name_len   u16, then UTF-8 name bytes
        meta_len   u32, then JSON bytes
    frame records until EOF:
        sensor_id     u32
        timestamp_ns  u64    nanoseconds since sequence start
        payload_len   u32
        payload       kind-specific, see below

Payload encodings:

    camera image  u32 width, u32 height, u8 channels, row-major 8-bit pixels
    depth image   u32 width, u32 height, u16 millimeters per pixel
    point cloud   u32 n, then n * (x, y, z, intensity) as f32
    imu           gyro xyz then accel xyz as 6 * f64
    ground truth  translation xyz as 3 * f64, quaternion wxyz as 4 * f64

Timestamps must be non-decreasing across the stream. Readers assign each
frame a ``seq_index`` (0-based stream position) and validate payloads
against the sensor table. All types in this module are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator, Union

import numpy as np

from .errors import (
    CorruptStreamError,
    EmptyTrajectoryError,
    FormatError,
    NoOverlapError,
    SchemaError,
)

MAGIC = b"SLMF"
FORMAT_VERSION = 1

# Greedy nearest-neighbour association gap bound, 20 ms.
DEFAULT_MAX_GAP_NS = 20_000_000


class SensorKind(enum.IntEnum):
    CAMERA_RGB = 0
    CAMERA_GREY = 1
    CAMERA_DEPTH = 2
    LIDAR = 3
    IMU = 4
    GROUND_TRUTH = 5


IMAGE_KINDS = (SensorKind.CAMERA_RGB, SensorKind.CAMERA_GREY)


@dataclass(frozen=True)
class SensorSpec:
    """One entry of the dataset sensor table.

    ``metadata`` is free-form JSON text (intrinsics, rates, ...) that the
    harness carries around but never interprets. It must parse as JSON so
    it can be embedded into the runner's INIT message.
    """

    sensor_id: int
    kind: SensorKind
    name: str
    metadata: str = "{}"

    def __post_init__(self):
        if not 0 <= self.sensor_id <= 0xFFFFFFFF:
            raise ValueError(f"sensor_id {self.sensor_id} outside u32 range")
        if not self.name:
            raise ValueError("sensor name must be non-empty")
        try:
            json.loads(self.metadata)
        except json.JSONDecodeError as exc:
            raise ValueError(f"sensor metadata is not valid JSON: {exc}") from exc
        object.__setattr__(self, "kind", SensorKind(self.kind))


@dataclass(frozen=True)
class ImageBuffer:
    """8-bit row-major image, 1 (grey) or 3 (RGB) channels."""

    width: int
    height: int
    channels: int
    pixels: bytes

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError(f"unsupported channel count {self.channels}")
        expected = self.width * self.height * self.channels
        if len(self.pixels) != expected:
            raise ValueError(
                f"pixel buffer has {len(self.pixels)} bytes, expected {expected}"
            )

    def to_array(self) -> np.ndarray:
        """Read-only (height, width, channels) uint8 view of the pixels."""
        arr = np.frombuffer(self.pixels, dtype=np.uint8)
        return arr.reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.dtype != np.uint8:
            raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
        h, w, c = arr.shape
        return cls(width=w, height=h, channels=c, pixels=arr.tobytes())


@dataclass(frozen=True)
class DepthBuffer:
    """16-bit depth image, one millimeter value per pixel."""

    width: int
    height: int
    depth_mm: bytes  # little-endian u16 per pixel, row-major

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("depth dimensions must be >= 1")
        expected = 2 * self.width * self.height
        if len(self.depth_mm) != expected:
            raise ValueError(
                f"depth buffer has {len(self.depth_mm)} bytes, expected {expected}"
            )

    def to_array(self) -> np.ndarray:
        arr = np.frombuffer(self.depth_mm, dtype="<u2")
        return arr.reshape(self.height, self.width)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """(n, 4) float32 points: x, y, z in meters plus intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype="<f4")
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"expected (n, 4) points, got shape {self.points.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class ImuSample:
    gyro: tuple[float, float, float]  # rad/s
    accel: tuple[float, float, float]  # m/s^2

    def __post_init__(self):
        object.__setattr__(self, "gyro", tuple(float(v) for v in self.gyro))
        object.__setattr__(self, "accel", tuple(float(v) for v in self.accel))
        if len(self.gyro) != 3 or len(self.accel) != 3:
            raise ValueError("gyro and accel must be 3-vectors")
        if not all(math.isfinite(v) for v in (*self.gyro, *self.accel)):
            raise ValueError("imu sample contains non-finite values")


@dataclass(frozen=True)
class Pose:
    """Rigid-body pose: translation in meters, unit quaternion (w, x, y, z).

    The quaternion is normalized on construction; a zero or non-finite
    quaternion is rejected.
    """

    timestamp_ns: int
    translation: tuple[float, float, float]
    rotation: tuple[float, float, float, float]

    def __post_init__(self):
        trans = tuple(float(v) for v in self.translation)
        quat = tuple(float(v) for v in self.rotation)
        if len(trans) != 3 or len(quat) != 4:
            raise ValueError("translation must be a 3-vector, rotation a quaternion")
        if not all(math.isfinite(v) for v in (*trans, *quat)):
            raise ValueError("pose contains non-finite values")
        norm = math.sqrt(sum(v * v for v in quat))
        if norm == 0.0:
            raise ValueError("zero quaternion cannot be normalized")
        # Normalize only when actually off-unit: renormalizing an already
        # unit quaternion would perturb its last bits and break byte-exact
        # round trips.
        if abs(norm - 1.0) > 1e-9:
            quat = tuple(v / norm for v in quat)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "rotation", quat)

    def translation_array(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)


Payload = Union[ImageBuffer, DepthBuffer, PointCloud, ImuSample, Pose]

_PAYLOAD_TYPE_FOR_KIND = {
    SensorKind.CAMERA_RGB: ImageBuffer,
    SensorKind.CAMERA_GREY: ImageBuffer,
    SensorKind.CAMERA_DEPTH: DepthBuffer,
    SensorKind.LIDAR: PointCloud,
    SensorKind.IMU: ImuSample,
    SensorKind.GROUND_TRUTH: Pose,
}


@dataclass(frozen=True)
class Frame:
    """One timestamped sensor reading inside a sequential stream."""

    sensor_id: int
    timestamp_ns: int
    payload: Payload
    seq_index: int = 0  # stream position, assigned by the reader


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered, strictly increasing sequence of poses."""

    poses: tuple[Pose, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(self.poses) < 1:
            raise ValueError("trajectory must contain at least one pose")
        for a, b in zip(self.poses, self.poses[1:]):
            if b.timestamp_ns <= a.timestamp_ns:
                raise ValueError(
                    f"trajectory timestamps not strictly increasing at {b.timestamp_ns}"
                )

    def __len__(self) -> int:
        return len(self.poses)

    def timestamps(self) -> np.ndarray:
        return np.asarray([p.timestamp_ns for p in self.poses], dtype=np.int64)

    def translations(self) -> np.ndarray:
        return np.asarray([p.translation for p in self.poses], dtype=np.float64)


# ---------------------------------------------------------------------------
# Payload encoding/decoding
# ---------------------------------------------------------------------------


def encode_payload(kind: SensorKind, payload: Payload) -> bytes:
    """Serialize ``payload`` in the layout mandated by ``kind``."""
    expected_type = _PAYLOAD_TYPE_FOR_KIND[kind]
    if not isinstance(payload, expected_type):
        raise SchemaError(
            f"payload type {type(payload).__name__} does not match sensor kind {kind.name}"
        )
    if kind in IMAGE_KINDS:
        img: ImageBuffer = payload
        want = 3 if kind == SensorKind.CAMERA_RGB else 1
        if img.channels != want:
            raise SchemaError(
                f"{kind.name} requires {want} channel(s), image has {img.channels}"
            )
        head = struct.pack("<IIB", img.width, img.height, img.channels)
        return head + img.pixels
    if kind == SensorKind.CAMERA_DEPTH:
        dep: DepthBuffer = payload
        return struct.pack("<II", dep.width, dep.height) + dep.depth_mm
    if kind == SensorKind.LIDAR:
        pc: PointCloud = payload
        return struct.pack("<I", pc.points.shape[0]) + pc.points.tobytes()
    if kind == SensorKind.IMU:
        imu: ImuSample = payload
        return struct.pack("<6d", *imu.gyro, *imu.accel)
    if kind == SensorKind.GROUND_TRUTH:
        pose: Pose = payload
        return struct.pack("<7d", *pose.translation, *pose.rotation)
    raise SchemaError(f"unknown sensor kind {kind}")


def decode_payload(
    kind: SensorKind, data: bytes, timestamp_ns: int, offset: int
) -> Payload:
    """Parse a payload body according to the sensor kind.

    ``offset`` is the byte offset of the enclosing record, used in error
    messages. Size inconsistencies raise :class:`CorruptStreamError`;
    contents that contradict the sensor kind raise :class:`SchemaError`.
    """
    if kind in IMAGE_KINDS:
        if len(data) < 9:
            raise CorruptStreamError("image payload shorter than its header", offset)
        width, height, channels = struct.unpack_from("<IIB", data)
        if width < 1 or height < 1:
            raise SchemaError(f"image with empty dimensions {width}x{height}")
        want = 3 if kind == SensorKind.CAMERA_RGB else 1
        if channels != want:
            raise SchemaError(
                f"{kind.name} frame declares {channels} channel(s), expected {want}"
            )
        if len(data) != 9 + width * height * channels:
            raise CorruptStreamError(
                f"image payload length {len(data)} does not match "
                f"{width}x{height}x{channels}",
                offset,
            )
        return ImageBuffer(width, height, channels, data[9:])
    if kind == SensorKind.CAMERA_DEPTH:
        if len(data) < 8:
            raise CorruptStreamError("depth payload shorter than its header", offset)
        width, height = struct.unpack_from("<II", data)
        if width < 1 or height < 1:
            raise SchemaError(f"depth image with empty dimensions {width}x{height}")
        if len(data) != 8 + 2 * width * height:
            raise CorruptStreamError(
                f"depth payload length {len(data)} does not match {width}x{height}",
                offset,
            )
        return DepthBuffer(width, height, data[8:])
    if kind == SensorKind.LIDAR:
        if len(data) < 4:
            raise CorruptStreamError("point cloud payload shorter than its header", offset)
        (count,) = struct.unpack_from("<I", data)
        if len(data) != 4 + 16 * count:
            raise CorruptStreamError(
                f"point cloud payload length {len(data)} does not match n={count}",
                offset,
            )
        points = np.frombuffer(data, dtype="<f4", offset=4).reshape(count, 4)
        if not np.isfinite(points).all():
            raise SchemaError("point cloud contains non-finite values")
        return PointCloud(points)
    if kind == SensorKind.IMU:
        if len(data) != 48:
            raise CorruptStreamError(
                f"imu payload is {len(data)} bytes, expected 48", offset
            )
        values = struct.unpack("<6d", data)
        if not all(math.isfinite(v) for v in values):
            raise SchemaError("imu sample contains non-finite values")
        return ImuSample(values[:3], values[3:])
    if kind == SensorKind.GROUND_TRUTH:
        if len(data) != 56:
            raise CorruptStreamError(
                f"ground-truth payload is {len(data)} bytes, expected 56", offset
            )
        values = struct.unpack("<7d", data)
        if not all(math.isfinite(v) for v in values):
            raise SchemaError("ground-truth pose contains non-finite values")
        if all(v == 0.0 for v in values[3:]):
            raise SchemaError("ground-truth pose carries a zero quaternion")
        return Pose(timestamp_ns, values[:3], values[3:])
    raise SchemaError(f"unknown sensor kind {kind}")


def encode_frame_record(kind: SensorKind, frame: Frame) -> bytes:
    payload = encode_payload(kind, frame.payload)
    head = struct.pack("<IQI", frame.sensor_id, frame.timestamp_ns, len(payload))
    return head + payload


# ---------------------------------------------------------------------------
# Writer / reader
# ---------------------------------------------------------------------------


def _encode_sensor_table(sensors: Iterable[SensorSpec]) -> bytes:
    sensors = list(sensors)
    seen = set()
    for spec in sensors:
        if spec.sensor_id in seen:
            raise SchemaError(f"duplicate sensor_id {spec.sensor_id}")
        seen.add(spec.sensor_id)
    out = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(sensors))]
    for spec in sensors:
        name = spec.name.encode("utf-8")
        meta = spec.metadata.encode("utf-8")
        out.append(struct.pack("<IBH", spec.sensor_id, int(spec.kind), len(name)))
        out.append(name)
        out.append(struct.pack("<I", len(meta)))
        out.append(meta)
    return b"".join(out)


def write_dataset(
    target: Union[str, BinaryIO],
    sensors: Iterable[SensorSpec],
    frames: Iterable[Frame],
) -> int:
    """Stream ``frames`` to ``target`` in the dataset file format.

    Frames are validated (known sensor, matching payload kind,
    non-decreasing timestamps) and written one record at a time, so the
    iterable is never buffered in full. Returns the number of frames
    written.
    """
    if isinstance(target, str):
        with open(target, "wb") as fh:
            return write_dataset(fh, sensors, frames)

    sensors = list(sensors)
    kind_of = {s.sensor_id: s.kind for s in sensors}
    target.write(_encode_sensor_table(sensors))

    last_ts = None
    count = 0
    for index, frame in enumerate(frames):
        kind = kind_of.get(frame.sensor_id)
        if kind is None:
            raise SchemaError(f"frame {index}: unknown sensor_id {frame.sensor_id}")
        if last_ts is not None and frame.timestamp_ns < last_ts:
            raise SchemaError(
                f"frame {index}: timestamp {frame.timestamp_ns} regresses "
                f"below {last_ts}"
            )
        last_ts = frame.timestamp_ns
        target.write(encode_frame_record(kind, frame))
        count += 1
    return count


def _read_exact(fh: BinaryIO, n: int, what: str, offset: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptStreamError(f"truncated {what}", offset)
    return data


def read_sensor_table(fh: BinaryIO) -> tuple[list[SensorSpec], int]:
    """Parse the header; returns (sensors, offset of the first frame record)."""
    magic = fh.read(4)
    if len(magic) < 4 or magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    head = _read_exact(fh, 4, "header", 4)
    version, sensor_count = struct.unpack("<HH", head)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    offset = 8
    sensors = []
    seen = set()
    for _ in range(sensor_count):
        entry_start = offset
        head = _read_exact(fh, 7, "sensor entry", entry_start)
        sensor_id, kind_code, name_len = struct.unpack("<IBH", head)
        offset += 7
        try:
            kind = SensorKind(kind_code)
        except ValueError:
            raise SchemaError(f"unknown sensor kind code {kind_code}") from None
        name = _read_exact(fh, name_len, "sensor name", entry_start)
        offset += name_len
        meta_head = _read_exact(fh, 4, "sensor entry", entry_start)
        (meta_len,) = struct.unpack("<I", meta_head)
        offset += 4
        meta = _read_exact(fh, meta_len, "sensor metadata", entry_start)
        offset += meta_len
        if sensor_id in seen:
            raise SchemaError(f"duplicate sensor_id {sensor_id}")
        seen.add(sensor_id)
        try:
            spec = SensorSpec(
                sensor_id, kind, name.decode("utf-8"), meta.decode("utf-8")
            )
        except (ValueError, UnicodeDecodeError) as exc:
            raise SchemaError(f"invalid sensor entry {sensor_id}: {exc}") from None
        sensors.append(spec)
    return sensors, offset


def _iter_frames(fh: BinaryIO, kind_of: dict[int, SensorKind], offset: int) -> Iterator[Frame]:
    last_ts = None
    seq_index = 0
    try:
        while True:
            record_start = offset
            head = fh.read(16)
            if not head:
                return
            if len(head) < 16:
                raise CorruptStreamError("truncated frame header", record_start)
            sensor_id, timestamp_ns, payload_len = struct.unpack("<IQI", head)
            offset += 16
            payload_bytes = fh.read(payload_len)
            if len(payload_bytes) < payload_len:
                raise CorruptStreamError("truncated frame payload", record_start)
            offset += payload_len
            kind = kind_of.get(sensor_id)
            if kind is None:
                raise SchemaError(
                    f"frame {seq_index}: unknown sensor_id {sensor_id}"
                )
            if last_ts is not None and timestamp_ns < last_ts:
                raise SchemaError(
                    f"frame {seq_index}: timestamp {timestamp_ns} regresses "
                    f"below {last_ts}"
                )
            last_ts = timestamp_ns
            payload = decode_payload(kind, payload_bytes, timestamp_ns, record_start)
            yield Frame(sensor_id, timestamp_ns, payload, seq_index)
            seq_index += 1
    finally:
        fh.close()


def open_dataset(path: str) -> tuple[list[SensorSpec], Iterator[Frame]]:
    """Open a dataset file; returns (sensor table, lazy frame iterator).

    The iterator owns the file handle and closes it when exhausted or
    closed. Frames come back in file order with ``seq_index`` assigned
    0, 1, 2, ...
    """
    fh = open(path, "rb")
    try:
        sensors, offset = read_sensor_table(fh)
    except Exception:
        fh.close()
        raise
    kind_of = {s.sensor_id: s.kind for s in sensors}
    return sensors, _iter_frames(fh, kind_of, offset)


def read_all(path: str) -> tuple[list[SensorSpec], list[Frame]]:
    sensors, frames = open_dataset(path)
    return sensors, list(frames)


@dataclass(frozen=True)
class DatasetStats:
    sensors: tuple[SensorSpec, ...]
    frame_counts: dict[int, int]
    total_frames: int
    first_timestamp_ns: int | None
    last_timestamp_ns: int | None

    @property
    def duration_ns(self) -> int:
        if self.first_timestamp_ns is None:
            return 0
        return self.last_timestamp_ns - self.first_timestamp_ns


def scan_dataset(path: str) -> DatasetStats:
    """Single pass over a dataset collecting counts and the time span."""
    sensors, frames = open_dataset(path)
    counts = {s.sensor_id: 0 for s in sensors}
    first_ts = None
    last_ts = None
    total = 0
    for frame in frames:
        counts[frame.sensor_id] += 1
        if first_ts is None:
            first_ts = frame.timestamp_ns
        last_ts = frame.timestamp_ns
        total += 1
    return DatasetStats(tuple(sensors), counts, total, first_ts, last_ts)


# ---------------------------------------------------------------------------
# Trajectory assembly and association
# ---------------------------------------------------------------------------


def extract_ground_truth(frames: Iterable[Frame]) -> Trajectory:
    """Collect all ground-truth poses of a stream, in stream order."""
    poses = [f.payload for f in frames if isinstance(f.payload, Pose)]
    if not poses:
        raise EmptyTrajectoryError("stream contains no ground-truth frames")
    try:
        return Trajectory(tuple(poses))
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def trajectory_length(trajectory: Trajectory) -> float:
    """Sum of Euclidean distances between consecutive poses, in meters."""
    points = trajectory.translations()
    if len(points) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(points, axis=0), axis=1).sum())


def associate(
    estimate: Trajectory,
    reference: Trajectory,
    max_gap_ns: int | None = DEFAULT_MAX_GAP_NS,
) -> list[tuple[int, int]]:
    """Match estimate poses to reference poses by timestamp.

    Candidate pairs within ``max_gap_ns`` are accepted greedily in order
    of ascending time difference, using each estimate and each reference
    index at most once. Returns (index_est, index_ref) pairs sorted by
    estimate index. ``max_gap_ns=None`` means unbounded.
    """
    est_ts = estimate.timestamps()
    ref_ts = reference.timestamps()
    candidates = []
    if max_gap_ns is None:
        for i, te in enumerate(est_ts):
            for j, tr in enumerate(ref_ts):
                candidates.append((abs(int(te) - int(tr)), i, j))
    else:
        lo = np.searchsorted(ref_ts, est_ts - max_gap_ns, side="left")
        hi = np.searchsorted(ref_ts, est_ts + max_gap_ns, side="right")
        for i, te in enumerate(est_ts):
            for j in range(int(lo[i]), int(hi[i])):
                gap = abs(int(te) - int(ref_ts[j]))
                if gap <= max_gap_ns:
                    candidates.append((gap, i, j))
    candidates.sort()
    used_est: set[int] = set()
    used_ref: set[int] = set()
    pairs = []
    for _, i, j in candidates:
        if i in used_est or j in used_ref:
            continue
        used_est.add(i)
        used_ref.add(j)
        pairs.append((i, j))
    if not pairs:
        raise NoOverlapError(
            f"no estimate/reference pairs within {max_gap_ns} ns of each other"
        )
    pairs.sort()
    return pairs
