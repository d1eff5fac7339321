"""Built-in mock algorithms for end-to-end testing of the harness.

Run as ``python -m slamprobe.mocks <name> [options]``; each mock speaks
the wire protocol on stdin/stdout.

oracle
    Replies to every frame whose timestamp has a ground-truth pose with
    exactly that pose (ground-truth frames must be forwarded to it).
    ``--sleep-ms`` adds a fixed artificial processing delay per frame.

noisy
    Odometry-style test double that reads the clean dataset from disk
    (``--dataset``) for ground truth and per-frame baseline image
    metrics. It integrates ground-truth relative motion plus zero-mean
    Gaussian translation noise of scale sigma * q(frame), where q grows
    as the received frame's brightness deviates from its clean baseline
    or its sharpness falls. Sustained bad image quality (brightness
    outside [--theta-b-low, --theta-b-high], contrast below
    --theta-contrast, or sharpness below --theta-sharpness for
    --lost-after consecutive frames) freezes the pose and reports Lost.
    When the ground-truth position revisits an earlier location and all
    three image metrics differ by less than --theta-loop percent, it
    emits a loop_closure EVENT naming both frames. Noise draws are keyed
    by (seed, frame timestamp), so replays and restarts are bit-stable.

scripted
    Obedient echo that misbehaves on cue: at camera frame ``--at-frame``
    it crashes, emits garbage/truncated/oversize/unknown-type bytes, or
    goes silent (``--mode``). ``--at-frame -1`` fires the fault in place
    of the READY handshake. Used by protocol-robustness tests.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import protocol
from .dataset import ImageBuffer, Pose, SensorKind, open_dataset
from .image_metrics import compute_metrics, percent_difference
from .seeding import derive_seed

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)
ZERO_VEC = (0.0, 0.0, 0.0)


class MockIO:
    """Blocking protocol endpoint over stdin/stdout."""

    def __init__(self):
        self.stdin = sys.stdin.buffer
        self.stdout = sys.stdout.buffer
        self.sensors: dict[int, int] = {}

    def handshake(self) -> None:
        msg = protocol.read_message(self.stdin)
        if msg is None or msg.msg_type != protocol.MSG_INIT:
            raise SystemExit("expected INIT as the first message")
        table = json.loads(msg.payload.decode("utf-8"))
        self.sensors = {s["sensor_id"]: s["kind"] for s in table["sensors"]}
        protocol.write_message(self.stdout, protocol.MSG_READY)

    def frames(self):
        """Yield (sensor_id, kind, timestamp_ns, body) until SHUTDOWN/EOF."""
        while True:
            msg = protocol.read_message(self.stdin)
            if msg is None or msg.msg_type == protocol.MSG_SHUTDOWN:
                return
            if msg.msg_type != protocol.MSG_FRAME:
                raise SystemExit(f"unexpected message type {msg.msg_type:#x}")
            sensor_id, timestamp_ns, body = protocol.decode_frame_payload(msg.payload)
            yield sensor_id, self.sensors.get(sensor_id), timestamp_ns, body

    def send_estimate(self, timestamp_ns, translation, rotation, status) -> None:
        protocol.write_message(
            self.stdout,
            protocol.MSG_ESTIMATE,
            protocol.encode_estimate(timestamp_ns, translation, rotation, status),
        )

    def send_event(self, event: dict) -> None:
        protocol.write_message(
            self.stdout,
            protocol.MSG_EVENT,
            json.dumps(event, sort_keys=True).encode("utf-8"),
        )


def _decode_image(body: bytes, kind: int) -> ImageBuffer | None:
    if kind not in (int(SensorKind.CAMERA_RGB), int(SensorKind.CAMERA_GREY)):
        return None
    from .dataset import decode_payload

    payload = decode_payload(SensorKind(kind), body, 0, 0)
    return payload if isinstance(payload, ImageBuffer) else None


def _decode_pose(body: bytes, timestamp_ns: int) -> Pose:
    from .dataset import decode_payload

    pose = decode_payload(SensorKind.GROUND_TRUTH, body, timestamp_ns, 0)
    assert isinstance(pose, Pose)
    return pose


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def run_oracle(args) -> None:
    io = MockIO()
    io.handshake()
    poses: dict[int, Pose] = {}
    for sensor_id, kind, timestamp_ns, body in io.frames():
        if kind == int(SensorKind.GROUND_TRUTH):
            poses[timestamp_ns] = _decode_pose(body, timestamp_ns)
        if args.sleep_ms > 0:
            time.sleep(args.sleep_ms / 1000.0)
        pose = poses.get(timestamp_ns)
        if pose is None:
            io.send_estimate(
                timestamp_ns, ZERO_VEC, IDENTITY_QUAT, protocol.STATUS_NO_ESTIMATE
            )
        else:
            io.send_estimate(
                timestamp_ns, pose.translation, pose.rotation, protocol.STATUS_OK
            )


# ---------------------------------------------------------------------------
# noisy odometry
# ---------------------------------------------------------------------------


class NoisyOdometry:
    def __init__(self, args):
        self.args = args
        sensors, frames = open_dataset(args.dataset)
        self.gt: dict[int, Pose] = {}
        self.baseline: dict[int, tuple[float, float, float]] = {}
        for frame in frames:
            if isinstance(frame.payload, Pose):
                self.gt[frame.timestamp_ns] = frame.payload
            elif isinstance(frame.payload, ImageBuffer):
                m = compute_metrics(frame.payload)
                self.baseline[frame.timestamp_ns] = (
                    m.brightness,
                    m.contrast,
                    m.tenengrad,
                )
        self.current: Pose | None = None
        self.prev_gt: Pose | None = None
        self.bad_streak = 0
        self.ordinal = 0
        # (ordinal, timestamp_ns, gt position, received metrics)
        self.visited: list[tuple[int, int, np.ndarray, tuple[float, float, float]]] = []

    def quality_factor(self, timestamp_ns: int, metrics) -> float:
        base = self.baseline.get(timestamp_ns)
        if base is None:
            return 1.0
        db = abs(metrics.brightness - base[0])
        dsharp = max(0.0, base[2] - metrics.tenengrad)
        return 1.0 + self.args.q_brightness * db + self.args.q_sharpness * dsharp

    def is_bad(self, metrics) -> bool:
        return (
            metrics.brightness < self.args.theta_b_low
            or metrics.brightness > self.args.theta_b_high
            or metrics.contrast < self.args.theta_contrast
            or metrics.tenengrad < self.args.theta_sharpness
        )

    def noise(self, timestamp_ns: int, scale: float) -> np.ndarray:
        rng = np.random.Generator(
            np.random.PCG64(derive_seed(self.args.seed, "noise", timestamp_ns))
        )
        return scale * rng.normal(0.0, 1.0, size=3)

    def find_loop(self, timestamp_ns: int, position: np.ndarray, metrics) -> dict | None:
        min_gap_ns = int(self.args.loop_min_gap_s * 1e9)
        received = (metrics.brightness, metrics.contrast, metrics.tenengrad)
        for ordinal, ts, pos, past in self.visited:
            if timestamp_ns - ts < min_gap_ns:
                continue
            if float(np.linalg.norm(position - pos)) > self.args.loop_radius_m:
                continue
            if all(
                percent_difference(a, b) < self.args.theta_loop
                for a, b in zip(past, received)
            ):
                return {
                    "kind": "loop_closure",
                    "frame_a": ordinal,
                    "frame_b": self.ordinal,
                    "timestamp_a_ns": ts,
                    "timestamp_b_ns": timestamp_ns,
                }
        return None

    def step(self, io: MockIO, timestamp_ns: int, image: ImageBuffer) -> None:
        metrics = compute_metrics(image)
        gt = self.gt.get(timestamp_ns)
        if gt is None:
            io.send_estimate(
                timestamp_ns, ZERO_VEC, IDENTITY_QUAT, protocol.STATUS_NO_ESTIMATE
            )
            self.ordinal += 1
            return

        if self.is_bad(metrics):
            self.bad_streak += 1
        else:
            self.bad_streak = 0
        lost = self.bad_streak >= self.args.lost_after

        if self.current is None:
            # Anchor at the first ground-truth pose, noise-free.
            self.current = Pose(timestamp_ns, gt.translation, gt.rotation)
        elif lost:
            self.current = Pose(timestamp_ns, self.current.translation, self.current.rotation)
        else:
            delta = np.asarray(gt.translation) - np.asarray(self.prev_gt.translation)
            q = self.quality_factor(timestamp_ns, metrics)
            noise = self.noise(timestamp_ns, self.args.sigma * q)
            translation = np.asarray(self.current.translation) + delta + noise
            self.current = Pose(timestamp_ns, tuple(translation), gt.rotation)
        self.prev_gt = gt

        event = self.find_loop(timestamp_ns, np.asarray(gt.translation), metrics)
        if event is not None:
            io.send_event(event)
        self.visited.append(
            (
                self.ordinal,
                timestamp_ns,
                np.asarray(gt.translation),
                (metrics.brightness, metrics.contrast, metrics.tenengrad),
            )
        )
        status = protocol.STATUS_LOST if lost else protocol.STATUS_OK
        io.send_estimate(timestamp_ns, self.current.translation, self.current.rotation, status)
        self.ordinal += 1


def run_noisy(args) -> None:
    odo = NoisyOdometry(args)
    io = MockIO()
    io.handshake()
    for sensor_id, kind, timestamp_ns, body in io.frames():
        image = _decode_image(body, kind)
        if image is None:
            io.send_estimate(
                timestamp_ns, ZERO_VEC, IDENTITY_QUAT, protocol.STATUS_NO_ESTIMATE
            )
            continue
        odo.step(io, timestamp_ns, image)


# ---------------------------------------------------------------------------
# scripted faults
# ---------------------------------------------------------------------------


def _emit_fault(io: MockIO, mode: str) -> None:
    out = io.stdout
    if mode == "crash":
        sys.exit(3)
    if mode == "garbage":
        out.write(b"\x00\x00\x00\x00not-a-message")
        out.flush()
        sys.exit(0)
    if mode == "oversize":
        out.write(b"\xff\xff\xff\xff" + b"\x04")
        out.flush()
        sys.exit(0)
    if mode == "truncate":
        # Claims 100 bytes, delivers 5, then closes the pipe.
        out.write(b"\x64\x00\x00\x00" + b"\x04\x01\x02\x03\x04")
        out.flush()
        sys.exit(0)
    if mode == "unknown-type":
        out.write(b"\x01\x00\x00\x00" + b"\x7f")
        out.flush()
        sys.exit(0)
    if mode == "wrong-ready":
        # A syntactically valid message that is not the expected one.
        protocol.write_message(out, protocol.MSG_EVENT, b'{"kind": "hello"}')
        time.sleep(3600.0)
        sys.exit(0)
    if mode == "silent":
        time.sleep(3600.0)
        sys.exit(0)
    raise SystemExit(f"unknown fault mode {mode!r}")


def run_scripted(args) -> None:
    io = MockIO()
    if args.at_frame == -1:
        msg = protocol.read_message(io.stdin)
        if msg is None or msg.msg_type != protocol.MSG_INIT:
            raise SystemExit("expected INIT")
        _emit_fault(io, args.mode)
        return
    io.handshake()
    count = 0
    for sensor_id, kind, timestamp_ns, body in io.frames():
        if count == args.at_frame:
            _emit_fault(io, args.mode)
        if args.sleep_ms > 0:
            time.sleep(args.sleep_ms / 1000.0)
        io.send_estimate(timestamp_ns, ZERO_VEC, IDENTITY_QUAT, protocol.STATUS_OK)
        count += 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slamprobe.mocks")
    sub = parser.add_subparsers(dest="mock", required=True)

    oracle = sub.add_parser("oracle", help="echo ground-truth poses")
    oracle.add_argument("--sleep-ms", type=float, default=0.0)
    oracle.set_defaults(func=run_oracle)

    noisy = sub.add_parser("noisy", help="noisy odometry with loop events")
    noisy.add_argument("--dataset", required=True)
    noisy.add_argument("--seed", type=int, default=0)
    noisy.add_argument("--sigma", type=float, default=0.01)
    noisy.add_argument("--q-brightness", type=float, default=0.15)
    noisy.add_argument("--q-sharpness", type=float, default=0.1)
    noisy.add_argument("--theta-b-low", type=float, default=20.0)
    noisy.add_argument("--theta-b-high", type=float, default=235.0)
    noisy.add_argument("--theta-contrast", type=float, default=2.0)
    noisy.add_argument("--theta-sharpness", type=float, default=1.0)
    noisy.add_argument("--lost-after", type=int, default=3)
    noisy.add_argument("--theta-loop", type=float, default=40.0)
    noisy.add_argument("--loop-radius-m", type=float, default=0.25)
    noisy.add_argument("--loop-min-gap-s", type=float, default=3.0)
    noisy.set_defaults(func=run_noisy)

    scripted = sub.add_parser("scripted", help="fault injection")
    scripted.add_argument(
        "--mode",
        choices=[
            "crash",
            "garbage",
            "oversize",
            "truncate",
            "unknown-type",
            "wrong-ready",
            "silent",
        ],
        required=True,
    )
    scripted.add_argument("--at-frame", type=int, required=True)
    scripted.add_argument("--sleep-ms", type=float, default=0.0)
    scripted.set_defaults(func=run_scripted)
    return parser


def main(argv=None) -> None:
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
