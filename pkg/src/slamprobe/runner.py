"""Algorithm execution: subprocess isolation, frame streaming, timing.

The algorithm under test runs as a child process speaking the wire
protocol on stdin/stdout (stderr passes through for its own logging).
Exactly one frame is in flight at a time: the host sends FRAME, then
blocks until the matching ESTIMATE arrives, collecting interleaved
EVENTs. Per-frame processing time is the span from frame-send-complete
to estimate arrival, so perturbation work on the host never contaminates
the measurement.

Ground-truth frames are not forwarded to the child unless
``send_ground_truth`` is set (the bundled mocks opt in when they need
it); they never produce run records either way.
"""

from __future__ import annotations

import enum
import json
import queue
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from . import protocol
from .dataset import (
    Frame,
    Pose,
    SensorKind,
    SensorSpec,
    Trajectory,
    encode_payload,
    open_dataset,
)
from .errors import HandshakeError, ProtocolError, SpawnError
from .perturb import Perturber

DEFAULT_HANDSHAKE_TIMEOUT_S = 10.0
DEFAULT_FRAME_TIMEOUT_S = 30.0


class TrackingStatus(enum.Enum):
    OK = "ok"
    LOST = "lost"
    NO_ESTIMATE = "no_estimate"


_STATUS_FROM_WIRE = {
    protocol.STATUS_OK: TrackingStatus.OK,
    protocol.STATUS_LOST: TrackingStatus.LOST,
    protocol.STATUS_NO_ESTIMATE: TrackingStatus.NO_ESTIMATE,
}


class RunOutcome(enum.Enum):
    COMPLETED = "completed"
    CRASHED = "crashed"
    TIMED_OUT = "timed_out"


@dataclass(frozen=True)
class RunRecord:
    """Result of streaming one non-ground-truth frame to the algorithm."""

    seq_index: int
    sensor_id: int
    timestamp_ns: int
    status: TrackingStatus
    estimate: Optional[Pose]
    processing_time_ns: int
    events: tuple[dict, ...] = ()


@dataclass
class RunResult:
    records: list[RunRecord]
    outcome: RunOutcome
    detail: str = ""
    exit_code: Optional[int] = None
    stopped_early: bool = False

    def estimate_trajectory(self) -> Optional[Trajectory]:
        """Poses reported with status Ok, as a trajectory (None if < 1)."""
        poses = [
            r.estimate
            for r in self.records
            if r.status == TrackingStatus.OK and r.estimate is not None
        ]
        if not poses:
            return None
        return Trajectory(tuple(poses))

    def events(self) -> list[dict]:
        out = []
        for record in self.records:
            out.extend(record.events)
        return out


def sensor_table_json(sensors: Sequence[SensorSpec]) -> bytes:
    """INIT payload: the sensor table in JSON, kinds as numeric codes."""
    table = {
        "version": 1,
        "sensors": [
            {
                "sensor_id": s.sensor_id,
                "kind": int(s.kind),
                "name": s.name,
                "metadata": json.loads(s.metadata),
            }
            for s in sensors
        ],
    }
    return json.dumps(table, sort_keys=True).encode("utf-8")


class _Receiver(threading.Thread):
    """Drains the child's stdout into a queue of decoded messages.

    Queue items are ("msg", recv_time_ns, WireMessage), ("error", exc)
    for protocol violations, or ("eof", None) when the pipe closes.
    """

    def __init__(self, stream):
        super().__init__(daemon=True)
        self._stream = stream
        self.items: queue.Queue = queue.Queue()

    def run(self):
        decoder = protocol.StreamDecoder()
        try:
            while True:
                # The pipe is unbuffered (bufsize=0), so this is one os.read
                # returning whatever is currently available.
                chunk = self._stream.read(65536)
                if not chunk:
                    decoder.finish()
                    self.items.put(("eof", None, None))
                    return
                for msg in decoder.feed(chunk):
                    self.items.put(("msg", time.perf_counter_ns(), msg))
        except ProtocolError as exc:
            self.items.put(("error", None, exc))
        except Exception as exc:  # reader must never die silently
            self.items.put(("error", None, ProtocolError(f"receive failed: {exc}")))


class AlgorithmSession:
    """One live algorithm subprocess after a successful handshake."""

    def __init__(self, process: subprocess.Popen, receiver: _Receiver, command: list[str]):
        self.process = process
        self.receiver = receiver
        self.command = command
        self._closed = False

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def launch(
        cls,
        command: Sequence[str] | str,
        sensors: Sequence[SensorSpec],
        handshake_timeout_s: float = DEFAULT_HANDSHAKE_TIMEOUT_S,
    ) -> "AlgorithmSession":
        """Spawn the algorithm, send INIT, and wait for READY."""
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            process = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                bufsize=0,
            )
        except OSError as exc:
            raise SpawnError(f"cannot start {argv!r}: {exc}") from exc
        receiver = _Receiver(process.stdout)
        receiver.start()
        session = cls(process, receiver, argv)
        try:
            session._send(protocol.MSG_INIT, sensor_table_json(sensors))
            kind, _, msg = session._next_item(handshake_timeout_s)
            if kind == "timeout":
                raise HandshakeError(
                    f"no READY within {handshake_timeout_s:.1f} s"
                )
            if kind == "eof":
                raise HandshakeError(
                    f"algorithm exited during handshake (code {session._wait_exit()})"
                )
            if kind == "error":
                raise msg
            if msg.msg_type != protocol.MSG_READY:
                raise HandshakeError(
                    f"expected READY, got message type {msg.msg_type:#x}"
                )
        except Exception:
            session.kill()
            raise
        return session

    def shutdown(self, timeout_s: float = 5.0) -> Optional[int]:
        if self._closed:
            return self.process.poll()
        self._closed = True
        try:
            self._send(protocol.MSG_SHUTDOWN)
        except (BrokenPipeError, OSError):
            pass
        try:
            self.process.stdin.close()
        except OSError:
            pass
        try:
            return self.process.wait(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            self.process.kill()
            return self.process.wait()

    def kill(self) -> None:
        self._closed = True
        if self.process.poll() is None:
            self.process.kill()
            self.process.wait()

    def _wait_exit(self) -> Optional[int]:
        try:
            return self.process.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            return None

    # -- plumbing ----------------------------------------------------------

    def _send(self, msg_type: int, payload: bytes = b"") -> None:
        self.process.stdin.write(protocol.encode_message(msg_type, payload))
        self.process.stdin.flush()

    def _next_item(self, timeout_s: Optional[float]):
        try:
            return self.receiver.items.get(timeout=timeout_s)
        except queue.Empty:
            return ("timeout", None, None)


def run_sequence(
    session: AlgorithmSession,
    frames: Iterable[Frame],
    sensors: Sequence[SensorSpec],
    perturber: Optional[Callable[[Frame], Frame]] = None,
    *,
    send_ground_truth: bool = False,
    frame_timeout_s: float = DEFAULT_FRAME_TIMEOUT_S,
    start_index: int = 0,
    stop_predicate: Optional[Callable[[RunRecord], bool]] = None,
    frame_observer: Optional[Callable[[Frame], None]] = None,
) -> RunResult:
    """Stream frames through the session and collect per-frame records.

    Perturbation runs before the timed bracket. ``start_index`` skips
    frames below that seq_index, supporting restart-from-frame replays.
    ``stop_predicate`` ends the run early after the record it fires on.
    ``frame_observer`` sees every frame exactly as sent (post
    perturbation); it runs outside the timed bracket.
    """
    kind_of = {s.sensor_id: s.kind for s in sensors}
    records: list[RunRecord] = []

    def _finish(outcome, detail="", stopped_early=False):
        if outcome == RunOutcome.TIMED_OUT:
            session.kill()
            exit_code = session.process.poll()
        elif outcome == RunOutcome.CRASHED:
            exit_code = session._wait_exit()
            session.kill()
        else:
            exit_code = session.shutdown()
        return RunResult(records, outcome, detail, exit_code, stopped_early)

    for frame in frames:
        if frame.seq_index < start_index:
            continue
        kind = kind_of[frame.sensor_id]
        is_ground_truth = kind == SensorKind.GROUND_TRUTH
        if is_ground_truth and not send_ground_truth:
            continue
        if perturber is not None:
            frame = perturber(frame)
        if frame_observer is not None and not is_ground_truth:
            frame_observer(frame)
        body = encode_payload(kind, frame.payload)
        payload = protocol.encode_frame_payload(
            frame.sensor_id, frame.timestamp_ns, body
        )
        try:
            session._send(protocol.MSG_FRAME, payload)
        except (BrokenPipeError, OSError):
            return _finish(
                RunOutcome.CRASHED,
                f"algorithm closed its input before frame {frame.seq_index}",
            )
        sent_ns = time.perf_counter_ns()
        deadline = sent_ns + int(frame_timeout_s * 1e9)

        events: list[dict] = []
        while True:
            remaining = (deadline - time.perf_counter_ns()) / 1e9
            item, recv_ns, msg = session._next_item(max(0.0, remaining))
            if item == "timeout":
                return _finish(
                    RunOutcome.TIMED_OUT,
                    f"no estimate for frame {frame.seq_index} within {frame_timeout_s:.1f} s",
                )
            if item == "eof":
                return _finish(
                    RunOutcome.CRASHED,
                    f"algorithm exited while processing frame {frame.seq_index}",
                )
            if item == "error":
                return _finish(RunOutcome.CRASHED, f"protocol violation: {msg}")
            if msg.msg_type == protocol.MSG_EVENT:
                try:
                    event = json.loads(msg.payload.decode("utf-8"))
                except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                    return _finish(
                        RunOutcome.CRASHED, f"protocol violation: bad EVENT JSON: {exc}"
                    )
                events.append(event if isinstance(event, dict) else {"value": event})
                continue
            if msg.msg_type == protocol.MSG_ESTIMATE:
                try:
                    ts, translation, rotation, status = protocol.decode_estimate(
                        msg.payload
                    )
                except ProtocolError as exc:
                    return _finish(RunOutcome.CRASHED, f"protocol violation: {exc}")
                if ts != frame.timestamp_ns:
                    return _finish(
                        RunOutcome.CRASHED,
                        f"protocol violation: estimate for timestamp {ts} while "
                        f"frame {frame.seq_index} ({frame.timestamp_ns}) is in flight",
                    )
                break
            return _finish(
                RunOutcome.CRASHED,
                f"protocol violation: unexpected message type {msg.msg_type:#x}",
            )

        tracking = _STATUS_FROM_WIRE[status]
        estimate = None
        if tracking != TrackingStatus.NO_ESTIMATE:
            try:
                estimate = Pose(frame.timestamp_ns, translation, rotation)
            except ValueError as exc:
                return _finish(
                    RunOutcome.CRASHED, f"protocol violation: invalid pose: {exc}"
                )
        if not is_ground_truth:
            record = RunRecord(
                seq_index=frame.seq_index,
                sensor_id=frame.sensor_id,
                timestamp_ns=frame.timestamp_ns,
                status=tracking,
                estimate=estimate,
                processing_time_ns=recv_ns - sent_ns,
                events=tuple(events),
            )
            records.append(record)
            if stop_predicate is not None and stop_predicate(record):
                return _finish(
                    RunOutcome.COMPLETED,
                    f"stopped by failure predicate at frame {frame.seq_index}",
                    stopped_early=True,
                )
    return _finish(RunOutcome.COMPLETED)


def execute_run(
    command: Sequence[str] | str,
    dataset_path: str,
    *,
    perturber: Optional[Perturber] = None,
    send_ground_truth: bool = False,
    handshake_timeout_s: float = DEFAULT_HANDSHAKE_TIMEOUT_S,
    frame_timeout_s: float = DEFAULT_FRAME_TIMEOUT_S,
    start_index: int = 0,
    stop_predicate: Optional[Callable[[RunRecord], bool]] = None,
    frame_observer: Optional[Callable[[Frame], None]] = None,
) -> RunResult:
    """Launch the algorithm and stream one whole dataset through it."""
    sensors, frames = open_dataset(dataset_path)
    session = AlgorithmSession.launch(command, sensors, handshake_timeout_s)
    try:
        return run_sequence(
            session,
            frames,
            sensors,
            perturber,
            send_ground_truth=send_ground_truth,
            frame_timeout_s=frame_timeout_s,
            start_index=start_index,
            stop_predicate=stop_predicate,
            frame_observer=frame_observer,
        )
    finally:
        session.kill()


# ---------------------------------------------------------------------------
# Record serialization (run.json)
# ---------------------------------------------------------------------------


def record_to_dict(record: RunRecord) -> dict:
    est = None
    if record.estimate is not None:
        est = {
            "translation": list(record.estimate.translation),
            "rotation": list(record.estimate.rotation),
        }
    return {
        "seq_index": record.seq_index,
        "sensor_id": record.sensor_id,
        "timestamp_ns": record.timestamp_ns,
        "status": record.status.value,
        "estimate": est,
        "processing_time_ns": record.processing_time_ns,
        "events": list(record.events),
    }


def record_from_dict(data: dict) -> RunRecord:
    estimate = None
    if data.get("estimate") is not None:
        estimate = Pose(
            data["timestamp_ns"],
            tuple(data["estimate"]["translation"]),
            tuple(data["estimate"]["rotation"]),
        )
    return RunRecord(
        seq_index=data["seq_index"],
        sensor_id=data["sensor_id"],
        timestamp_ns=data["timestamp_ns"],
        status=TrackingStatus(data["status"]),
        estimate=estimate,
        processing_time_ns=data["processing_time_ns"],
        events=tuple(data.get("events", ())),
    )
