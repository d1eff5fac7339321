"""Failure diagnosis and robustness campaigns.

Four tools built on top of the runner:

* :func:`detect_failures` scans a recorded run for frames where a
  user-defined predicate fires (relative pose error above a threshold,
  pose stuck in place, slow frames, crashes) and cuts a window of frames
  around each failure episode for inspection.
* :func:`run_sweep` reruns an algorithm over a grid of perturbation
  values, several seeded repetitions each, classifying every value as
  all-success / partial failure / total failure and averaging the ATE of
  the surviving runs.
* :func:`correlate` joins per-frame image metrics with per-frame errors
  and reports Pearson correlation per metric.
* :func:`estimate_loop_thresholds` ramps perturbation on the
  neighborhood of known loop-closure pairs until the loop breaks and
  reports the image-metric percent differences the loop survived.
"""

from __future__ import annotations

import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import (
    Frame,
    ImageBuffer,
    SensorKind,
    Trajectory,
    associate,
    extract_ground_truth,
    open_dataset,
    scan_dataset,
    DEFAULT_MAX_GAP_NS,
)
from .errors import (
    ConfigError,
    HarnessError,
    InvalidPairsError,
    MetricDomainError,
    NoOverlapError,
    InsufficientPairsError,
)
from .image_metrics import ImageMetrics, METRIC_NAMES, compute_metrics, percent_difference
from .perturb import (
    Perturber,
    PerturbationSpec,
    SegmentParams,
    perturb_frame,
    plan_segments,
)
from .runner import (
    RunOutcome,
    RunRecord,
    RunResult,
    execute_run,
)
from .seeding import derive_seed
from .trajectory_metrics import ErrorRow, ate_rmse

DEFAULT_WINDOW_FRAMES = 200
DEFAULT_LOOP_WINDOW_FRAMES = 30
DEFAULT_ATE_FAILURE_FACTOR = 10.0
DEFAULT_ATE_FAILURE_OFFSET_M = 0.1


@dataclass(frozen=True)
class FailurePredicate:
    """User-defined failure rules over a recorded run.

    A frame fails when its relative pose error exceeds
    ``rpe_threshold_m``, when the reported pose moved less than
    ``stuck_epsilon_m`` per frame over the last ``stuck_window_frames``
    frames, or when its processing time exceeds ``max_frame_time_ns``
    (disabled when None). Crash and timeout endpoints count as failures
    unless ``treat_crash_as_failure`` is cleared.
    """

    rpe_threshold_m: float = 2.0
    stuck_epsilon_m: float = 1e-3
    stuck_window_frames: int = 5
    max_frame_time_ns: Optional[int] = None
    treat_crash_as_failure: bool = True

    def __post_init__(self):
        if self.rpe_threshold_m <= 0:
            raise ConfigError("rpe_threshold_m must be positive")
        if self.stuck_epsilon_m <= 0:
            raise ConfigError("stuck_epsilon_m must be positive")
        if self.stuck_window_frames < 2:
            raise ConfigError("stuck_window_frames must be at least 2")
        if self.max_frame_time_ns is not None and self.max_frame_time_ns <= 0:
            raise ConfigError("max_frame_time_ns must be positive")


@dataclass(frozen=True)
class FrameOfInterest:
    """One failure episode with a window of surrounding frames.

    Indices refer to positions in the run's record sequence; the
    corresponding dataset ``seq_index`` values are carried alongside.
    ``rows`` holds one dict per window frame with whatever error/metric
    columns were available.
    """

    center_index: int
    center_seq_index: int
    window_start_index: int
    window_end_index: int  # inclusive
    trigger: str
    rows: tuple[dict, ...] = ()


def _stuck_flags(records: Sequence[RunRecord], pred: FailurePredicate) -> list[bool]:
    """flags[i]: pose moved < epsilon per step over the last window frames."""
    n = len(records)
    flags = [False] * n
    w = pred.stuck_window_frames
    positions = []
    for r in records:
        positions.append(None if r.estimate is None else np.asarray(r.estimate.translation))
    for i in range(w - 1, n):
        window = positions[i - w + 1 : i + 1]
        if any(p is None for p in window):
            continue
        deltas = [np.linalg.norm(b - a) for a, b in zip(window, window[1:])]
        if all(d < pred.stuck_epsilon_m for d in deltas):
            flags[i] = True
    return flags


def frame_triggers(
    records: Sequence[RunRecord],
    errors: Iterable[ErrorRow],
    pred: FailurePredicate,
    outcome: RunOutcome = RunOutcome.COMPLETED,
) -> list[Optional[str]]:
    """Per-record trigger name (or None), the primitive detect_failures scans."""
    rpe_by_ts = {
        row.timestamp_ns: row.rpe_trans_m
        for row in errors
        if row.rpe_trans_m is not None
    }
    stuck = _stuck_flags(records, pred)
    triggers: list[Optional[str]] = [None] * len(records)
    for i, record in enumerate(records):
        rpe = rpe_by_ts.get(record.timestamp_ns)
        if rpe is not None and rpe > pred.rpe_threshold_m:
            triggers[i] = "rpe"
        elif stuck[i]:
            triggers[i] = "stuck"
        elif (
            pred.max_frame_time_ns is not None
            and record.processing_time_ns > pred.max_frame_time_ns
        ):
            triggers[i] = "frame_time"
    if (
        pred.treat_crash_as_failure
        and outcome in (RunOutcome.CRASHED, RunOutcome.TIMED_OUT)
        and records
    ):
        if triggers[-1] is None:
            triggers[-1] = "crash" if outcome == RunOutcome.CRASHED else "timeout"
    return triggers


def detect_failures(
    records: Sequence[RunRecord],
    errors: Iterable[ErrorRow],
    pred: FailurePredicate,
    *,
    metrics: Optional[Sequence[tuple[int, int, ImageMetrics]]] = None,
    window_frames: int = DEFAULT_WINDOW_FRAMES,
    outcome: RunOutcome = RunOutcome.COMPLETED,
) -> list[FrameOfInterest]:
    """Group triggering frames into episodes and cut windows around them.

    Consecutive triggering frames collapse into one episode whose window
    is centered at the first trigger and clipped to the run bounds.
    """
    errors = list(errors)
    triggers = frame_triggers(records, errors, pred, outcome)
    error_by_ts = {row.timestamp_ns: row for row in errors}
    metric_by_ts = {ts: m for _, ts, m in metrics} if metrics else {}

    episodes: list[FrameOfInterest] = []
    i = 0
    n = len(records)
    while i < n:
        if triggers[i] is None:
            i += 1
            continue
        start = i
        while i < n and triggers[i] is not None:
            i += 1
        center = start
        lo = max(0, center - window_frames)
        hi = min(n - 1, center + window_frames)
        rows = []
        for k in range(lo, hi + 1):
            record = records[k]
            row = {
                "index": k,
                "seq_index": record.seq_index,
                "timestamp_ns": record.timestamp_ns,
                "status": record.status.value,
                "processing_time_ns": record.processing_time_ns,
                "triggered": triggers[k] is not None,
            }
            err = error_by_ts.get(record.timestamp_ns)
            if err is not None:
                row["ate_residual_m"] = err.ate_residual_m
                row["rpe_trans_m"] = err.rpe_trans_m
                row["rpe_rot_rad"] = err.rpe_rot_rad
            metric = metric_by_ts.get(record.timestamp_ns)
            if metric is not None:
                row["brightness"] = metric.brightness
                row["contrast"] = metric.contrast
                row["tenengrad"] = metric.tenengrad
            rows.append(row)
        episodes.append(
            FrameOfInterest(
                center_index=center,
                center_seq_index=records[center].seq_index,
                window_start_index=lo,
                window_end_index=hi,
                trigger=triggers[center],
                rows=tuple(rows),
            )
        )
    return episodes


def has_stuck_pose(records: Sequence[RunRecord], pred: FailurePredicate) -> bool:
    return any(_stuck_flags(records, pred))


class OnlineFailureMonitor:
    """Streaming form of the failure predicate, usable as a stop condition.

    Evaluates frame time, the stuck-pose window, and relative pose error
    against the reference trajectory (when one is given) as records
    arrive, so a run can be aborted at the first failure and later
    restarted from that frame.
    """

    def __init__(
        self,
        pred: FailurePredicate,
        reference: Optional[Trajectory] = None,
        max_gap_ns: int = DEFAULT_MAX_GAP_NS,
    ):
        self.pred = pred
        self.max_gap_ns = max_gap_ns
        self._ref_ts = reference.timestamps() if reference is not None else None
        self._ref_poses = reference.poses if reference is not None else ()
        self._recent: list[np.ndarray] = []
        self._last_match: Optional[tuple] = None  # (est pose, ref pose)
        self.fired: Optional[str] = None

    def _match_reference(self, record: RunRecord):
        if self._ref_ts is None or record.estimate is None:
            return None
        i = int(np.searchsorted(self._ref_ts, record.timestamp_ns))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(self._ref_ts):
                gap = abs(int(self._ref_ts[j]) - record.timestamp_ns)
                if gap <= self.max_gap_ns and (best is None or gap < best[0]):
                    best = (gap, j)
        return None if best is None else self._ref_poses[best[1]]

    def __call__(self, record: RunRecord) -> bool:
        if self.fired is not None:
            return True
        pred = self.pred
        if (
            pred.max_frame_time_ns is not None
            and record.processing_time_ns > pred.max_frame_time_ns
        ):
            self.fired = "frame_time"
            return True
        if record.estimate is not None:
            self._recent.append(np.asarray(record.estimate.translation))
            if len(self._recent) > pred.stuck_window_frames:
                self._recent.pop(0)
            if len(self._recent) == pred.stuck_window_frames and all(
                float(np.linalg.norm(b - a)) < pred.stuck_epsilon_m
                for a, b in zip(self._recent, self._recent[1:])
            ):
                self.fired = "stuck"
                return True
        else:
            self._recent.clear()
        ref_pose = self._match_reference(record)
        if ref_pose is not None:
            if self._last_match is not None:
                from .trajectory_metrics import invert_se3, pose_matrix

                prev_est, prev_ref = self._last_match
                rel_est = invert_se3(pose_matrix(prev_est)) @ pose_matrix(record.estimate)
                rel_ref = invert_se3(pose_matrix(prev_ref)) @ pose_matrix(ref_pose)
                err = invert_se3(rel_ref) @ rel_est
                if float(np.linalg.norm(err[:3, 3])) > pred.rpe_threshold_m:
                    self.fired = "rpe"
                    return True
            self._last_match = (record.estimate, ref_pose)
        return False


# ---------------------------------------------------------------------------
# Fuzz sweeps
# ---------------------------------------------------------------------------


class Classification(enum.Enum):
    ALL_SUCCESS = "all_success"
    PARTIAL_FAILURE = "partial_failure"
    TOTAL_FAILURE = "total_failure"


@dataclass(frozen=True)
class RepetitionOutcome:
    rep: int
    seed: int
    success: bool
    ate_rmse_m: Optional[float]
    reason: str = ""  # crash | timeout | ate_bound | stuck | insufficient_estimates


@dataclass(frozen=True)
class SweepPoint:
    value: int
    outcomes: tuple[RepetitionOutcome, ...]
    mean_ate_m: Optional[float]
    classification: Classification

    @property
    def failures(self) -> int:
        return sum(1 for o in self.outcomes if not o.success)


@dataclass(frozen=True)
class SweepResult:
    kind: str
    values: tuple[int, ...]
    repetitions: int
    base_seed: int
    baseline_ate_m: float
    failure_ate_bound_m: float
    points: tuple[SweepPoint, ...]


def classify(failures: int, repetitions: int) -> Classification:
    if failures == 0:
        return Classification.ALL_SUCCESS
    if failures >= repetitions:
        return Classification.TOTAL_FAILURE
    return Classification.PARTIAL_FAILURE


def _ate_of_result(
    result: RunResult, reference: Trajectory, max_gap_ns: int
) -> Optional[float]:
    trajectory = result.estimate_trajectory()
    if trajectory is None or len(trajectory) < 3:
        return None
    try:
        pairs = associate(trajectory, reference, max_gap_ns)
        rmse, _ = ate_rmse(trajectory, reference, pairs)
    except (NoOverlapError, InsufficientPairsError):
        return None
    return rmse


@dataclass(frozen=True)
class _SweepTask:
    dataset_path: str
    command: tuple[str, ...] | str
    kind: str
    value: int
    rep: int
    seed: int
    target_sensors: tuple[int, ...]
    segment_params: SegmentParams
    duration_ns: int
    reference: Trajectory
    predicate: FailurePredicate
    ate_bound_m: float
    max_gap_ns: int
    send_ground_truth: bool
    frame_timeout_s: float


def _run_sweep_task(task: _SweepTask) -> RepetitionOutcome:
    plan = plan_segments(task.seed, task.duration_ns, task.segment_params)
    spec = PerturbationSpec(task.kind, task.value, task.target_sensors)
    result = execute_run(
        task.command,
        task.dataset_path,
        perturber=Perturber([spec], plan),
        send_ground_truth=task.send_ground_truth,
        frame_timeout_s=task.frame_timeout_s,
    )
    if result.outcome == RunOutcome.CRASHED:
        return RepetitionOutcome(task.rep, task.seed, False, None, "crash")
    if result.outcome == RunOutcome.TIMED_OUT:
        return RepetitionOutcome(task.rep, task.seed, False, None, "timeout")
    ate = _ate_of_result(result, task.reference, task.max_gap_ns)
    if has_stuck_pose(result.records, task.predicate):
        return RepetitionOutcome(task.rep, task.seed, False, ate, "stuck")
    if ate is None:
        return RepetitionOutcome(
            task.rep, task.seed, False, None, "insufficient_estimates"
        )
    if ate > task.ate_bound_m:
        return RepetitionOutcome(task.rep, task.seed, False, ate, "ate_bound")
    return RepetitionOutcome(task.rep, task.seed, True, ate)


def run_sweep(
    dataset_path: str,
    command: Sequence[str] | str,
    kind: str,
    values: Sequence[int],
    *,
    repetitions: int = 5,
    segment_params: Optional[SegmentParams] = None,
    base_seed: int = 0,
    target_sensors: Optional[Sequence[int]] = None,
    predicate: Optional[FailurePredicate] = None,
    send_ground_truth: bool = False,
    frame_timeout_s: float = 30.0,
    max_gap_ns: int = DEFAULT_MAX_GAP_NS,
    ate_factor: float = DEFAULT_ATE_FAILURE_FACTOR,
    ate_offset_m: float = DEFAULT_ATE_FAILURE_OFFSET_M,
    jobs: int = 1,
) -> SweepResult:
    """Sweep one perturbation kind over ``values`` x ``repetitions`` runs.

    Repetition r draws its random segments from
    derive_seed(base_seed, "sweep", kind, r), deliberately independent of
    the sweep value: every value perturbs the same r-th segment
    placement, so the mean-ATE curve compares like with like across
    values instead of mixing placement luck into the trend. The whole
    sweep is reproducible from ``base_seed``. A repetition fails on crash
    or timeout, a stuck pose, or an ATE above factor * baseline + offset
    where the baseline comes from one unperturbed run.
    """
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    segment_params = segment_params or SegmentParams()
    predicate = predicate or FailurePredicate()
    command = tuple(command) if not isinstance(command, str) else command

    stats = scan_dataset(dataset_path)
    duration_ns = stats.duration_ns
    if target_sensors is None:
        target_sensors = tuple(
            s.sensor_id
            for s in stats.sensors
            if s.kind in (SensorKind.CAMERA_RGB, SensorKind.CAMERA_GREY)
        )
        if not target_sensors:
            raise ConfigError("dataset has no camera sensors to perturb")
    else:
        target_sensors = tuple(target_sensors)
    for value in values:
        PerturbationSpec(kind, value, target_sensors)  # validates kind/range

    sensors, frames = open_dataset(dataset_path)
    reference = extract_ground_truth(frames)

    baseline_result = execute_run(
        command,
        dataset_path,
        send_ground_truth=send_ground_truth,
        frame_timeout_s=frame_timeout_s,
    )
    if baseline_result.outcome != RunOutcome.COMPLETED:
        raise HarnessError(
            f"baseline run failed ({baseline_result.outcome.value}): "
            f"{baseline_result.detail}"
        )
    baseline_ate = _ate_of_result(baseline_result, reference, max_gap_ns)
    if baseline_ate is None:
        raise HarnessError("baseline run produced too few estimates for ATE")
    ate_bound = ate_factor * baseline_ate + ate_offset_m

    tasks = [
        _SweepTask(
            dataset_path=dataset_path,
            command=command,
            kind=kind,
            value=int(value),
            rep=rep,
            seed=derive_seed(base_seed, "sweep", kind, rep),
            target_sensors=target_sensors,
            segment_params=segment_params,
            duration_ns=duration_ns,
            reference=reference,
            predicate=predicate,
            ate_bound_m=ate_bound,
            max_gap_ns=max_gap_ns,
            send_ground_truth=send_ground_truth,
            frame_timeout_s=frame_timeout_s,
        )
        for value in values
        for rep in range(repetitions)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_sweep_task, tasks))
    else:
        outcomes = [_run_sweep_task(t) for t in tasks]

    points = []
    for vi, value in enumerate(values):
        cell = tuple(outcomes[vi * repetitions : (vi + 1) * repetitions])
        ates = [o.ate_rmse_m for o in cell if o.success and o.ate_rmse_m is not None]
        mean_ate = float(np.mean(ates)) if ates else None
        failures = sum(1 for o in cell if not o.success)
        points.append(
            SweepPoint(int(value), cell, mean_ate, classify(failures, repetitions))
        )
    return SweepResult(
        kind=kind,
        values=tuple(int(v) for v in values),
        repetitions=repetitions,
        base_seed=base_seed,
        baseline_ate_m=baseline_ate,
        failure_ate_bound_m=ate_bound,
        points=tuple(points),
    )


# ---------------------------------------------------------------------------
# Metric / error correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationTable:
    rows: tuple[dict, ...]
    pearson: dict[str, float]
    undefined: tuple[str, ...]  # metrics with zero variance, reported as 0
    error_column: str


def correlate(
    errors: Iterable[ErrorRow],
    metrics: Sequence[tuple[int, int, ImageMetrics]],
    window: Optional[tuple[int, int]] = None,
    error_column: str = "rpe_trans_m",
) -> CorrelationTable:
    """Join errors and image metrics by timestamp; Pearson per metric.

    ``window`` is an optional [start_ns, end_ns) timestamp filter.
    Metrics (or an error series) with zero variance have no defined
    correlation; those are reported as 0 and named in ``undefined``.
    """
    if error_column not in ("rpe_trans_m", "ate_residual_m", "rpe_rot_rad"):
        raise ConfigError(f"unknown error column {error_column!r}")
    metric_by_ts = {ts: (idx, m) for idx, ts, m in metrics}
    rows = []
    for err in errors:
        if window is not None and not window[0] <= err.timestamp_ns < window[1]:
            continue
        entry = metric_by_ts.get(err.timestamp_ns)
        if entry is None:
            continue
        value = getattr(err, error_column)
        if value is None:
            continue
        idx, m = entry
        rows.append(
            {
                "frame_index": idx,
                "timestamp_ns": err.timestamp_ns,
                "brightness": m.brightness,
                "contrast": m.contrast,
                "tenengrad": m.tenengrad,
                "error": float(value),
            }
        )
    if len(rows) < 2:
        raise MetricDomainError(
            f"correlation needs at least 2 overlapping rows, got {len(rows)}"
        )
    error_values = np.asarray([r["error"] for r in rows])
    pearson = {}
    undefined = []
    for name in METRIC_NAMES:
        series = np.asarray([r[name] for r in rows])
        if np.std(series) == 0.0 or np.std(error_values) == 0.0:
            pearson[name] = 0.0
            undefined.append(name)
        else:
            pearson[name] = float(np.corrcoef(series, error_values)[0, 1])
    return CorrelationTable(tuple(rows), pearson, tuple(undefined), error_column)


# ---------------------------------------------------------------------------
# Loop-closure robustness thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LoopPairResult:
    pair: tuple[int, int]
    kind: str
    max_sustaining_value: int
    linked_frames: tuple[int, int]  # timestamps of the surviving link
    percent_differences: dict[str, float]


@dataclass(frozen=True)
class LoopThresholdEstimate:
    """Mean image-metric percent difference under which loops survived."""

    thresholds: dict[str, float]  # per metric name
    pair_count: int
    details: tuple[LoopPairResult, ...] = field(default_factory=tuple)
    rejected_pairs: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class _LoopWindow:
    pair: tuple[int, int]
    sensor_id: int
    a_seq_range: tuple[int, int]  # half-open seq_index range of window A
    b_seq_range: tuple[int, int]
    a_time_range: tuple[int, int]  # inclusive timestamp bounds
    b_time_range: tuple[int, int]


def _loop_windows(
    frames: Sequence[Frame],
    pairs: Sequence[tuple[int, int]],
    window_frames: int,
) -> list[_LoopWindow]:
    by_seq = {f.seq_index: f for f in frames}
    windows = []
    for a, b in pairs:
        if a >= b:
            raise ConfigError(f"loop pair ({a}, {b}) must satisfy a < b")
        for idx in (a, b):
            if idx not in by_seq:
                raise ConfigError(f"loop pair frame {idx} not present in the dataset")
            if not isinstance(by_seq[idx].payload, ImageBuffer):
                raise ConfigError(f"loop pair frame {idx} is not a camera frame")
        sensor_id = by_seq[a].sensor_id
        if by_seq[b].sensor_id != sensor_id:
            raise ConfigError(f"loop pair ({a}, {b}) spans different sensors")
        cam = [f for f in frames if f.sensor_id == sensor_id]
        pos = {f.seq_index: k for k, f in enumerate(cam)}
        ranges = []
        for idx in (a, b):
            center = pos[idx]
            lo = max(0, center - window_frames)
            hi = min(len(cam) - 1, center + window_frames)
            ranges.append(
                (
                    (cam[lo].seq_index, cam[hi].seq_index + 1),
                    (cam[lo].timestamp_ns, cam[hi].timestamp_ns),
                )
            )
        if ranges[0][1][1] >= ranges[1][1][0]:
            raise ConfigError(
                f"loop pair ({a}, {b}) windows overlap; use a smaller window"
            )
        windows.append(
            _LoopWindow(
                (a, b), sensor_id, ranges[0][0], ranges[1][0], ranges[0][1], ranges[1][1]
            )
        )
    return windows


def _linked(events: Iterable[dict], window: _LoopWindow) -> Optional[tuple[int, int]]:
    for event in events:
        if event.get("kind") != "loop_closure":
            continue
        ta = event.get("timestamp_a_ns")
        tb = event.get("timestamp_b_ns")
        if ta is None or tb is None:
            continue
        if (
            window.a_time_range[0] <= ta <= window.a_time_range[1]
            and window.b_time_range[0] <= tb <= window.b_time_range[1]
        ):
            return (ta, tb)
    return None


def _loop_percent_differences(
    frames_by_ts: dict[tuple[int, int], Frame],
    window: _LoopWindow,
    spec: Optional[PerturbationSpec],
    link: tuple[int, int],
) -> dict[str, float]:
    frame_a = frames_by_ts[(window.sensor_id, link[0])]
    frame_b = frames_by_ts[(window.sensor_id, link[1])]
    if spec is not None:
        frame_a = perturb_frame(frame_a, [spec])
        frame_b = perturb_frame(frame_b, [spec])
    metrics_a = compute_metrics(frame_a.payload)
    metrics_b = compute_metrics(frame_b.payload)
    return {
        name: percent_difference(metrics_a.get(name), metrics_b.get(name))
        for name in METRIC_NAMES
    }


def estimate_loop_thresholds(
    dataset_path: str,
    command: Sequence[str] | str,
    pairs: Sequence[tuple[int, int]],
    increments: dict[str, Sequence[int]],
    *,
    window_frames: int = DEFAULT_LOOP_WINDOW_FRAMES,
    perturb_b: bool = False,
    send_ground_truth: bool = False,
    frame_timeout_s: float = 30.0,
) -> LoopThresholdEstimate:
    """Ramp perturbation on loop windows until the loop connection breaks.

    For every pair (a, b), window A (or B with ``perturb_b``) spans the
    ``window_frames`` camera frames before and after the loop frame. The
    perturbation value rises through ``increments[kind]`` (ascending)
    until no loop_closure event links A to B; the last sustaining value
    is scored by the percent difference of each image metric between the
    linked frames at that value. Pairs that do not loop unperturbed are
    dropped; if none survive, :class:`InvalidPairsError` lists them.
    """
    if not pairs:
        raise ConfigError("loopthresh needs at least one (a, b) pair")
    for kind, values in increments.items():
        ordered = [int(v) for v in values]
        if not ordered or sorted(ordered) != ordered or ordered[0] <= 0:
            raise ConfigError(
                f"increments for {kind!r} must be positive and ascending"
            )
    sensors, frame_iter = open_dataset(dataset_path)
    frames = list(frame_iter)
    frames_by_ts = {
        (f.sensor_id, f.timestamp_ns): f
        for f in frames
        if isinstance(f.payload, ImageBuffer)
    }
    windows = _loop_windows(frames, pairs, window_frames)

    def _run(spec: Optional[PerturbationSpec]) -> list[dict]:
        perturber = Perturber([spec]) if spec is not None else None
        result = execute_run(
            command,
            dataset_path,
            perturber=perturber,
            send_ground_truth=send_ground_truth,
            frame_timeout_s=frame_timeout_s,
        )
        if result.outcome != RunOutcome.COMPLETED:
            raise HarnessError(
                f"loop run failed ({result.outcome.value}): {result.detail}"
            )
        return result.events()

    baseline_events = _run(None)
    valid: list[tuple[_LoopWindow, tuple[int, int]]] = []
    rejected: list[tuple[int, int]] = []
    for window in windows:
        link = _linked(baseline_events, window)
        if link is None:
            rejected.append(window.pair)
        else:
            valid.append((window, link))
    if not valid:
        raise InvalidPairsError("no pair forms a loop without perturbation", rejected)

    details = []
    for window, baseline_link in valid:
        seq_range = window.b_seq_range if perturb_b else window.a_seq_range
        for kind, values in increments.items():
            spec_for = lambda v: PerturbationSpec(
                kind, v, (window.sensor_id,), frame_ranges=(seq_range,)
            )
            sustaining_value = 0
            sustaining_link = baseline_link
            for value in [int(v) for v in values]:
                link = _linked(_run(spec_for(value)), window)
                if link is None:
                    break
                sustaining_value = value
                sustaining_link = link
            spec = spec_for(sustaining_value) if sustaining_value else None
            diffs = _loop_percent_differences(
                frames_by_ts, window, spec, sustaining_link
            )
            details.append(
                LoopPairResult(window.pair, kind, sustaining_value, sustaining_link, diffs)
            )
    thresholds = {
        name: float(np.mean([d.percent_differences[name] for d in details]))
        for name in METRIC_NAMES
    }
    return LoopThresholdEstimate(
        thresholds, len(details), tuple(details), tuple(rejected)
    )
