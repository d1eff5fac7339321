import numpy as np
import pytest

from slamprobe.dataset import Pose
from slamprobe.diagnostics import (
    Classification,
    FailurePredicate,
    OnlineFailureMonitor,
    classify,
    correlate,
    detect_failures,
    estimate_loop_thresholds,
    has_stuck_pose,
    run_sweep,
)
from slamprobe.errors import ConfigError, InvalidPairsError, MetricDomainError
from slamprobe.image_metrics import ImageMetrics
from slamprobe.runner import RunOutcome, RunRecord, TrackingStatus
from slamprobe.synth import SynthParams, synth_dataset
from slamprobe.trajectory_metrics import ErrorRow

from conftest import NOISY_CMD, ORACLE_CMD


def make_records(positions, proc_time_ns=1_000_000):
    """One Ok record per entry; positions may contain None for NoEstimate."""
    records = []
    for i, pos in enumerate(positions):
        ts = (i + 1) * 100_000_000
        if pos is None:
            records.append(
                RunRecord(i, 0, ts, TrackingStatus.NO_ESTIMATE, None, proc_time_ns)
            )
        else:
            pose = Pose(ts, tuple(pos), (1, 0, 0, 0))
            records.append(RunRecord(i, 0, ts, TrackingStatus.OK, pose, proc_time_ns))
    return records


def moving_positions(n, step=0.5):
    return [(i * step, 0.0, 0.0) for i in range(n)]


def error_rows(records, rpe_values):
    rows = []
    for record, rpe in zip(records, rpe_values):
        rows.append(ErrorRow(record.timestamp_ns, 0.0, rpe, 0.0 if rpe is not None else None))
    return rows


# ---------------------------------------------------------------------------
# detect_failures
# ---------------------------------------------------------------------------


def test_no_triggers_below_threshold():
    records = make_records(moving_positions(20))
    errors = error_rows(records, [0.5] * 20)
    assert detect_failures(records, errors, FailurePredicate()) == []


def test_single_rpe_spike_yields_one_window():
    records = make_records(moving_positions(600))
    rpe = [0.1] * 600
    rpe[300] = 3.0
    errors = error_rows(records, rpe)
    windows = detect_failures(records, errors, FailurePredicate())
    assert len(windows) == 1
    w = windows[0]
    assert w.trigger == "rpe"
    assert w.center_index == 300
    assert (w.window_start_index, w.window_end_index) == (100, 500)


def test_window_clipped_at_bounds():
    records = make_records(moving_positions(50))
    rpe = [0.1] * 50
    rpe[2] = 9.0
    errors = error_rows(records, rpe)
    (w,) = detect_failures(records, errors, FailurePredicate(), window_frames=10)
    assert (w.window_start_index, w.window_end_index) == (0, 12)


def test_consecutive_triggers_collapse_to_one_episode():
    records = make_records(moving_positions(100))
    rpe = [0.1] * 100
    for i in range(40, 46):
        rpe[i] = 5.0
    errors = error_rows(records, rpe)
    windows = detect_failures(records, errors, FailurePredicate(), window_frames=5)
    assert len(windows) == 1
    assert windows[0].center_index == 40


def test_stuck_pose_triggers():
    positions = moving_positions(30)
    for i in range(10, 18):
        positions[i] = positions[10]
    records = make_records(positions)
    errors = error_rows(records, [0.1] * 30)
    pred = FailurePredicate(stuck_window_frames=5, stuck_epsilon_m=1e-6)
    windows = detect_failures(records, errors, pred, window_frames=3)
    assert len(windows) == 1
    assert windows[0].trigger == "stuck"
    assert has_stuck_pose(records, pred)
    assert not has_stuck_pose(make_records(moving_positions(30)), pred)


def test_crash_endpoint_flagged():
    records = make_records(moving_positions(10))
    errors = error_rows(records, [0.1] * 10)
    windows = detect_failures(
        records, errors, FailurePredicate(), outcome=RunOutcome.CRASHED, window_frames=2
    )
    assert len(windows) == 1
    assert windows[0].trigger == "crash"
    assert windows[0].center_index == 9
    assert (
        detect_failures(
            records,
            errors,
            FailurePredicate(treat_crash_as_failure=False),
            outcome=RunOutcome.CRASHED,
        )
        == []
    )


def test_frame_time_trigger():
    records = make_records(moving_positions(10), proc_time_ns=2_000_000)
    records[4] = RunRecord(
        4, 0, records[4].timestamp_ns, TrackingStatus.OK, records[4].estimate, 50_000_000
    )
    errors = error_rows(records, [0.1] * 10)
    pred = FailurePredicate(max_frame_time_ns=10_000_000)
    (w,) = detect_failures(records, errors, pred, window_frames=2)
    assert w.trigger == "frame_time"
    assert w.center_index == 4


def brute_force_episodes(records, errors, pred, window, outcome=RunOutcome.COMPLETED):
    """Independent scan: mark every failing frame, then group maximal runs."""
    rpe_by_ts = {e.timestamp_ns: e.rpe_trans_m for e in errors if e.rpe_trans_m is not None}
    n = len(records)
    marks = []
    for i, r in enumerate(records):
        bad = False
        rpe = rpe_by_ts.get(r.timestamp_ns)
        if rpe is not None and rpe > pred.rpe_threshold_m:
            bad = True
        if not bad and i >= pred.stuck_window_frames - 1:
            window_records = records[i - pred.stuck_window_frames + 1 : i + 1]
            if all(w.estimate is not None for w in window_records):
                ok = True
                for a, b in zip(window_records, window_records[1:]):
                    d = np.linalg.norm(
                        np.subtract(b.estimate.translation, a.estimate.translation)
                    )
                    if d >= pred.stuck_epsilon_m:
                        ok = False
                        break
                bad = bad or ok
        if (
            not bad
            and pred.max_frame_time_ns is not None
            and r.processing_time_ns > pred.max_frame_time_ns
        ):
            bad = True
        marks.append(bad)
    if pred.treat_crash_as_failure and outcome != RunOutcome.COMPLETED and n:
        marks[-1] = True
    episodes = []
    i = 0
    while i < n:
        if not marks[i]:
            i += 1
            continue
        start = i
        while i < n and marks[i]:
            i += 1
        episodes.append((start, max(0, start - window), min(n - 1, start + window)))
    return episodes


def test_detect_failures_equals_brute_force_on_random_series(rng):
    pred = FailurePredicate()
    for _ in range(50):
        n = int(rng.integers(5, 120))
        positions = []
        pos = np.zeros(3)
        for _ in range(n):
            if rng.random() < 0.1:
                positions.append(None)
                continue
            if rng.random() < 0.2 and positions and positions[-1] is not None:
                positions.append(positions[-1])  # freeze now and then
            else:
                pos = pos + rng.normal(0, 0.5, 3)
                positions.append(tuple(pos))
        records = make_records(positions)
        rpe = [
            None if rng.random() < 0.1 else float(rng.exponential(1.2))
            for _ in range(n)
        ]
        errors = error_rows(records, rpe)
        outcome = RunOutcome.CRASHED if rng.random() < 0.3 else RunOutcome.COMPLETED
        window = int(rng.integers(1, 30))
        got = detect_failures(
            records, errors, pred, window_frames=window, outcome=outcome
        )
        expected = brute_force_episodes(records, errors, pred, window, outcome)
        assert [
            (w.center_index, w.window_start_index, w.window_end_index) for w in got
        ] == expected


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def test_classification_partitions_outcomes():
    for reps in (1, 3, 5):
        for failures in range(reps + 1):
            c = classify(failures, reps)
            if failures == 0:
                assert c == Classification.ALL_SUCCESS
            elif failures == reps:
                assert c == Classification.TOTAL_FAILURE
            else:
                assert c == Classification.PARTIAL_FAILURE


# ---------------------------------------------------------------------------
# correlate
# ---------------------------------------------------------------------------


def metric_rows_from_brightness(values):
    rows = []
    for i, b in enumerate(values):
        ts = (i + 1) * 100_000_000
        rows.append((i, ts, ImageMetrics(float(b), 10.0 + (i % 3), 5.0 + (i % 7))))
    return rows


def test_correlate_linear_relation_is_minus_one(rng):
    brightness_values = rng.uniform(10, 240, size=200)
    metrics = metric_rows_from_brightness(brightness_values)
    errors = [
        ErrorRow(ts, 0.0, float(255.0 - m.brightness), 0.0) for _, ts, m in metrics
    ]
    table = correlate(errors, metrics)
    assert table.pearson["brightness"] == pytest.approx(-1.0, abs=1e-6)


def test_correlate_constant_error_reports_zero_with_flag(rng):
    metrics = metric_rows_from_brightness(rng.uniform(10, 240, size=50))
    errors = [ErrorRow(ts, 0.0, 1.0, 0.0) for _, ts, m in metrics]
    table = correlate(errors, metrics)
    assert table.pearson["brightness"] == 0.0
    assert "brightness" in table.undefined


def test_correlate_independent_series_low_pearson():
    rng = np.random.Generator(np.random.PCG64(2024))
    metrics = metric_rows_from_brightness(rng.uniform(10, 240, size=1000))
    errors = [
        ErrorRow(ts, 0.0, float(rng.exponential(1.0)), 0.0) for _, ts, _ in metrics
    ]
    table = correlate(errors, metrics)
    assert abs(table.pearson["brightness"]) < 0.2


def test_correlate_needs_two_rows():
    metrics = metric_rows_from_brightness([100.0])
    errors = [ErrorRow(100_000_000, 0.0, 1.0, 0.0)]
    with pytest.raises(MetricDomainError):
        correlate(errors, metrics)


def test_correlate_window_filter(rng):
    metrics = metric_rows_from_brightness(rng.uniform(10, 240, size=100))
    errors = [ErrorRow(ts, 0.0, 1.0 + i, 0.0) for i, (_, ts, _) in enumerate(metrics)]
    table = correlate(errors, metrics, window=(0, 2_000_000_000))
    assert len(table.rows) == 19  # timestamps 1e8 .. 1.9e9


# ---------------------------------------------------------------------------
# run_sweep (small end-to-end; the full U-curve lives in the acceptance suite)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def sweep_dataset(tmp_path_factory):
    # Long enough that the 10% default budget fits a whole 1 s segment.
    path = str(tmp_path_factory.mktemp("sweep") / "set.slmf")
    synth_dataset(path, SynthParams(seed=7, duration_s=12.0, rate_hz=10.0))
    return path


def noisy_cmd(dataset, seed=5):
    return NOISY_CMD + ["--dataset", dataset, "--seed", str(seed)]


def test_noiseless_mock_tracks_ground_truth_exactly(sweep_dataset):
    from slamprobe.dataset import associate, extract_ground_truth, read_all
    from slamprobe.runner import execute_run
    from slamprobe.trajectory_metrics import ate_rmse

    result = execute_run(noisy_cmd(sweep_dataset) + ["--sigma", "0"], sweep_dataset)
    trajectory = result.estimate_trajectory()
    _, frames = read_all(sweep_dataset)
    reference = extract_ground_truth(frames)
    rmse, _ = ate_rmse(trajectory, reference, associate(trajectory, reference))
    assert rmse < 1e-12


def test_sweep_identity_value_with_oracle(sweep_dataset):
    result = run_sweep(
        sweep_dataset,
        ORACLE_CMD,
        "brightness",
        [0],
        repetitions=2,
        base_seed=1,
        send_ground_truth=True,
    )
    (point,) = result.points
    assert point.classification == Classification.ALL_SUCCESS
    assert point.mean_ate_m == pytest.approx(0.0, abs=1e-12)


def test_sweep_extreme_darkness_total_failure(sweep_dataset):
    result = run_sweep(
        sweep_dataset,
        noisy_cmd(sweep_dataset),
        "brightness",
        [-255],
        repetitions=2,
        base_seed=3,
    )
    (point,) = result.points
    assert point.classification == Classification.TOTAL_FAILURE
    assert {o.reason for o in point.outcomes} == {"stuck"}


def test_sweep_deterministic_across_runs(sweep_dataset):
    kwargs = dict(repetitions=2, base_seed=11)
    a = run_sweep(sweep_dataset, noisy_cmd(sweep_dataset), "brightness", [0, -255], **kwargs)
    b = run_sweep(sweep_dataset, noisy_cmd(sweep_dataset), "brightness", [0, -255], **kwargs)
    strip = lambda r: [
        (p.value, p.mean_ate_m, p.classification, [(o.success, o.ate_rmse_m, o.reason) for o in p.outcomes])
        for p in r.points
    ]
    assert strip(a) == strip(b)
    assert a.baseline_ate_m == b.baseline_ate_m


def test_sweep_rejects_out_of_range_value(sweep_dataset):
    with pytest.raises(ConfigError):
        run_sweep(sweep_dataset, ORACLE_CMD, "brightness", [999], repetitions=1)


# ---------------------------------------------------------------------------
# estimate_loop_thresholds
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def loop_dataset(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("loops") / "set.slmf")
    synth_dataset(path, SynthParams(seed=3, duration_s=12.0, rate_hz=10.0, laps=2.0))
    return path


def loop_cmd(dataset, theta_loop):
    return NOISY_CMD + [
        "--dataset",
        dataset,
        "--seed",
        "1",
        "--theta-loop",
        str(theta_loop),
    ]


def camera_seq(ordinal):
    # synth emits (ground truth, camera) per tick: camera ordinal k -> seq 2k+1
    return 2 * ordinal + 1


def test_loop_threshold_recovery_within_one_increment(loop_dataset):
    pairs = [(camera_seq(5), camera_seq(65))]
    increments = {"brightness": list(range(25, 256, 25))}
    theta = 40.0
    estimate = estimate_loop_thresholds(
        loop_dataset, loop_cmd(loop_dataset, theta), pairs, increments, window_frames=4
    )
    assert estimate.pair_count == 1
    (detail,) = estimate.details
    got = estimate.thresholds["brightness"]
    assert got < theta
    # Granularity bound: the pd jump induced by one more increment.
    from slamprobe.dataset import read_all
    from slamprobe.image_metrics import compute_metrics, percent_difference
    from slamprobe.perturb import apply_brightness

    _, frames = read_all(loop_dataset)
    frame_a = next(f for f in frames if f.timestamp_ns == detail.linked_frames[0] and f.sensor_id == 0)
    v = detail.max_sustaining_value
    pd_at = lambda val: percent_difference(
        compute_metrics(apply_brightness(frame_a.payload, val)).brightness,
        compute_metrics(frame_a.payload).brightness,
    )
    induced = pd_at(v + 25) - pd_at(v)
    assert theta - got <= induced + 1e-9


def test_loop_threshold_monotone_in_theta(loop_dataset):
    pairs = [(camera_seq(5), camera_seq(65))]
    increments = {"brightness": list(range(25, 256, 25))}
    estimates = [
        estimate_loop_thresholds(
            loop_dataset, loop_cmd(loop_dataset, theta), pairs, increments, window_frames=4
        ).thresholds["brightness"]
        for theta in (20.0, 40.0, 60.0)
    ]
    assert estimates[0] <= estimates[1] <= estimates[2]


def test_loop_invalid_pair_rejected(loop_dataset):
    # Frames a quarter lap apart never revisit each other.
    pairs = [(camera_seq(5), camera_seq(20))]
    with pytest.raises(InvalidPairsError):
        estimate_loop_thresholds(
            loop_dataset,
            loop_cmd(loop_dataset, 40.0),
            pairs,
            {"brightness": [25]},
            window_frames=4,
        )


def test_loop_rejects_malformed_pairs(loop_dataset):
    with pytest.raises(ConfigError, match="a < b"):
        estimate_loop_thresholds(
            loop_dataset, loop_cmd(loop_dataset, 40.0), [(9, 3)], {"brightness": [25]}
        )
    with pytest.raises(ConfigError, match="not a camera frame"):
        estimate_loop_thresholds(
            loop_dataset,
            loop_cmd(loop_dataset, 40.0),
            [(0, camera_seq(65))],
            {"brightness": [25]},
            window_frames=4,
        )


# ---------------------------------------------------------------------------
# online monitor
# ---------------------------------------------------------------------------


def test_online_monitor_detects_stuck():
    pred = FailurePredicate(stuck_window_frames=4, stuck_epsilon_m=1e-6)
    monitor = OnlineFailureMonitor(pred)
    positions = moving_positions(10) + [(100.0, 0.0, 0.0)] * 6
    fired_at = None
    for i, record in enumerate(make_records(positions)):
        if monitor(record):
            fired_at = i
            break
    assert monitor.fired == "stuck"
    assert fired_at == 13  # 4th consecutive frozen frame


def test_online_monitor_detects_frame_time():
    pred = FailurePredicate(max_frame_time_ns=1_000)
    monitor = OnlineFailureMonitor(pred)
    record = make_records([(0, 0, 0)])[0]
    assert monitor(record)
    assert monitor.fired == "frame_time"
