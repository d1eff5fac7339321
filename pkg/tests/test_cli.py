import csv
import json
import shlex
import sys

import pytest

from slamprobe import cli
from slamprobe.runner import record_to_dict
from slamprobe.synth import SynthParams, synth_dataset

from conftest import NOISY_CMD, ORACLE_CMD, SCRIPTED_CMD


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cli") / "set.slmf")
    synth_dataset(path, SynthParams(seed=7, duration_s=10.0, rate_hz=10.0))
    return path


def write_config(tmp_path, dataset, algorithm, name="config.json", **extra):
    config = {
        "dataset": dataset,
        "algorithm": shlex.join(algorithm),
        "send_ground_truth": True,
        **extra,
    }
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


# ---------------------------------------------------------------------------
# synth + inspect
# ---------------------------------------------------------------------------


def test_synth_then_inspect(tmp_path, capsys):
    out = tmp_path / "synth.slmf"
    assert run_cli("--seed", 3, "synth", out, "--duration-s", 5) == 0
    assert run_cli("inspect", out) == 0
    text = capsys.readouterr().out
    assert "50 frames" in text
    assert "CAMERA_GREY" in text


def test_synth_deterministic_via_cli(tmp_path):
    a = tmp_path / "a.slmf"
    b = tmp_path / "b.slmf"
    run_cli("--seed", 9, "synth", a)
    run_cli("--seed", 9, "synth", b)
    assert a.read_bytes() == b.read_bytes()


def test_inspect_json_and_file_output(tmp_path, dataset, capsys):
    out_dir = tmp_path / "out"
    assert run_cli("--output-dir", out_dir, "inspect", dataset, "--json") == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["total_frames"] == 200
    on_disk = json.loads((out_dir / "inspect.json").read_text())
    assert on_disk == printed


def test_inspect_empty_dataset(tmp_path, capsys):
    from slamprobe.dataset import SensorKind, SensorSpec, write_dataset

    path = tmp_path / "empty.slmf"
    write_dataset(str(path), [SensorSpec(0, SensorKind.CAMERA_GREY, "cam")], [])
    assert run_cli("inspect", path, "--json") == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["total_frames"] == 0
    assert printed["sensors"][0]["frames"] == 0


def test_inspect_corrupt_file_exits_2(tmp_path, dataset, capsys):
    corrupt = tmp_path / "corrupt.slmf"
    data = open(dataset, "rb").read()
    corrupt.write_bytes(data[:-3])
    assert run_cli("inspect", corrupt) == 2
    assert "byte offset" in capsys.readouterr().err


def test_inspect_bad_magic_exits_2(tmp_path):
    bad = tmp_path / "bad.slmf"
    bad.write_bytes(b"XXXX" + bytes(32))
    assert run_cli("inspect", bad) == 2


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def test_run_oracle_reports_zero_ate(tmp_path, dataset):
    config = write_config(tmp_path, dataset, ORACLE_CMD)
    out_dir = tmp_path / "run"
    assert run_cli("--config", config, "--output-dir", out_dir, "--seed", 1, "run") == 0
    payload = json.loads((out_dir / "run.json").read_text())
    assert payload["outcome"] == "completed"
    assert payload["ok_frames"] == 100
    assert abs(payload["summary"]["ate_rmse_m"]) < 1e-12
    assert payload["config"]["seed"] == 1
    assert (out_dir / "errors.csv").exists()
    assert (out_dir / "metrics.csv").exists()


def test_run_identity_perturbation_outputs_identical(tmp_path, dataset):
    plain_cfg = write_config(tmp_path, dataset, ORACLE_CMD, name="plain.json")
    zero_cfg = write_config(
        tmp_path,
        dataset,
        ORACLE_CMD,
        name="zero.json",
        perturbations=[{"kind": "brightness", "delta": 0, "sensors": [0]}],
    )
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run_cli("--config", plain_cfg, "--output-dir", a, "--seed", 5, "run") == 0
    assert run_cli("--config", zero_cfg, "--output-dir", b, "--seed", 5, "run") == 0
    assert (a / "errors.csv").read_bytes() == (b / "errors.csv").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_run_reproducible_byte_identical_outputs(tmp_path, dataset):
    config = write_config(tmp_path, dataset, NOISY_CMD + ["--dataset", dataset, "--seed", "4"])
    a = tmp_path / "a"
    b = tmp_path / "b"
    assert run_cli("--config", config, "--output-dir", a, "--seed", 5, "run") == 0
    assert run_cli("--config", config, "--output-dir", b, "--seed", 5, "run") == 0
    assert (a / "errors.csv").read_bytes() == (b / "errors.csv").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_run_crash_exit_codes(tmp_path, dataset):
    cmd = SCRIPTED_CMD + ["--mode", "crash", "--at-frame", "10"]
    config = write_config(tmp_path, dataset, cmd)
    out_dir = tmp_path / "crash"
    assert run_cli("--config", config, "--output-dir", out_dir, "run") == 1
    payload = json.loads((out_dir / "run.json").read_text())
    assert payload["outcome"] == "crashed"
    out_dir2 = tmp_path / "crash-allowed"
    assert (
        run_cli("--config", config, "--output-dir", out_dir2, "--allow-failure", "run")
        == 0
    )


def test_run_windows_written_when_predicate_triggers(tmp_path, dataset):
    cmd = NOISY_CMD + ["--dataset", dataset, "--seed", "4"]
    config = write_config(
        tmp_path,
        dataset,
        cmd,
        send_ground_truth=False,
        perturbations=[{"kind": "brightness", "delta": -255, "sensors": [0]}],
        failure_predicate={"stuck_window_frames": 5, "stuck_epsilon_m": 1e-4},
    )
    out_dir = tmp_path / "windows"
    assert run_cli("--config", config, "--output-dir", out_dir, "run") == 0
    windows = json.loads((out_dir / "windows.json").read_text())["windows"]
    assert windows
    assert any(w["trigger"] == "stuck" for w in windows)


def test_run_stop_on_failure_ends_early(tmp_path, dataset):
    cmd = NOISY_CMD + ["--dataset", dataset, "--seed", "4"]
    config = write_config(
        tmp_path,
        dataset,
        cmd,
        send_ground_truth=False,
        stop_on_failure=True,
        perturbations=[{"kind": "brightness", "delta": -255, "sensors": [0]}],
        failure_predicate={"stuck_window_frames": 5, "stuck_epsilon_m": 1e-4},
    )
    out_dir = tmp_path / "early"
    assert run_cli("--config", config, "--output-dir", out_dir, "run") == 0
    payload = json.loads((out_dir / "run.json").read_text())
    assert payload["stopped_early"] is True
    assert len(payload["records"]) < 100


def test_run_missing_dataset_is_config_error(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"dataset": "/no/such.slmf", "algorithm": "x"}))
    assert run_cli("--config", config, "run") == 3


def test_run_bad_perturbation_value_is_config_error(tmp_path, dataset):
    config = write_config(
        tmp_path,
        dataset,
        ORACLE_CMD,
        perturbations=[{"kind": "brightness", "delta": 400, "sensors": [0]}],
    )
    assert run_cli("--config", config, "run") == 3


# ---------------------------------------------------------------------------
# fuzz
# ---------------------------------------------------------------------------


def test_fuzz_single_identity_value(tmp_path, dataset):
    config = write_config(
        tmp_path,
        dataset,
        ORACLE_CMD,
        sweep={"kind": "brightness", "values": [0], "repetitions": 2},
    )
    out_dir = tmp_path / "fuzz"
    assert run_cli("--config", config, "--output-dir", out_dir, "--seed", 2, "--jobs", 1, "fuzz") == 0
    with open(out_dir / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["classification"] == "all_success"
    assert float(rows[0]["mean_ate"]) < 1e-12
    payload = json.loads((out_dir / "sweep.json").read_text())
    assert payload["points"][0]["outcomes"][0]["success"] is True
    assert payload["config"]["seed"] == 2


def test_fuzz_start_stop_step_row_count(tmp_path, dataset):
    config = write_config(
        tmp_path,
        dataset,
        ORACLE_CMD,
        sweep={"kind": "brightness", "start": -250, "stop": 250, "step": 50, "repetitions": 1},
    )
    out_dir = tmp_path / "fuzz2"
    assert run_cli("--config", config, "--output-dir", out_dir, "--jobs", 4, "fuzz") == 0
    with open(out_dir / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 11
    assert [int(r["value"]) for r in rows] == list(range(-250, 251, 50))


def test_fuzz_without_sweep_section_is_config_error(tmp_path, dataset):
    config = write_config(tmp_path, dataset, ORACLE_CMD)
    assert run_cli("--config", config, "fuzz") == 3


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def make_run_dir(tmp_path, rpe_values, positions=None):
    """Craft a recorded run on disk without invoking a subprocess."""
    from slamprobe.image_metrics import ImageMetrics, write_metrics_csv
    from slamprobe.trajectory_metrics import ErrorSeries

    from test_diagnostics import error_rows, make_records, moving_positions

    n = len(rpe_values)
    records = make_records(positions if positions is not None else moving_positions(n))
    rows = tuple(error_rows(records, rpe_values))
    run_dir = tmp_path / "rundir"
    run_dir.mkdir(exist_ok=True)
    (run_dir / "run.json").write_text(
        json.dumps(
            {
                "config": {"seed": 0},
                "outcome": "completed",
                "detail": "",
                "exit_code": 0,
                "stopped_early": False,
                "summary": None,
                "records": [record_to_dict(r) for r in records],
            }
        )
    )
    series = ErrorSeries(rows, 0.0, 0.0, 0.0, n)
    series.write_csv(str(run_dir / "errors.csv"))
    metrics = [
        (i, r.timestamp_ns, ImageMetrics(100.0 + i, 20.0, 5.0))
        for i, r in enumerate(records)
    ]
    write_metrics_csv(str(run_dir / "metrics.csv"), metrics)
    return run_dir, records, rows


def test_diagnose_uses_2m_default_threshold(tmp_path, capsys):
    rpe = [0.5] * 40
    rpe[7] = 2.5  # above the 2.0 default, below any higher setting
    run_dir, records, rows = make_run_dir(tmp_path, rpe)
    out_dir = tmp_path / "diag"
    assert run_cli("--output-dir", out_dir, "diagnose", "--run-dir", run_dir) == 0
    report = json.loads((out_dir / "diagnosis.json").read_text())
    assert report["predicate"]["rpe_threshold_m"] == 2.0
    assert len(report["windows"]) == 1
    assert report["windows"][0]["center_index"] == 7
    assert report["windows"][0]["trigger"] == "rpe"


def test_diagnose_threshold_above_max_error_is_empty(tmp_path):
    run_dir, _, _ = make_run_dir(tmp_path, [0.5] * 20)
    out_dir = tmp_path / "diag2"
    assert (
        run_cli(
            "--output-dir", out_dir, "diagnose", "--run-dir", run_dir, "--rpe-threshold", 99.0
        )
        == 0
    )
    report = json.loads((out_dir / "diagnosis.json").read_text())
    assert report["windows"] == []


def test_diagnose_windows_match_library_oracle(tmp_path):
    import numpy as np

    from slamprobe.diagnostics import FailurePredicate, detect_failures

    rng = np.random.Generator(np.random.PCG64(8))
    rpe = [float(v) for v in rng.exponential(1.0, size=120)]
    run_dir, records, rows = make_run_dir(tmp_path, rpe)
    out_dir = tmp_path / "diag3"
    assert run_cli("--output-dir", out_dir, "diagnose", "--run-dir", run_dir, "--window", 15) == 0
    report = json.loads((out_dir / "diagnosis.json").read_text())
    expected = detect_failures(records, rows, FailurePredicate(), window_frames=15)
    assert [(w["center_index"], w["window"]) for w in report["windows"]] == [
        (w.center_index, [w.window_start_index, w.window_end_index]) for w in expected
    ]
    assert (out_dir / "windows.csv").exists()
    assert (out_dir / "correlation.csv").exists()


def test_diagnose_missing_run_dir_exits_2(tmp_path):
    assert run_cli("diagnose", "--run-dir", tmp_path / "nope") == 2


# ---------------------------------------------------------------------------
# loopthresh
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def loop_dataset(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cliloop") / "loops.slmf")
    synth_dataset(path, SynthParams(seed=3, duration_s=12.0, rate_hz=10.0, laps=2.0))
    return path


def test_loopthresh_end_to_end(tmp_path, loop_dataset):
    cmd = NOISY_CMD + ["--dataset", loop_dataset, "--seed", "1", "--theta-loop", "40"]
    config = write_config(
        tmp_path,
        loop_dataset,
        cmd,
        send_ground_truth=False,
        loop={"window_frames": 4, "increments": {"brightness": [25, 50, 75, 100]}},
    )
    pairs_file = tmp_path / "pairs.json"
    pairs_file.write_text(json.dumps([[11, 131]]))  # camera ordinals 5 and 65
    out_dir = tmp_path / "loop"
    assert run_cli("--config", config, "--output-dir", out_dir, "loopthresh", "--pairs", pairs_file) == 0
    with open(out_dir / "loopthresh.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        row = next(reader)
    assert header == ["tenengrad", "brightness", "contrast"]
    payload = json.loads((out_dir / "loopthresh.json").read_text())
    assert payload["pair_count"] == 1
    assert 0 < payload["thresholds_percent"]["brightness"] < 40.0


def test_loopthresh_empty_pairs_is_usage_error(tmp_path, loop_dataset, capsys):
    config = write_config(tmp_path, loop_dataset, ORACLE_CMD)
    pairs_file = tmp_path / "pairs.json"
    pairs_file.write_text("[]")
    assert run_cli("--config", config, "loopthresh", "--pairs", pairs_file) == 3


def test_loopthresh_never_looping_pair_exits_2(tmp_path, loop_dataset):
    cmd = NOISY_CMD + ["--dataset", loop_dataset, "--seed", "1"]
    config = write_config(
        tmp_path,
        loop_dataset,
        cmd,
        send_ground_truth=False,
        loop={"window_frames": 4, "increments": {"brightness": [25]}},
    )
    pairs_file = tmp_path / "pairs.json"
    pairs_file.write_text(json.dumps([[11, 41]]))  # a quarter lap apart: never loops
    assert run_cli("--config", config, "loopthresh", "--pairs", pairs_file) == 2
