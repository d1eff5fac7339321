"""Command-line entry point wiring all harness modules together.

Subcommands: inspect, synth, run, fuzz, diagnose, loopthresh. Global
flags (--seed, --output-dir, --jobs, --allow-failure, --config) come
before the subcommand. Every output file embeds the fully resolved
configuration including the seed, so a campaign can be reproduced from
its own artifacts.

Exit codes: 0 success, 1 algorithm failure, 2 input/format error,
3 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shlex
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import diagnostics, image_metrics, perturb, runner, synth, trajectory_metrics
from .dataset import (
    DEFAULT_MAX_GAP_NS,
    ImageBuffer,
    associate,
    extract_ground_truth,
    open_dataset,
    scan_dataset,
)
from .errors import ConfigError, HarnessError
from .runner import RunOutcome, TrackingStatus

EXIT_OK = 0
EXIT_ALGORITHM_FAILURE = 1
EXIT_INPUT_ERROR = 2
EXIT_CONFIG_ERROR = 3


@dataclass
class CampaignConfig:
    """Resolved campaign settings: config file merged with CLI flags."""

    dataset: str
    algorithm: str
    seed: int = 0
    output_dir: str = "."
    send_ground_truth: bool = False
    stop_on_failure: bool = False
    start_index: int = 0
    perturbation: perturb.PerturbationConfig = field(
        default_factory=perturb.PerturbationConfig
    )
    sweep: dict = field(default_factory=dict)
    failure_predicate: Optional[diagnostics.FailurePredicate] = None
    loop: dict = field(default_factory=dict)

    def echo(self) -> dict:
        """JSON-safe dump of everything that determines the campaign."""
        pred = None
        if self.failure_predicate is not None:
            pred = {
                "rpe_threshold_m": self.failure_predicate.rpe_threshold_m,
                "stuck_epsilon_m": self.failure_predicate.stuck_epsilon_m,
                "stuck_window_frames": self.failure_predicate.stuck_window_frames,
                "max_frame_time_ns": self.failure_predicate.max_frame_time_ns,
                "treat_crash_as_failure": self.failure_predicate.treat_crash_as_failure,
            }
        return {
            "dataset": self.dataset,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "send_ground_truth": self.send_ground_truth,
            "stop_on_failure": self.stop_on_failure,
            "start_index": self.start_index,
            "perturbation": self.perturbation.raw,
            "sweep": self.sweep,
            "failure_predicate": pred,
            "loop": self.loop,
        }


def _parse_predicate(obj: dict) -> diagnostics.FailurePredicate:
    if not isinstance(obj, dict):
        raise ConfigError("failure_predicate must be an object")
    known = {
        "rpe_threshold_m",
        "stuck_epsilon_m",
        "stuck_window_frames",
        "max_frame_time_ms",
        "treat_crash_as_failure",
    }
    for key in obj:
        if key not in known:
            raise ConfigError(f"failure_predicate.{key}: unexpected field")
    kwargs = {}
    for key in ("rpe_threshold_m", "stuck_epsilon_m"):
        if key in obj:
            kwargs[key] = float(obj[key])
    if "stuck_window_frames" in obj:
        kwargs["stuck_window_frames"] = int(obj["stuck_window_frames"])
    if "max_frame_time_ms" in obj:
        kwargs["max_frame_time_ns"] = int(float(obj["max_frame_time_ms"]) * 1e6)
    if "treat_crash_as_failure" in obj:
        kwargs["treat_crash_as_failure"] = bool(obj["treat_crash_as_failure"])
    return diagnostics.FailurePredicate(**kwargs)


def load_campaign(args) -> CampaignConfig:
    raw = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} does not exist")
        with open(args.config) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")

    dataset = getattr(args, "dataset", None) or raw.get("dataset")
    algorithm = getattr(args, "algorithm", None) or raw.get("algorithm")
    if not dataset:
        raise ConfigError("no dataset given (flag --dataset or config key)")
    if not algorithm:
        raise ConfigError("no algorithm command given (flag --algorithm or config key)")
    if not os.path.exists(dataset):
        raise ConfigError(f"dataset {dataset} does not exist")

    perturbation = perturb.parse_config(json.dumps(raw))
    predicate = None
    if "failure_predicate" in raw:
        predicate = _parse_predicate(raw["failure_predicate"])

    config = CampaignConfig(
        dataset=dataset,
        algorithm=algorithm if isinstance(algorithm, str) else shlex.join(algorithm),
        seed=args.seed if args.seed is not None else int(raw.get("seed", 0)),
        output_dir=args.output_dir or raw.get("output_dir", "."),
        send_ground_truth=bool(raw.get("send_ground_truth", False)),
        stop_on_failure=bool(raw.get("stop_on_failure", False)),
        start_index=int(getattr(args, "start_index", 0) or raw.get("start_index", 0)),
        perturbation=perturbation,
        sweep=raw.get("sweep", {}),
        failure_predicate=predicate,
        loop=raw.get("loop", {}),
    )
    return config


def _ensure_output_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    stats = scan_dataset(args.dataset)
    summary = {
        "path": args.dataset,
        "sensors": [
            {
                "sensor_id": s.sensor_id,
                "kind": s.kind.name,
                "name": s.name,
                "frames": stats.frame_counts[s.sensor_id],
            }
            for s in stats.sensors
        ],
        "total_frames": stats.total_frames,
        "first_timestamp_ns": stats.first_timestamp_ns,
        "last_timestamp_ns": stats.last_timestamp_ns,
        "duration_s": stats.duration_ns / 1e9,
        "timestamps_monotonic": True,  # the reader rejects regressions
    }
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(f"dataset {args.dataset}")
        print(f"  frames   {stats.total_frames}")
        print(f"  duration {stats.duration_ns / 1e9:.3f} s")
        print("  timestamps monotonic: yes")
        for entry in summary["sensors"]:
            print(
                f"  sensor {entry['sensor_id']:3d}  {entry['kind']:<12} "
                f"{entry['name']:<16} {entry['frames']} frames"
            )
    if args.output_dir:
        _write_json(os.path.join(_ensure_output_dir(args.output_dir), "inspect.json"), summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    params = synth.SynthParams(
        seed=args.seed if args.seed is not None else 0,
        duration_s=args.duration_s,
        rate_hz=args.rate_hz,
        width=args.width,
        height=args.height,
        radius_m=args.radius_m,
        laps=args.laps,
    )
    count = synth.synth_dataset(args.out, params)
    print(f"wrote {args.out}: {count} camera frames over {params.duration_s} s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _build_perturber(config: CampaignConfig, duration_ns: int) -> perturb.Perturber:
    specs = config.perturbation.specs
    plan = None
    if config.perturbation.segments is not None:
        params = config.perturbation.segments
        seed = params.seed if params.seed is not None else config.seed
        plan = perturb.plan_segments(seed, duration_ns, params)
    return perturb.Perturber(specs, plan)


def _error_series_of(result, reference, max_gap_ns=DEFAULT_MAX_GAP_NS):
    trajectory = result.estimate_trajectory()
    if reference is None or trajectory is None or len(trajectory) < 3:
        return None
    try:
        pairs = associate(trajectory, reference, max_gap_ns)
        return trajectory_metrics.compute_error_series(trajectory, reference, pairs)
    except HarnessError:
        return None


def cmd_run(args) -> int:
    config = load_campaign(args)
    out_dir = _ensure_output_dir(config.output_dir)
    stats = scan_dataset(config.dataset)
    sensors, frames = open_dataset(config.dataset)
    perturb.check_specs(config.perturbation.specs, sensors)
    perturber = _build_perturber(config, stats.duration_ns)

    try:
        reference = extract_ground_truth(list(open_dataset(config.dataset)[1]))
    except HarnessError:
        reference = None

    metrics_rows = []

    def observer(frame):
        if isinstance(frame.payload, ImageBuffer):
            metrics_rows.append(
                (
                    frame.seq_index,
                    frame.timestamp_ns,
                    image_metrics.compute_metrics(frame.payload),
                )
            )

    stop_predicate = None
    if config.stop_on_failure and config.failure_predicate is not None:
        stop_predicate = diagnostics.OnlineFailureMonitor(
            config.failure_predicate, reference
        )

    session = runner.AlgorithmSession.launch(config.algorithm, sensors)
    result = runner.run_sequence(
        session,
        frames,
        sensors,
        perturber,
        send_ground_truth=config.send_ground_truth,
        start_index=config.start_index,
        stop_predicate=stop_predicate,
        frame_observer=observer,
    )

    series = _error_series_of(result, reference)
    run_payload = {
        "config": config.echo(),
        "outcome": result.outcome.value,
        "detail": result.detail,
        "exit_code": result.exit_code,
        "stopped_early": result.stopped_early,
        "summary": series.summary() if series is not None else None,
        "ok_frames": sum(1 for r in result.records if r.status == TrackingStatus.OK),
        "records": [runner.record_to_dict(r) for r in result.records],
    }
    _write_json(os.path.join(out_dir, "run.json"), run_payload)
    image_metrics.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics_rows)
    if series is not None:
        series.write_csv(os.path.join(out_dir, "errors.csv"))

    if config.failure_predicate is not None:
        episodes = diagnostics.detect_failures(
            result.records,
            series.rows if series is not None else (),
            config.failure_predicate,
            metrics=metrics_rows,
            outcome=result.outcome,
        )
        if episodes:
            _write_json(
                os.path.join(out_dir, "windows.json"),
                {"windows": [_window_to_dict(w) for w in episodes]},
            )

    if series is not None:
        print(f"run {result.outcome.value}: ate_rmse_m={series.ate_rmse_m!r}")
    else:
        print(f"run {result.outcome.value}: no error series (missing ground truth or estimates)")
    if result.outcome != RunOutcome.COMPLETED and not args.allow_failure:
        print(f"algorithm failure: {result.detail}", file=sys.stderr)
        return EXIT_ALGORITHM_FAILURE
    return EXIT_OK


def _window_to_dict(w: diagnostics.FrameOfInterest) -> dict:
    return {
        "center_index": w.center_index,
        "center_seq_index": w.center_seq_index,
        "window": [w.window_start_index, w.window_end_index],
        "trigger": w.trigger,
        "rows": list(w.rows),
    }


# ---------------------------------------------------------------------------
# fuzz
# ---------------------------------------------------------------------------


def _sweep_values(section: dict) -> list[int]:
    if "values" in section:
        values = [int(v) for v in section["values"]]
    elif {"start", "stop", "step"} <= set(section):
        start, stop, step = (int(section[k]) for k in ("start", "stop", "step"))
        if step <= 0:
            raise ConfigError("sweep.step must be positive")
        values = list(range(start, stop + 1, step))
    else:
        raise ConfigError("sweep needs either 'values' or start/stop/step")
    if not values:
        raise ConfigError("sweep has no values")
    return values


def cmd_fuzz(args) -> int:
    config = load_campaign(args)
    section = config.sweep
    if not section:
        raise ConfigError("fuzz needs a 'sweep' section in the config")
    kind = section.get("kind")
    if kind not in ("brightness", "contrast", "blur"):
        raise ConfigError(f"sweep.kind: unknown perturbation kind {kind!r}")
    values = _sweep_values(section)
    repetitions = int(section.get("repetitions", 5))
    segment_params = config.perturbation.segments or perturb.SegmentParams()

    result = diagnostics.run_sweep(
        config.dataset,
        config.algorithm,
        kind,
        values,
        repetitions=repetitions,
        segment_params=segment_params,
        base_seed=config.seed,
        predicate=config.failure_predicate or diagnostics.FailurePredicate(),
        send_ground_truth=config.send_ground_truth,
        ate_factor=float(section.get("ate_factor", diagnostics.DEFAULT_ATE_FAILURE_FACTOR)),
        ate_offset_m=float(
            section.get("ate_offset_m", diagnostics.DEFAULT_ATE_FAILURE_OFFSET_M)
        ),
        jobs=args.jobs,
    )

    out_dir = _ensure_output_dir(config.output_dir)
    _write_csv(
        os.path.join(out_dir, "sweep.csv"),
        ("value", "mean_ate", "classification"),
        [(p.value, p.mean_ate_m, p.classification.value) for p in result.points],
    )
    _write_json(
        os.path.join(out_dir, "sweep.json"),
        {
            "config": config.echo(),
            "kind": result.kind,
            "repetitions": result.repetitions,
            "base_seed": result.base_seed,
            "baseline_ate_m": result.baseline_ate_m,
            "failure_ate_bound_m": result.failure_ate_bound_m,
            "points": [
                {
                    "value": p.value,
                    "mean_ate_m": p.mean_ate_m,
                    "classification": p.classification.value,
                    "outcomes": [
                        {
                            "rep": o.rep,
                            "seed": o.seed,
                            "success": o.success,
                            "ate_rmse_m": o.ate_rmse_m,
                            "reason": o.reason,
                        }
                        for o in p.outcomes
                    ],
                }
                for p in result.points
            ],
        },
    )
    for point in result.points:
        print(
            f"value {point.value:+4d}  mean_ate={_fmt(point.mean_ate_m) or 'n/a':<22} "
            f"{point.classification.value}"
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------------


def _predicate_from_flags(args) -> diagnostics.FailurePredicate:
    kwargs = {}
    if args.rpe_threshold is not None:
        kwargs["rpe_threshold_m"] = args.rpe_threshold
    if args.stuck_epsilon is not None:
        kwargs["stuck_epsilon_m"] = args.stuck_epsilon
    if args.stuck_window is not None:
        kwargs["stuck_window_frames"] = args.stuck_window
    if args.max_frame_time_ms is not None:
        kwargs["max_frame_time_ns"] = int(args.max_frame_time_ms * 1e6)
    return diagnostics.FailurePredicate(**kwargs)


def cmd_diagnose(args) -> int:
    run_path = os.path.join(args.run_dir, "run.json")
    if not os.path.exists(run_path):
        raise HarnessError(f"{run_path} does not exist; run `slamprobe run` first")
    with open(run_path) as fh:
        run_payload = json.load(fh)
    records = [runner.record_from_dict(r) for r in run_payload["records"]]
    outcome = RunOutcome(run_payload["outcome"])

    errors_path = os.path.join(args.run_dir, "errors.csv")
    error_rows = (
        trajectory_metrics.read_errors_csv(errors_path)
        if os.path.exists(errors_path)
        else []
    )
    metrics_path = os.path.join(args.run_dir, "metrics.csv")
    metrics_rows = (
        image_metrics.read_metrics_csv(metrics_path)
        if os.path.exists(metrics_path)
        else []
    )

    pred = _predicate_from_flags(args)
    episodes = diagnostics.detect_failures(
        records,
        error_rows,
        pred,
        metrics=metrics_rows,
        window_frames=args.window,
        outcome=outcome,
    )
    correlation = None
    try:
        correlation = diagnostics.correlate(error_rows, metrics_rows)
    except HarnessError:
        pass

    out_dir = _ensure_output_dir(args.output_dir or args.run_dir)
    report = {
        "config": run_payload.get("config"),
        "predicate": {
            "rpe_threshold_m": pred.rpe_threshold_m,
            "stuck_epsilon_m": pred.stuck_epsilon_m,
            "stuck_window_frames": pred.stuck_window_frames,
            "max_frame_time_ns": pred.max_frame_time_ns,
            "treat_crash_as_failure": pred.treat_crash_as_failure,
        },
        "window_frames": args.window,
        "windows": [_window_to_dict(w) for w in episodes],
        "correlation": None
        if correlation is None
        else {
            "pearson": correlation.pearson,
            "undefined": list(correlation.undefined),
            "error_column": correlation.error_column,
            "rows": len(correlation.rows),
        },
    }
    _write_json(os.path.join(out_dir, "diagnosis.json"), report)

    window_columns = (
        "window_id",
        "trigger",
        "center_seq_index",
        "index",
        "seq_index",
        "timestamp_ns",
        "status",
        "triggered",
        "processing_time_ns",
        "ate_residual_m",
        "rpe_trans_m",
        "rpe_rot_rad",
        "brightness",
        "contrast",
        "tenengrad",
    )
    window_rows = []
    for wid, w in enumerate(episodes):
        for row in w.rows:
            window_rows.append(
                [wid, w.trigger, w.center_seq_index]
                + [row.get(col) for col in window_columns[3:]]
            )
    _write_csv(os.path.join(out_dir, "windows.csv"), window_columns, window_rows)

    if correlation is not None:
        _write_csv(
            os.path.join(out_dir, "correlation.csv"),
            ("frame_index", "timestamp_ns", "brightness", "contrast", "tenengrad", "error"),
            [
                (
                    r["frame_index"],
                    r["timestamp_ns"],
                    r["brightness"],
                    r["contrast"],
                    r["tenengrad"],
                    r["error"],
                )
                for r in correlation.rows
            ],
        )

    print(f"{len(episodes)} failure window(s)")
    if correlation is not None:
        for name, value in correlation.pearson.items():
            print(f"  pearson {name:<11} vs {correlation.error_column}: {value:+.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# loopthresh
# ---------------------------------------------------------------------------


def cmd_loopthresh(args) -> int:
    config = load_campaign(args)
    if not os.path.exists(args.pairs):
        raise ConfigError(f"pairs file {args.pairs} does not exist")
    with open(args.pairs) as fh:
        try:
            raw_pairs = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"pairs file is not valid JSON: {exc}") from exc
    if not isinstance(raw_pairs, list) or not raw_pairs:
        raise ConfigError("pairs file must hold a non-empty JSON array of [a, b] pairs")
    pairs = []
    for entry in raw_pairs:
        if not isinstance(entry, list) or len(entry) != 2:
            raise ConfigError(f"pair {entry!r} is not an [a, b] pair")
        pairs.append((int(entry[0]), int(entry[1])))

    loop_cfg = config.loop
    increments = loop_cfg.get(
        "increments", {"brightness": list(range(25, 256, 25))}
    )
    if not isinstance(increments, dict) or not increments:
        raise ConfigError("loop.increments must map kinds to ascending value lists")

    estimate = diagnostics.estimate_loop_thresholds(
        config.dataset,
        config.algorithm,
        pairs,
        {k: [int(v) for v in vs] for k, vs in increments.items()},
        window_frames=int(loop_cfg.get("window_frames", diagnostics.DEFAULT_LOOP_WINDOW_FRAMES)),
        perturb_b=bool(loop_cfg.get("perturb_b", False)),
        send_ground_truth=config.send_ground_truth,
    )

    out_dir = _ensure_output_dir(config.output_dir)
    _write_csv(
        os.path.join(out_dir, "loopthresh.csv"),
        ("tenengrad", "brightness", "contrast"),
        [
            (
                estimate.thresholds["tenengrad"],
                estimate.thresholds["brightness"],
                estimate.thresholds["contrast"],
            )
        ],
    )
    _write_json(
        os.path.join(out_dir, "loopthresh.json"),
        {
            "config": config.echo(),
            "pairs": [list(p) for p in pairs],
            "thresholds_percent": estimate.thresholds,
            "pair_count": estimate.pair_count,
            "rejected_pairs": [list(p) for p in estimate.rejected_pairs],
            "details": [
                {
                    "pair": list(d.pair),
                    "kind": d.kind,
                    "max_sustaining_value": d.max_sustaining_value,
                    "linked_timestamps_ns": list(d.linked_frames),
                    "percent_differences": d.percent_differences,
                }
                for d in estimate.details
            ],
        },
    )
    for name in ("tenengrad", "brightness", "contrast"):
        print(f"{name:<11} threshold: {estimate.thresholds[name]:.1f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slamprobe",
        description="Benchmarking and fuzzing harness for pose-estimation algorithms",
    )
    parser.add_argument("--seed", type=int, default=None, help="campaign seed")
    parser.add_argument("--output-dir", default=None, help="directory for output files")
    parser.add_argument(
        "--jobs", type=int, default=os.cpu_count() or 1, help="parallel sweep runs"
    )
    parser.add_argument(
        "--allow-failure",
        action="store_true",
        help="exit 0 even when the algorithm crashes or times out",
    )
    parser.add_argument("--config", default=None, help="campaign config JSON file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", help="summarize a dataset file")
    p.add_argument("dataset")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--rate-hz", type=float, default=10.0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--radius-m", type=float, default=2.0)
    p.add_argument("--laps", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", help="run one algorithm over one dataset")
    p.add_argument("--dataset")
    p.add_argument("--algorithm")
    p.add_argument("--start-index", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("fuzz", help="perturbation sweep with repetitions")
    p.add_argument("--dataset")
    p.add_argument("--algorithm")
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("diagnose", help="offline failure windows + correlation")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--rpe-threshold", type=float, default=None)
    p.add_argument("--stuck-epsilon", type=float, default=None)
    p.add_argument("--stuck-window", type=int, default=None)
    p.add_argument("--max-frame-time-ms", type=float, default=None)
    p.add_argument("--window", type=int, default=diagnostics.DEFAULT_WINDOW_FRAMES)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("loopthresh", help="loop-closure robustness thresholds")
    p.add_argument("--dataset")
    p.add_argument("--algorithm")
    p.add_argument("--pairs", required=True, help="JSON file of [a, b] frame pairs")
    p.set_defaults(func=cmd_loopthresh)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except HarnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
