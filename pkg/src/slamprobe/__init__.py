"""Benchmarking and fuzzing harness for pose-estimation algorithms.

The package streams sensor frames to algorithm subprocesses over a
length-prefixed wire protocol, injects seeded per-frame perturbations,
computes image-quality and trajectory-error metrics, and runs automated
failure-diagnosis and robustness-sweep campaigns. See the README for the
file formats and the CLI walkthrough.
"""

from .dataset import (
    DepthBuffer,
    Frame,
    ImageBuffer,
    ImuSample,
    PointCloud,
    Pose,
    SensorKind,
    SensorSpec,
    Trajectory,
    associate,
    extract_ground_truth,
    open_dataset,
    read_all,
    scan_dataset,
    trajectory_length,
    write_dataset,
)
from .diagnostics import (
    Classification,
    FailurePredicate,
    FrameOfInterest,
    LoopThresholdEstimate,
    SweepResult,
    correlate,
    detect_failures,
    estimate_loop_thresholds,
    run_sweep,
)
from .errors import HarnessError
from .image_metrics import (
    ImageMetrics,
    brightness,
    compute_metrics,
    contrast,
    percent_difference,
    tenengrad,
    to_grey,
)
from .perturb import (
    PerturbationSpec,
    SegmentPlan,
    apply_blur,
    apply_brightness,
    apply_contrast,
    parse_config,
    perturb_frame,
    plan_segments,
)
from .runner import (
    AlgorithmSession,
    RunOutcome,
    RunRecord,
    RunResult,
    TrackingStatus,
    execute_run,
    run_sequence,
)
from .trajectory_metrics import (
    ErrorSeries,
    RigidTransform,
    align_umeyama,
    ate_normalized,
    ate_rmse,
    compute_error_series,
    rpe_series,
)

__version__ = "0.1.0"

__all__ = [
    "AlgorithmSession",
    "Classification",
    "DepthBuffer",
    "ErrorSeries",
    "FailurePredicate",
    "Frame",
    "FrameOfInterest",
    "HarnessError",
    "ImageBuffer",
    "ImageMetrics",
    "ImuSample",
    "LoopThresholdEstimate",
    "PerturbationSpec",
    "PointCloud",
    "Pose",
    "RigidTransform",
    "RunOutcome",
    "RunRecord",
    "RunResult",
    "SegmentPlan",
    "SensorKind",
    "SensorSpec",
    "SweepResult",
    "TrackingStatus",
    "Trajectory",
    "align_umeyama",
    "apply_blur",
    "apply_brightness",
    "apply_contrast",
    "associate",
    "ate_normalized",
    "ate_rmse",
    "brightness",
    "compute_error_series",
    "compute_metrics",
    "contrast",
    "correlate",
    "detect_failures",
    "estimate_loop_thresholds",
    "execute_run",
    "extract_ground_truth",
    "open_dataset",
    "parse_config",
    "percent_difference",
    "perturb_frame",
    "plan_segments",
    "read_all",
    "rpe_series",
    "run_sequence",
    "run_sweep",
    "scan_dataset",
    "tenengrad",
    "to_grey",
    "trajectory_length",
    "write_dataset",
]
