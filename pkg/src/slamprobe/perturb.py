"""Seeded, deterministic corruption of camera frames.

Perturbations are described declaratively (JSON), validated up front, and
applied at frame-delivery time so the on-disk dataset is never modified.
All kernels are pure integer arithmetic with round-half-up, so the
perturbed stream is bit-identical across runs and platforms for a fixed
(config, seed, dataset) triple.

Random segment placement uses numpy's PCG64 generator; see
:func:`plan_segments` for the exact draw procedure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import Frame, ImageBuffer, SensorSpec, IMAGE_KINDS
from .errors import ConfigError

BRIGHTNESS_RANGE = (-255, 255)
CONTRAST_RANGE = (-255, 255)
BLUR_RANGE = (1, 10)

DEFAULT_SEGMENT_DURATION_NS = 1_000_000_000  # 1 s
DEFAULT_MAX_FRACTION = 0.10
MAX_SEGMENT_REJECTIONS = 1000

_PARAM_FIELD = {"brightness": "delta", "contrast": "level", "blur": "kernel"}
_PARAM_RANGE = {
    "brightness": BRIGHTNESS_RANGE,
    "contrast": CONTRAST_RANGE,
    "blur": BLUR_RANGE,
}


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation kernel plus the selector deciding where it applies.

    ``frame_ranges`` are half-open [start, end) ranges over the stream's
    ``seq_index``; ``time_ranges`` are half-open [start, end) ranges in
    nanoseconds. A frame matches when its sensor is listed and it falls
    inside at least one range of every range list that is present.
    """

    kind: str  # "brightness" | "contrast" | "blur"
    value: int
    sensors: tuple[int, ...]
    frame_ranges: tuple[tuple[int, int], ...] = ()
    time_ranges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.kind not in _PARAM_RANGE:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        lo, hi = _PARAM_RANGE[self.kind]
        if not isinstance(self.value, int) or not lo <= self.value <= hi:
            raise ConfigError(
                f"{self.kind} value {self.value!r} outside [{lo}, {hi}]"
            )
        object.__setattr__(self, "sensors", tuple(self.sensors))
        if not self.sensors:
            raise ConfigError("perturbation selector lists no sensors")

    def matches(self, frame: Frame) -> bool:
        if frame.sensor_id not in self.sensors:
            return False
        if self.frame_ranges and not any(
            lo <= frame.seq_index < hi for lo, hi in self.frame_ranges
        ):
            return False
        if self.time_ranges and not any(
            lo <= frame.timestamp_ns < hi for lo, hi in self.time_ranges
        ):
            return False
        return True


@dataclass(frozen=True)
class SegmentParams:
    seed: Optional[int] = None  # None: caller supplies the campaign seed
    segment_duration_ns: int = DEFAULT_SEGMENT_DURATION_NS
    max_fraction: float = DEFAULT_MAX_FRACTION


@dataclass(frozen=True)
class SegmentPlan:
    """Disjoint [start_ns, end_ns) intervals selected for perturbation."""

    seed: int
    segment_duration_ns: int
    max_fraction: float
    segments: tuple[tuple[int, int], ...]
    too_short: bool = False  # sequence shorter than one segment

    def covers(self, timestamp_ns: int) -> bool:
        return any(lo <= timestamp_ns < hi for lo, hi in self.segments)

    def covered_ns(self) -> int:
        return sum(hi - lo for lo, hi in self.segments)


@dataclass(frozen=True)
class PerturbationConfig:
    specs: tuple[PerturbationSpec, ...] = ()
    segments: Optional[SegmentParams] = None
    raw: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _parse_ranges(value, what: str, scale=None) -> tuple[tuple[int, int], ...]:
    ranges = []
    for entry in value:
        if not isinstance(entry, (list, tuple)) or len(entry) != 2:
            raise ConfigError(f"{what} entries must be [start, end) pairs")
        lo, hi = entry
        if scale is not None:
            lo, hi = scale(lo), scale(hi)
        if not isinstance(lo, int) or not isinstance(hi, int) or lo < 0 or hi <= lo:
            raise ConfigError(f"{what} range [{lo}, {hi}) is not a valid interval")
        ranges.append((lo, hi))
    return tuple(ranges)


def _parse_spec(obj: dict, index: int) -> PerturbationSpec:
    where = f"perturbations[{index}]"
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    kind = obj.get("kind")
    if kind not in _PARAM_FIELD:
        raise ConfigError(f"{where}.kind: unknown perturbation kind {kind!r}")
    param_field = _PARAM_FIELD[kind]
    allowed = {"kind", param_field, "sensors", "frame_ranges", "time_ranges"}
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}: unexpected field for kind {kind!r}")
    if param_field not in obj:
        raise ConfigError(f"{where}.{param_field}: missing required parameter")
    value = obj[param_field]
    lo, hi = _PARAM_RANGE[kind]
    if not isinstance(value, int) or isinstance(value, bool) or not lo <= value <= hi:
        raise ConfigError(
            f"{where}.{param_field}: {param_field} out of range, "
            f"expected integer in [{lo}, {hi}], got {value!r}"
        )
    sensors = obj.get("sensors")
    if (
        not isinstance(sensors, list)
        or not sensors
        or not all(isinstance(s, int) and not isinstance(s, bool) for s in sensors)
    ):
        raise ConfigError(f"{where}.sensors: must be a non-empty list of sensor ids")
    frame_ranges = ()
    if "frame_ranges" in obj:
        frame_ranges = _parse_ranges(obj["frame_ranges"], f"{where}.frame_ranges")
    time_ranges = ()
    if "time_ranges" in obj:
        time_ranges = _parse_ranges(
            obj["time_ranges"],
            f"{where}.time_ranges",
            scale=lambda s: int(round(float(s) * 1e9)),
        )
    return PerturbationSpec(kind, value, tuple(sensors), frame_ranges, time_ranges)


def _parse_segments(obj: dict) -> SegmentParams:
    if not isinstance(obj, dict):
        raise ConfigError("segments must be an object")
    for key in obj:
        if key not in ("seed", "duration_s", "max_fraction"):
            raise ConfigError(f"segments.{key}: unexpected field")
    seed = obj.get("seed")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool)):
        raise ConfigError("segments.seed: must be an integer")
    duration_s = obj.get("duration_s", 1.0)
    if not isinstance(duration_s, (int, float)) or duration_s <= 0:
        raise ConfigError("segments.duration_s: must be positive")
    fraction = obj.get("max_fraction", DEFAULT_MAX_FRACTION)
    if not isinstance(fraction, (int, float)) or not 0.0 <= fraction <= 1.0:
        raise ConfigError("segments.max_fraction: must lie in [0, 1]")
    return SegmentParams(
        seed=seed,
        segment_duration_ns=int(round(float(duration_s) * 1e9)),
        max_fraction=float(fraction),
    )


def parse_config(json_text: str) -> PerturbationConfig:
    """Parse and validate a campaign perturbation config.

    The schema is documented in the README: a top-level ``perturbations``
    array plus an optional ``segments`` object. Unknown top-level keys are
    left alone (the sweep section is consumed elsewhere); unknown keys
    inside a perturbation object are rejected.
    """
    try:
        raw = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"perturbation config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("perturbation config must be a JSON object")
    specs = []
    entries = raw.get("perturbations", [])
    if not isinstance(entries, list):
        raise ConfigError("perturbations must be an array")
    for i, obj in enumerate(entries):
        specs.append(_parse_spec(obj, i))
    segments = _parse_segments(raw["segments"]) if "segments" in raw else None
    return PerturbationConfig(tuple(specs), segments, raw)


def check_specs(specs: Iterable[PerturbationSpec], sensors: Sequence[SensorSpec]) -> None:
    """Reject specs that target unknown or non-camera-image sensors.

    Run once at campaign start so misconfiguration fails before any frame
    is processed.
    """
    kind_of = {s.sensor_id: s.kind for s in sensors}
    for spec in specs:
        for sid in spec.sensors:
            if sid not in kind_of:
                raise ConfigError(f"perturbation targets unknown sensor {sid}")
            if kind_of[sid] not in IMAGE_KINDS:
                raise ConfigError(
                    f"perturbation targets sensor {sid} of kind "
                    f"{kind_of[sid].name}; only 8-bit camera images can be perturbed"
                )


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def apply_brightness(img: ImageBuffer, delta: int) -> ImageBuffer:
    """Shift every intensity by ``delta``, clamped to [0, 255]."""
    if delta == 0:
        return img
    arr = img.to_array().astype(np.int16) + delta
    out = np.clip(arr, 0, 255).astype(np.uint8)
    return ImageBuffer(img.width, img.height, img.channels, out.tobytes())


def apply_contrast(img: ImageBuffer, level: int) -> ImageBuffer:
    """Scale intensities about mid-grey 128 by (1 + level/255).

    level 0 is the identity, -255 collapses the image to uniform 128,
    +255 doubles the distance from mid-grey. Computed exactly in integers
    with round-half-up before clamping.
    """
    if level == 0:
        return img
    arr = img.to_array().astype(np.int64)
    # round_half_up(128 + (255+level)*(p-128)/255) == floor((2*num + 255)/510)
    num = 128 * 255 + (255 + level) * (arr - 128)
    out = np.clip((2 * num + 255) // 510, 0, 255).astype(np.uint8)
    return ImageBuffer(img.width, img.height, img.channels, out.tobytes())


def apply_blur(img: ImageBuffer, kernel: int) -> ImageBuffer:
    """k x k box mean per channel with replicated borders.

    The window for output (x, y) spans offsets [-floor((k-1)/2),
    +floor(k/2)] in both axes; sample coordinates are clamped into the
    image. Sums are integer and divided by k^2 with round-half-up.
    """
    if not BLUR_RANGE[0] <= kernel <= BLUR_RANGE[1]:
        raise ValueError(f"blur kernel {kernel} outside {BLUR_RANGE}")
    if kernel == 1:
        return img
    arr = img.to_array().astype(np.int64)
    before = (kernel - 1) // 2
    after = kernel // 2
    padded = np.pad(arr, ((before, after), (before, after), (0, 0)), mode="edge")
    # Integral image -> exact k x k window sums.
    integral = np.zeros(
        (padded.shape[0] + 1, padded.shape[1] + 1, padded.shape[2]), dtype=np.int64
    )
    integral[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    h, w = arr.shape[0], arr.shape[1]
    sums = (
        integral[kernel : kernel + h, kernel : kernel + w]
        - integral[:h, kernel : kernel + w]
        - integral[kernel : kernel + h, :w]
        + integral[:h, :w]
    )
    denom = kernel * kernel
    out = ((2 * sums + denom) // (2 * denom)).astype(np.uint8)
    return ImageBuffer(img.width, img.height, img.channels, out.tobytes())


def apply_spec(img: ImageBuffer, spec: PerturbationSpec) -> ImageBuffer:
    if spec.kind == "brightness":
        return apply_brightness(img, spec.value)
    if spec.kind == "contrast":
        return apply_contrast(img, spec.value)
    if spec.kind == "blur":
        return apply_blur(img, spec.value)
    raise ConfigError(f"unknown perturbation kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Segment planning
# ---------------------------------------------------------------------------


def plan_segments(
    seed: int,
    sequence_duration_ns: int,
    params: SegmentParams | None = None,
) -> SegmentPlan:
    """Draw disjoint perturbation segments covering at most ``max_fraction``.

    Procedure (normative so plans are comparable across implementations):
    starts are drawn with ``numpy.random.Generator(PCG64(seed))`` via
    ``integers(0, duration - segment_duration, endpoint=True)``; a draw
    overlapping an accepted segment is rejected; drawing stops when the
    next segment would exceed the budget or after 1000 rejections.

    A sequence shorter than one segment yields an empty plan flagged
    ``too_short``.
    """
    params = params or SegmentParams()
    seg_ns = params.segment_duration_ns
    if sequence_duration_ns <= seg_ns:
        return SegmentPlan(seed, seg_ns, params.max_fraction, (), too_short=True)
    budget = params.max_fraction * sequence_duration_ns
    rng = np.random.Generator(np.random.PCG64(seed))
    accepted: list[tuple[int, int]] = []
    covered = 0
    rejections = 0
    while covered + seg_ns <= budget and rejections < MAX_SEGMENT_REJECTIONS:
        start = int(rng.integers(0, sequence_duration_ns - seg_ns, endpoint=True))
        end = start + seg_ns
        if any(start < hi and lo < end for lo, hi in accepted):
            rejections += 1
            continue
        accepted.append((start, end))
        covered += seg_ns
    accepted.sort()
    return SegmentPlan(seed, seg_ns, params.max_fraction, tuple(accepted))


# ---------------------------------------------------------------------------
# Frame application
# ---------------------------------------------------------------------------


def perturb_frame(
    frame: Frame,
    specs: Sequence[PerturbationSpec],
    plan: SegmentPlan | None = None,
) -> Frame:
    """Return the frame as the algorithm should see it.

    Kernels apply only when the frame matches a spec selector and, if a
    segment plan is given, its timestamp falls inside a planned segment.
    Matching specs compose in config order. Non-matching frames are
    returned untouched (same object), so the original stream is never
    copied, let alone mutated.
    """
    if plan is not None and not plan.covers(frame.timestamp_ns):
        return frame
    img = frame.payload
    if not isinstance(img, ImageBuffer):
        return frame
    touched = False
    for spec in specs:
        if spec.matches(frame):
            img = apply_spec(img, spec)
            touched = True
    if not touched or img is frame.payload:
        return frame
    return Frame(frame.sensor_id, frame.timestamp_ns, img, frame.seq_index)


class Perturber:
    """Bound (specs, plan) pair applied frame by frame during a run."""

    def __init__(
        self,
        specs: Sequence[PerturbationSpec] = (),
        plan: SegmentPlan | None = None,
    ):
        self.specs = tuple(specs)
        self.plan = plan

    def __call__(self, frame: Frame) -> Frame:
        if not self.specs:
            return frame
        return perturb_frame(frame, self.specs, self.plan)
