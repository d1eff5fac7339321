"""Desk-scale synthetic dataset: circular trajectory with rendered images.

The camera orbits a circle at constant speed; each tick emits a
ground-truth pose followed by a grey image at the same timestamp. The
image pattern is a smooth function of the pose only (plus per-seed phase
constants), so revisiting a location after a full lap reproduces the
image bit-for-bit. That makes the datasets usable for loop-closure
experiments in addition to plain accuracy runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .dataset import Frame, ImageBuffer, Pose, SensorKind, SensorSpec, write_dataset

CAMERA_SENSOR_ID = 0
GROUND_TRUTH_SENSOR_ID = 1


@dataclass(frozen=True)
class SynthParams:
    seed: int = 0
    duration_s: float = 10.0
    rate_hz: float = 10.0
    width: int = 64
    height: int = 48
    radius_m: float = 2.0
    laps: float = 1.0

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_s * self.rate_hz))


def synth_sensors(params: SynthParams) -> list[SensorSpec]:
    return [
        SensorSpec(
            CAMERA_SENSOR_ID,
            SensorKind.CAMERA_GREY,
            "cam0",
            '{"width": %d, "height": %d, "rate_hz": %s}'
            % (params.width, params.height, params.rate_hz),
        ),
        SensorSpec(GROUND_TRUTH_SENSOR_ID, SensorKind.GROUND_TRUTH, "ground_truth"),
    ]


def _render_image(params: SynthParams, phases: np.ndarray, yaw: float, position) -> ImageBuffer:
    xs = np.arange(params.width, dtype=np.float64)
    ys = np.arange(params.height, dtype=np.float64)
    col = np.sin(2.0 * math.pi * 2.0 * xs / params.width + phases[0] + yaw)
    row = np.cos(2.0 * math.pi * 1.0 * ys / params.height + phases[1] + 3.0 * position[0])
    values = 127.5 + 60.0 * col[np.newaxis, :] + 40.0 * row[:, np.newaxis]
    pixels = np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)
    return ImageBuffer.from_array(pixels)


def synth_frames(params: SynthParams) -> Iterator[Frame]:
    rng = np.random.Generator(np.random.PCG64(params.seed))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=2)
    n = params.frame_count
    for k in range(n):
        timestamp_ns = round(k * 1e9 / params.rate_hz)
        theta = 2.0 * math.pi * params.laps * k / n
        position = (
            params.radius_m * math.cos(theta),
            params.radius_m * math.sin(theta),
            0.0,
        )
        yaw = theta + math.pi / 2.0  # facing along the direction of travel
        rotation = (math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0))
        pose = Pose(timestamp_ns, position, rotation)
        yield Frame(GROUND_TRUTH_SENSOR_ID, timestamp_ns, pose)
        image = _render_image(params, phases, yaw, position)
        yield Frame(CAMERA_SENSOR_ID, timestamp_ns, image)


def synth_dataset(path: str, params: SynthParams) -> int:
    """Write a synthetic dataset; returns the camera frame count."""
    write_dataset(path, synth_sensors(params), synth_frames(params))
    return params.frame_count
