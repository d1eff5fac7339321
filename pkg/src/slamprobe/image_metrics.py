"""Per-frame image quality measures: brightness, contrast, sharpness.

Brightness and contrast are the mean and population standard deviation of
the grey intensities. Sharpness is the Sobel-gradient (Tenengrad) score:
the sum of gradient magnitudes over interior pixels, normalized by the
full image area. Lower sharpness means more blur.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, TextIO, Union

import numpy as np

from .dataset import ImageBuffer
from .errors import MetricDomainError

METRIC_NAMES = ("brightness", "contrast", "tenengrad")

METRICS_CSV_HEADER = ("frame_index", "timestamp_ns", "brightness", "contrast", "tenengrad")


@dataclass(frozen=True)
class ImageMetrics:
    brightness: float  # mean intensity, 0..255
    contrast: float  # population standard deviation, 0..127.5
    tenengrad: float  # >= 0, higher is sharper

    def get(self, name: str) -> float:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        return getattr(self, name)


def to_grey(img: ImageBuffer) -> ImageBuffer:
    """Collapse an RGB image to grey with the 0.299/0.587/0.114 weights.

    Single-channel images pass through unchanged. Weighted sums are
    computed in exact integer arithmetic and rounded half-up.
    """
    if img.channels == 1:
        return img
    if img.channels != 3:
        raise MetricDomainError(f"unsupported channel count {img.channels}")
    arr = img.to_array().astype(np.int64)
    weighted = 299 * arr[:, :, 0] + 587 * arr[:, :, 1] + 114 * arr[:, :, 2]
    grey = ((2 * weighted + 1000) // 2000).astype(np.uint8)
    return ImageBuffer(img.width, img.height, 1, grey.tobytes())


def _grey_array(img: ImageBuffer) -> np.ndarray:
    return to_grey(img).to_array()[:, :, 0]


def brightness(img: ImageBuffer) -> float:
    """Arithmetic mean intensity of the grey image."""
    return float(_grey_array(img).astype(np.float64).mean())


def contrast(img: ImageBuffer) -> float:
    """Population standard deviation of the grey intensities."""
    return float(_grey_array(img).astype(np.float64).std())


def tenengrad(img: ImageBuffer) -> float:
    """Sobel sharpness score normalized by the image area.

    3x3 Sobel responses are evaluated on interior pixels only (the 1-pixel
    border contributes nothing to the sum), while the denominator stays
    the full width x height.
    """
    grey = _grey_array(img).astype(np.float64)
    h, w = grey.shape
    if h < 3 or w < 3:
        raise MetricDomainError(f"image {w}x{h} too small for a 3x3 operator")
    gx = (
        (grey[:-2, 2:] + 2.0 * grey[1:-1, 2:] + grey[2:, 2:])
        - (grey[:-2, :-2] + 2.0 * grey[1:-1, :-2] + grey[2:, :-2])
    )
    gy = (
        (grey[2:, :-2] + 2.0 * grey[2:, 1:-1] + grey[2:, 2:])
        - (grey[:-2, :-2] + 2.0 * grey[:-2, 1:-1] + grey[:-2, 2:])
    )
    total = float(np.sqrt(gx * gx + gy * gy).sum())
    return total / (w * h)


def compute_metrics(img: ImageBuffer) -> ImageMetrics:
    grey = to_grey(img)
    return ImageMetrics(brightness(grey), contrast(grey), tenengrad(grey))


def percent_difference(a: float, b: float) -> float:
    """Symmetric percent difference |a-b| / mean(a,b) * 100.

    Order-independent by construction; defined as 0 when both values are
    zero.
    """
    if a == 0.0 and b == 0.0:
        return 0.0
    return abs(a - b) / ((a + b) / 2.0) * 100.0


def write_metrics_csv(
    target: Union[str, TextIO],
    rows: Iterable[tuple[int, int, ImageMetrics]],
) -> None:
    """Write (frame_index, timestamp_ns, metrics) rows as CSV.

    Floats are rendered with repr so the files are bit-stable for
    golden-file comparisons.
    """
    if isinstance(target, str):
        with open(target, "w", newline="") as fh:
            write_metrics_csv(fh, rows)
            return
    writer = csv.writer(target, lineterminator="\n")
    writer.writerow(METRICS_CSV_HEADER)
    for frame_index, timestamp_ns, m in rows:
        writer.writerow(
            [frame_index, timestamp_ns, repr(m.brightness), repr(m.contrast), repr(m.tenengrad)]
        )


def read_metrics_csv(path: str) -> list[tuple[int, int, ImageMetrics]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(
                (
                    int(row["frame_index"]),
                    int(row["timestamp_ns"]),
                    ImageMetrics(
                        float(row["brightness"]),
                        float(row["contrast"]),
                        float(row["tenengrad"]),
                    ),
                )
            )
    return rows
