"""Trajectory alignment and error metrics.

ATE: the estimate's translations are rigidly aligned to the reference with
the closed-form least-squares (SVD) solution, then scored as the RMS of
the paired translation residuals. The normalized variant divides by the
reference trajectory length so sequences of different scale can share one
axis. RPE: the error of the estimated relative motion between matched
pairs a fixed spacing apart, which needs no global alignment.

Quaternions are (w, x, y, z) throughout, matching the dataset format.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Sequence, TextIO, Union

import numpy as np

from .dataset import Trajectory, trajectory_length
from .errors import DegenerateGeometryError, InsufficientPairsError, MetricDomainError

_DEGENERACY_RTOL = 1e-9


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(m: np.ndarray) -> tuple[float, float, float, float]:
    # Shepperd's method: pick the largest diagonal combination for stability.
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    return (w / norm, x / norm, y / norm, z / norm)


def rotation_angle(m: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(m) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class RigidTransform:
    """p  ->  R(rotation) @ p + translation"""

    rotation: tuple[float, float, float, float]  # unit quaternion wxyz
    translation: tuple[float, float, float]

    def __post_init__(self):
        q = tuple(float(v) for v in self.rotation)
        norm = math.sqrt(sum(v * v for v in q))
        if not math.isfinite(norm) or norm == 0.0:
            raise ValueError("invalid rotation quaternion")
        object.__setattr__(self, "rotation", tuple(v / norm for v in q))
        object.__setattr__(
            self, "translation", tuple(float(v) for v in self.translation)
        )

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation: np.ndarray) -> "RigidTransform":
        return cls(matrix_to_quat(rotation), tuple(np.asarray(translation, dtype=float)))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation_matrix().T + np.asarray(self.translation)


def pose_matrix(pose) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = quat_to_matrix(pose.rotation)
    m[:3, 3] = pose.translation
    return m


def invert_se3(m: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    r = m[:3, :3].T
    out[:3, :3] = r
    out[:3, 3] = -r @ m[:3, 3]
    return out


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


def _umeyama(estimate: np.ndarray, reference: np.ndarray, with_scale: bool):
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) point sets, got {est.shape} vs {ref.shape}")
    n = est.shape[0]
    if n < 3:
        raise InsufficientPairsError(f"alignment needs at least 3 pairs, got {n}")
    mu_est = est.mean(axis=0)
    mu_ref = ref.mean(axis=0)
    de = est - mu_est
    dr = ref - mu_ref
    cov = dr.T @ de / n
    u, s, vt = np.linalg.svd(cov)
    # A unique rotation needs at least two independent directions.
    if s[1] <= _DEGENERACY_RTOL * max(s[0], 1e-300):
        raise DegenerateGeometryError(
            "point configuration is rank-deficient; rotation is not unique"
        )
    d = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[2, 2] = -1.0
    rotation = u @ d @ vt
    if with_scale:
        var_est = (de * de).sum() / n
        scale = float(np.trace(np.diag(s) @ d) / var_est)
    else:
        scale = 1.0
    translation = mu_ref - scale * rotation @ mu_est
    return rotation, translation, scale


def align_umeyama(estimate: np.ndarray, reference: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid alignment of paired point sets.

    Returns the proper rigid transform minimizing sum ||R e_i + t - r_i||^2.
    Needs at least 3 non-collinear pairs.
    """
    rotation, translation, _ = _umeyama(estimate, reference, with_scale=False)
    return RigidTransform.from_matrix(rotation, translation)


def align_umeyama_sim3(
    estimate: np.ndarray, reference: np.ndarray
) -> tuple[RigidTransform, float]:
    """Similarity variant of :func:`align_umeyama`: returns (transform, scale).

    Intended for monocular estimates whose scale is unobservable; the
    transform maps p to scale * R p + t.
    """
    rotation, translation, scale = _umeyama(estimate, reference, with_scale=True)
    return RigidTransform.from_matrix(rotation, translation), scale


# ---------------------------------------------------------------------------
# Error metrics
# ---------------------------------------------------------------------------


def ate_rmse(
    estimate: Trajectory,
    reference: Trajectory,
    pairs: Sequence[tuple[int, int]],
    with_scale: bool = False,
) -> tuple[float, np.ndarray]:
    """Absolute trajectory error after rigid (optionally Sim(3)) alignment.

    Returns (rmse in meters, per-pair residual norms in pair order).
    """
    if len(pairs) < 3:
        raise InsufficientPairsError(
            f"ATE needs at least 3 matched pairs, got {len(pairs)}"
        )
    est = estimate.translations()[[i for i, _ in pairs]]
    ref = reference.translations()[[j for _, j in pairs]]
    if with_scale:
        transform, scale = align_umeyama_sim3(est, ref)
        aligned = scale * (est @ transform.rotation_matrix().T) + transform.translation
    else:
        transform = align_umeyama(est, ref)
        aligned = transform.apply(est)
    residuals = np.linalg.norm(aligned - ref, axis=1)
    return float(np.sqrt(np.mean(residuals**2))), residuals


def ate_normalized(ate_rmse_m: float, reference: Trajectory) -> float:
    """ATE RMSE divided by the reference trajectory length (dimensionless)."""
    length = trajectory_length(reference)
    if length <= 0.0:
        raise MetricDomainError("cannot normalize by a zero-length trajectory")
    return ate_rmse_m / length


def rpe_series(
    estimate: Trajectory,
    reference: Trajectory,
    pairs: Sequence[tuple[int, int]],
    delta_frames: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Relative pose error between matched pairs ``delta_frames`` apart.

    For pair index k, the error motion is
    (Q_k^-1 Q_{k+d})^-1 (P_k^-1 P_{k+d}) with P the estimate and Q the
    reference; entry k of the returned arrays holds its translation norm
    and rotation angle. No global alignment is applied. Output length is
    len(pairs) - delta_frames.
    """
    if delta_frames < 1:
        raise ValueError("delta_frames must be >= 1")
    if len(pairs) < delta_frames + 1:
        raise InsufficientPairsError(
            f"RPE at spacing {delta_frames} needs {delta_frames + 1} pairs, got {len(pairs)}"
        )
    est_mats = [pose_matrix(estimate.poses[i]) for i, _ in pairs]
    ref_mats = [pose_matrix(reference.poses[j]) for _, j in pairs]
    trans = np.empty(len(pairs) - delta_frames)
    rot = np.empty(len(pairs) - delta_frames)
    for k in range(len(pairs) - delta_frames):
        rel_est = invert_se3(est_mats[k]) @ est_mats[k + delta_frames]
        rel_ref = invert_se3(ref_mats[k]) @ ref_mats[k + delta_frames]
        err = invert_se3(rel_ref) @ rel_est
        trans[k] = np.linalg.norm(err[:3, 3])
        rot[k] = rotation_angle(err[:3, :3])
    return trans, rot


# ---------------------------------------------------------------------------
# Error series assembly and serialization
# ---------------------------------------------------------------------------

ERRORS_CSV_HEADER = ("timestamp_ns", "ate_residual_m", "rpe_trans_m", "rpe_rot_rad")


@dataclass(frozen=True)
class ErrorRow:
    timestamp_ns: int
    ate_residual_m: float
    rpe_trans_m: float | None  # None for the first delta_frames pairs
    rpe_rot_rad: float | None


@dataclass(frozen=True)
class ErrorSeries:
    rows: tuple[ErrorRow, ...]
    ate_rmse_m: float
    ate_rmse_normalized: float
    rpe_trans_rmse_m: float
    pair_count: int

    def summary(self) -> dict:
        return {
            "ate_rmse_m": self.ate_rmse_m,
            "ate_rmse_normalized": self.ate_rmse_normalized,
            "rpe_trans_rmse_m": self.rpe_trans_rmse_m,
            "pair_count": self.pair_count,
        }

    def write_csv(self, target: Union[str, TextIO]) -> None:
        if isinstance(target, str):
            with open(target, "w", newline="") as fh:
                self.write_csv(fh)
                return
        writer = csv.writer(target, lineterminator="\n")
        writer.writerow(ERRORS_CSV_HEADER)
        for row in self.rows:
            writer.writerow(
                [
                    row.timestamp_ns,
                    repr(row.ate_residual_m),
                    "" if row.rpe_trans_m is None else repr(row.rpe_trans_m),
                    "" if row.rpe_rot_rad is None else repr(row.rpe_rot_rad),
                ]
            )

    def write_summary_json(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_errors_csv(path: str) -> list[ErrorRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.append(
                ErrorRow(
                    int(row["timestamp_ns"]),
                    float(row["ate_residual_m"]),
                    float(row["rpe_trans_m"]) if row["rpe_trans_m"] else None,
                    float(row["rpe_rot_rad"]) if row["rpe_rot_rad"] else None,
                )
            )
    return rows


def compute_error_series(
    estimate: Trajectory,
    reference: Trajectory,
    pairs: Sequence[tuple[int, int]],
    delta_frames: int = 1,
    with_scale: bool = False,
) -> ErrorSeries:
    """Assemble the per-pair error table plus summary statistics.

    The RPE of the motion between pairs k and k+delta is attached to the
    later pair's row; the first ``delta_frames`` rows carry no RPE.
    """
    rmse, residuals = ate_rmse(estimate, reference, pairs, with_scale=with_scale)
    rpe_trans, rpe_rot = rpe_series(estimate, reference, pairs, delta_frames)
    rows = []
    for k, (i, _) in enumerate(pairs):
        has_rpe = k >= delta_frames
        rows.append(
            ErrorRow(
                timestamp_ns=int(estimate.poses[i].timestamp_ns),
                ate_residual_m=float(residuals[k]),
                rpe_trans_m=float(rpe_trans[k - delta_frames]) if has_rpe else None,
                rpe_rot_rad=float(rpe_rot[k - delta_frames]) if has_rpe else None,
            )
        )
    return ErrorSeries(
        rows=tuple(rows),
        ate_rmse_m=rmse,
        ate_rmse_normalized=ate_normalized(rmse, reference),
        rpe_trans_rmse_m=float(np.sqrt(np.mean(rpe_trans**2))),
        pair_count=len(pairs),
    )
