"""Camera poses, trajectory normalization, pose descriptors, and pose search.

Extrinsics are stored camera-to-world throughout. The 14-entry descriptor is
[vec(R) row-major, t, log fx, log fy]; the 12-entry rigid embedding used by
the value/output residual path is [vec(R) row-major, t].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-6
DESCRIPTOR_LEN = 14
EMBEDDING_LEN = 12

# Rotation weight for the pose metric: translation norm + 1.0 * geodesic angle
# in radians. The metric itself is a convention of this artifact.
ROTATION_WEIGHT = 1.0


class PoseError(ValueError):
    """Invalid camera pose or trajectory."""


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rotation/translation plus focal lengths."""

    rotation: np.ndarray  # 3x3
    translation: np.ndarray  # (3,)
    fx: float = 1.0
    fy: float = 1.0

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3), 1.0, 1.0)

    def almost_equal(self, other: "CameraPose", tol: float = 1e-9) -> bool:
        return (
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
            and abs(self.fx - other.fx) <= tol
            and abs(self.fy - other.fy) <= tol
        )


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def validate_pose(pose: CameraPose) -> None:
    """Raise :class:`PoseError` unless rotation and focals are well formed."""
    r = np.asarray(pose.rotation, dtype=float)
    if r.shape != (3, 3):
        raise PoseError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=ORTHO_TOL):
        raise PoseError("rotation is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
        raise PoseError("rotation determinant is not +1")
    if not (pose.fx > 0 and pose.fy > 0):
        raise PoseError(f"focal lengths must be positive, got ({pose.fx}, {pose.fy})")
    if np.asarray(pose.translation).shape != (3,):
        raise PoseError("translation must be a 3-vector")


def normalize_trajectory(
    poses: list[CameraPose], image_width: float = 1.0
) -> list[CameraPose]:
    """Anchor the first frame at the origin and scale translations.

    The first pose becomes the identity; remaining poses are expressed
    relative to it, translations are scaled so the largest norm is 1 (an
    all-zero trajectory stays zero), and focal lengths are divided by
    ``image_width``. Idempotent at the default width.
    """
    if not poses:
        raise PoseError("cannot normalize an empty trajectory")
    for p in poses:
        validate_pose(p)
    r0 = poses[0].rotation
    t0 = poses[0].translation
    rel = []
    for p in poses:
        rel.append((r0.T @ p.rotation, r0.T @ (p.translation - t0)))
    max_norm = max(np.linalg.norm(t) for _, t in rel)
    scale = 1.0 / max_norm if max_norm > 0 else 1.0
    return [
        CameraPose(r, t * scale, p.fx / image_width, p.fy / image_width)
        for (r, t), p in zip(rel, poses)
    ]


def pose_descriptor(pose: CameraPose) -> np.ndarray:
    """14-vector [vec(R) row-major, t, log fx, log fy]."""
    validate_pose(pose)
    return np.concatenate(
        [
            np.asarray(pose.rotation, dtype=float).reshape(9),
            np.asarray(pose.translation, dtype=float),
            [math.log(pose.fx), math.log(pose.fy)],
        ]
    )


def descriptor_rotation(descriptor: np.ndarray) -> np.ndarray:
    """Reassemble the rotation block of a descriptor (round-trip check)."""
    if descriptor.shape != (DESCRIPTOR_LEN,):
        raise PoseError(f"descriptor must have length {DESCRIPTOR_LEN}")
    return descriptor[:9].reshape(3, 3)


def six_dof_embedding(pose: CameraPose) -> np.ndarray:
    """12-vector rigid embedding [vec(R) row-major, t].

    The identity pose with zero translation maps to the canonical rest
    embedding [1,0,0, 0,1,0, 0,0,1, 0,0,0].
    """
    validate_pose(pose)
    return np.concatenate(
        [
            np.asarray(pose.rotation, dtype=float).reshape(9),
            np.asarray(pose.translation, dtype=float),
        ]
    )


REST_EMBEDDING = np.concatenate([np.eye(3).reshape(9), np.zeros(3)])


def geodesic_angle(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Rotation angle (radians) between two rotation matrices."""
    cos_angle = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos_angle)))


def pose_distance(a: CameraPose, b: CameraPose) -> float:
    return float(
        np.linalg.norm(a.translation - b.translation)
        + ROTATION_WEIGHT * geodesic_angle(a.rotation, b.rotation)
    )


def pose_to_dict(pose: CameraPose) -> dict:
    return {
        "R": [float(x) for x in np.asarray(pose.rotation).reshape(9)],
        "t": [float(x) for x in np.asarray(pose.translation)],
        "fx": float(pose.fx),
        "fy": float(pose.fy),
    }


def pose_from_dict(d: dict) -> CameraPose:
    return CameraPose(
        np.array(d["R"], dtype=float).reshape(3, 3),
        np.array(d["t"], dtype=float),
        float(d["fx"]),
        float(d["fy"]),
    )


def nearest_pose_index(
    poses: list[CameraPose], ref: CameraPose, exclude_prefix: int = 0
) -> int:
    """Index >= ``exclude_prefix`` minimizing pose distance to ``ref``.

    Ties break toward the smallest index.
    """
    if exclude_prefix >= len(poses):
        raise PoseError(
            f"empty search range: exclude_prefix={exclude_prefix}, len={len(poses)}"
        )
    best_idx = exclude_prefix
    best_dist = pose_distance(poses[exclude_prefix], ref)
    for i in range(exclude_prefix + 1, len(poses)):
        d = pose_distance(poses[i], ref)
        if d < best_dist:
            best_idx, best_dist = i, d
    return best_idx
