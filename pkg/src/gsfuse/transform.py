"""Similarity transforms and quaternion helpers.

Quaternions are stored scalar-first, ``(w, x, y, z)``, matching the 3D-GS
``rot_0..rot_3`` PLY convention.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, ValidationError


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) wxyz quaternions. Input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` for broadcastable wxyz arrays."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def rotation_about(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * math.radians(degrees)).as_matrix()


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        s = float(self.scale)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t)) and math.isfinite(s)):
            raise ValidationError("similarity transform has non-finite entries")
        if s <= 0:
            raise ValidationError(f"similarity scale must be positive, got {s}")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9 or np.linalg.det(R) <= 0:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(Rt, -(Rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return SimilarityTransform(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimilarityTransform":
        try:
            R = np.asarray(data["rotation"], dtype=np.float64)
            t = np.asarray(data["translation"], dtype=np.float64)
            s = float(data["scale"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad transform document: {exc}") from exc
        if R.size != 9 or t.size != 3:
            raise FormatError("transform needs 9 rotation and 3 translation values")
        R = R.reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            # hand-written files: project onto SO(3) rather than reject
            U, _, Vt = np.linalg.svd(R)
            R = U @ Vt
        return cls(R, t, s)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SimilarityTransform":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not JSON ({exc})") from exc
        return cls.from_dict(data)
