"""SE(2) pose algebra.

Poses are stored as ``(theta, x, y)``; the rotation matrix is built on demand.
Points are plain numpy arrays of shape ``(2,)`` or ``(N, 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    if isinstance(theta, np.ndarray):
        return math.pi - np.mod(math.pi - theta, TWO_PI)
    return _wrap_scalar(theta)


def _wrap_scalar(theta: float) -> float:
    w = math.pi - ((math.pi - theta) % TWO_PI)
    # float modulo can land exactly on -pi
    return math.pi if w <= -math.pi else w


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotation_derivative(theta: float) -> np.ndarray:
    """d R(theta) / d theta."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c], [c, -s]])


@dataclass(frozen=True, slots=True)
class Pose2:
    """Rigid transform in the plane: ``p -> R(theta) p + (x, y)``."""

    theta: float = 0.0
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "theta", _wrap_scalar(float(self.theta)))
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))

    @classmethod
    def identity(cls) -> Pose2:
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v) -> Pose2:
        """Build from ``[x, y, theta]``."""
        return cls(v[2], v[0], v[1])

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> Pose2:
        return cls(math.atan2(m[1, 0], m[0, 0]), m[0, 2], m[1, 2])

    def as_array(self) -> np.ndarray:
        """Return ``[x, y, theta]``."""
        return np.array([self.x, self.y, self.theta])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation()
        m[0, 2], m[1, 2] = self.x, self.y
        return m

    def rotation(self) -> np.ndarray:
        return rotation(self.theta)

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: Pose2) -> Pose2:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.theta + other.theta,
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
        )

    __matmul__ = compose

    def inverse(self) -> Pose2:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-self.theta, -(c * self.x + s * self.y), s * self.x - c * self.y)

    def between(self, other: Pose2) -> Pose2:
        """Pose of ``other`` expressed in this pose's frame."""
        return self.inverse().compose(other)

    def transform_point(self, q) -> np.ndarray:
        """Apply to a point ``(2,)`` or a point array ``(N, 2)``."""
        q = np.asarray(q, dtype=float)
        return q @ self.rotation().T + self.translation

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def __repr__(self) -> str:
        return f"Pose2(theta={self.theta:.6g}, x={self.x:.6g}, y={self.y:.6g})"


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def inverse(p: Pose2) -> Pose2:
    return p.inverse()


def transform_point(p: Pose2, q) -> np.ndarray:
    return p.transform_point(q)


def pose_close(a: Pose2, b: Pose2, tol: float = 1e-9) -> bool:
    return (
        abs(wrap_angle(a.theta - b.theta)) <= tol
        and abs(a.x - b.x) <= tol
        and abs(a.y - b.y) <= tol
    )
