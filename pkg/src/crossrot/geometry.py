"""Rotation representations and metrics: quaternions, matrices, yaw/pitch, geodesic error.

Conventions (used everywhere in this package):

- Right-handed world frame, y is up, z is forward, x is right.
- Quaternions are (w, x, y, z), canonical form has w >= 0.
- Yaw rotates about the world y axis (positive = turn right, toward +x);
  pitch rotates about the camera's local x axis after yaw (positive = look up).
- Stored rotations are world-to-camera maps: R(yaw, pitch) = R_pitch @ R_yaw.
- The relative rotation of a pair is R_rel = R2 @ R1.T, mapping camera-1
  coordinates to camera-2 coordinates.
- All angles in the public API are degrees unless a name says otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class GeometryError(ValueError):
    pass


class NonFiniteInput(GeometryError):
    """An input contained NaN or Inf."""


class NotARotation(GeometryError):
    """A matrix failed the orthogonality / determinant check."""


class OutOfRange(GeometryError):
    """A scalar argument fell outside its documented domain."""


class OverlapClass(Enum):
    LARGE = "large"
    SMALL = "small"
    NONE = "none"


#: Relative-rotation angle (degrees) up to which a pair counts as highly
#: overlapping; boundary angles land in the lower class.
LARGE_OVERLAP_MAX_DEG = 45.0
SMALL_OVERLAP_MAX_DEG = 90.0


@dataclass(frozen=True)
class UnitQuaternion:
    """Unit quaternion (w, x, y, z) encoding a 3D rotation."""

    w: float
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    @classmethod
    def from_array(cls, a, normalize: bool = False) -> "UnitQuaternion":
        a = np.asarray(a, dtype=np.float64).reshape(4)
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput(f"quaternion has non-finite components: {a}")
        if normalize:
            n = float(np.linalg.norm(a))
            if n <= 1e-12:
                raise NonFiniteInput("cannot normalize a near-zero quaternion")
            a = a / n
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "UnitQuaternion":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        h = 0.5 * angle_rad
        s = math.sin(h)
        return cls(math.cos(h), float(s * axis[0]), float(s * axis[1]),
                   float(s * axis[2]))

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def normalized(self) -> "UnitQuaternion":
        n = self.norm()
        if n <= 1e-12:
            raise NonFiniteInput("cannot normalize a near-zero quaternion")
        return UnitQuaternion(self.w / n, self.x / n, self.y / n, self.z / n)

    def canonicalized(self, zero_eps: float = 1e-12) -> "UnitQuaternion":
        """Resolve the double cover: w >= 0, ties broken so the first
        nonzero component is positive.

        Components with magnitude <= zero_eps are snapped to exactly 0 so
        that e.g. a 180-degree yaw (w = cos 90 = O(1e-17) in floating point)
        lands on the analytically forced sign.
        """
        c = [self.w, self.x, self.y, self.z]
        c = [0.0 if abs(v) <= zero_eps else float(v) for v in c]
        for v in c:
            if v != 0.0:
                if v < 0.0:
                    c = [-v + 0.0 for v in c]  # +0.0 avoids -0.0 components
                break
        return UnitQuaternion(*c)

    def conjugate(self) -> "UnitQuaternion":
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        # Hamilton product
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return UnitQuaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )

    def rotate(self, v) -> np.ndarray:
        """Apply the rotation to a 3-vector via the sandwich product q v q^-1."""
        v = np.asarray(v, dtype=np.float64)
        p = UnitQuaternion(0.0, float(v[0]), float(v[1]), float(v[2]))
        r = self * p * self.conjugate()
        return np.array([r.x, r.y, r.z])

    def angle_deg(self) -> float:
        """Rotation angle in [0, 180] degrees."""
        w = min(1.0, max(-1.0, abs(self.w) / max(self.norm(), 1e-300)))
        return math.degrees(2.0 * math.acos(w))


@dataclass(frozen=True)
class YawPitch:
    """Zero-roll camera orientation, degrees."""

    yaw_deg: float
    pitch_deg: float


def rot_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def validate_rotation(m: np.ndarray, tol: float = 1e-5) -> None:
    """Raise NotARotation unless m is orthogonal with determinant +1."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise NotARotation(f"expected a 3x3 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("rotation matrix has non-finite entries")
    err = np.max(np.abs(m.T @ m - np.eye(3)))
    det = float(np.linalg.det(m))
    if err > tol or abs(det - 1.0) > tol:
        raise NotARotation(
            f"not a rotation: max |R^T R - I| = {err:.3e}, det = {det:.6f}"
        )


def quat_to_matrix(q: UnitQuaternion) -> np.ndarray:
    """Rotation matrix of q; q and -q give the same matrix."""
    a = q.as_array()
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"quaternion has non-finite components: {a}")
    n = float(np.linalg.norm(a))
    if abs(n - 1.0) >= 1e-6:
        if n <= 1e-12:
            raise NonFiniteInput("cannot normalize a near-zero quaternion")
        a = a / n
    w, x, y, z = a
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray, tol: float = 1e-5) -> UnitQuaternion:
    """Canonical quaternion of a rotation matrix (largest-diagonal branch)."""
    m = np.asarray(m, dtype=np.float64)
    validate_rotation(m, tol)
    t = float(np.trace(m))
    # Pick the numerically stable branch: the largest of (trace, m00, m11, m22).
    if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + t)
        q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s)
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s)
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s)
    return UnitQuaternion(*q).normalized().canonicalized()


def yaw_pitch_to_quat(yaw_deg: float, pitch_deg: float) -> UnitQuaternion:
    """World-to-camera quaternion for a zero-roll orientation.

    Yaw is applied first (about world y), then pitch (about the camera's
    local x), so the matrix form is R_pitch @ R_yaw.
    """
    if not (math.isfinite(yaw_deg) and math.isfinite(pitch_deg)):
        raise NonFiniteInput(f"non-finite angles: yaw={yaw_deg}, pitch={pitch_deg}")
    q_yaw = UnitQuaternion.from_axis_angle((0.0, 1.0, 0.0), -math.radians(yaw_deg))
    q_pitch = UnitQuaternion.from_axis_angle((1.0, 0.0, 0.0), math.radians(pitch_deg))
    return (q_pitch * q_yaw).canonicalized()


def quat_to_yaw_pitch(q: UnitQuaternion) -> YawPitch:
    """Yaw/pitch of the camera orientation encoded by q, roll discarded.

    Exact inverse of yaw_pitch_to_quat for pitch in (-90, 90).
    """
    r = quat_to_matrix(q)
    # Camera forward in world coordinates is the last row of the
    # world-to-camera matrix (third column of its transpose).
    f = r[2, :]
    yaw = math.degrees(math.atan2(f[0], f[2]))
    pitch = math.degrees(math.asin(min(1.0, max(-1.0, f[1]))))
    return YawPitch(yaw, pitch)


def camera_to_world(q: UnitQuaternion) -> np.ndarray:
    """Camera-to-world matrix: transpose of the stored world-to-camera map."""
    return quat_to_matrix(q).T


def relative_rotation(r1: np.ndarray, r2: np.ndarray) -> np.ndarray:
    """Relative rotation R2 @ R1.T, mapping camera-1 frame to camera-2 frame."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    return r2 @ r1.T


def relative_quat(q1: UnitQuaternion, q2: UnitQuaternion) -> UnitQuaternion:
    """Quaternion form of relative_rotation: q2 * q1^-1, canonical sign."""
    return (q2 * q1.conjugate()).normalized().canonicalized()


def geodesic_error(r_pred: np.ndarray, r_gt: np.ndarray) -> float:
    """Angular distance on SO(3) in degrees: arccos((tr(R_pred^T R_gt) - 1) / 2).

    The arccos argument is clamped to [-1, 1] so accumulated floating-point
    error near 0 and 180 degrees cannot produce NaN. Bitwise-identical
    inputs return exactly 0.
    """
    r_pred = np.asarray(r_pred, dtype=np.float64)
    r_gt = np.asarray(r_gt, dtype=np.float64)
    if np.array_equal(r_pred, r_gt):
        return 0.0
    c = (float(np.trace(r_pred.T @ r_gt)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Rotation angle of r: geodesic distance from the identity."""
    return geodesic_error(np.eye(3), r)


def classify_overlap(angle_deg: float) -> OverlapClass:
    """Overlap class from the relative rotation angle; thresholds 45 and 90
    degrees, boundaries belonging to the lower class."""
    if not math.isfinite(angle_deg) or angle_deg < 0.0 or angle_deg > 180.0:
        raise OutOfRange(f"angle {angle_deg} outside [0, 180] degrees")
    if angle_deg <= LARGE_OVERLAP_MAX_DEG:
        return OverlapClass.LARGE
    if angle_deg <= SMALL_OVERLAP_MAX_DEG:
        return OverlapClass.SMALL
    return OverlapClass.NONE


def random_unit_quaternion(rng: np.random.Generator) -> UnitQuaternion:
    """Uniform random rotation (normalized 4D Gaussian)."""
    a = rng.standard_normal(4)
    a /= np.linalg.norm(a)
    return UnitQuaternion(*a).canonicalized()
