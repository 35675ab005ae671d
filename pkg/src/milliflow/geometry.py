"""Rigid 3D geometry: transforms, Kabsch alignment, point-segment distance.

Coordinate frame throughout the package: x right, y forward (away from the
radar), z up, all in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput

__all__ = [
    "RigidTransform",
    "axis_angle_rotation",
    "rotation_between",
    "kabsch",
    "point_segment_distance",
]


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (3x3, det +1) followed by translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        """Transform a single point (3,) or a batch (N, 3)."""
        p = np.asarray(p, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


def apply(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    return t.apply(p)


def axis_angle_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` (need not be unit length)."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise DegenerateInput("rotation axis has zero length")
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Minimal rotation taking direction ``u`` onto direction ``v``.

    The rotation axis is u x v; parallel inputs give the identity.  For
    anti-parallel inputs the axis is ambiguous, so an arbitrary perpendicular
    axis is chosen deterministically.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInput("cannot rotate a zero-length direction")
    u = u / nu
    v = v / nv
    axis = np.cross(u, v)
    s = np.linalg.norm(axis)
    c = float(np.dot(u, v))
    if s < 1e-15:
        if c > 0.0:
            return np.eye(3)
        # 180 degrees: pick any axis perpendicular to u
        probe = np.array([1.0, 0.0, 0.0])
        if abs(u[0]) > 0.9:
            probe = np.array([0.0, 1.0, 0.0])
        perp = np.cross(u, probe)
        return axis_angle_rotation(perp, np.pi)
    return axis_angle_rotation(axis, float(np.arctan2(s, c)))


def kabsch(
    src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None
) -> RigidTransform:
    """Rigid transform minimizing the (weighted) squared alignment residual.

    Raises DegenerateInput for fewer than 3 correspondences or when the
    source points are all collinear, since the rotation is then not unique.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateInput(
            f"source and destination differ in shape: {src.shape} vs {dst.shape}"
        )
    n = src.shape[0]
    if n < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {n}")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or np.any(w < 0):
            raise DegenerateInput("weights must be a nonnegative vector matching src")
        total = w.sum()
        if total <= 0:
            raise DegenerateInput("weights sum to zero")
        w = w / total

    centroid_src = w @ src
    centroid_dst = w @ dst
    src_c = src - centroid_src
    dst_c = dst - centroid_dst

    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        raise DegenerateInput("source points are collinear; rotation is not unique")

    h = (w[:, None] * src_c).T @ dst_c
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = centroid_dst - rotation @ centroid_src
    return RigidTransform(rotation, translation)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance from ``p`` to the segment [a, b].

    A zero-length segment degrades to the distance to ``a``.
    """
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    ab2 = float(np.dot(ab, ab))
    if ab2 == 0.0:
        return float(np.linalg.norm(p - a))
    t = float(np.dot(p - a, ab)) / ab2
    t = min(1.0, max(0.0, t))
    return float(np.linalg.norm(p - (a + t * ab)))
