"""Planar geometry primitives: point/segment distance, heading alignment and
oriented-box overlap.

Scalar functions operate on the small value types below; the ``*_array``
variants are the vectorized forms used by the simulator and filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt


def normalize_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    wrapped = (theta + math.pi) % (2.0 * math.pi) - math.pi
    # float modulo can land exactly on +pi for inputs just below -pi
    return -math.pi if wrapped >= math.pi else wrapped


def normalize_angle_array(theta: npt.ArrayLike) -> np.ndarray:
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped >= np.pi, -np.pi, wrapped)


@dataclass(frozen=True, slots=True)
class Point2:
    x: float
    y: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True, slots=True)
class Segment2:
    a: Point2
    b: Point2

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise ValueError("degenerate segment: start equals end")


@dataclass(frozen=True, slots=True)
class OrientedBox:
    center: Point2
    heading: float
    length: float
    width: float

    def __post_init__(self) -> None:
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box length and width must be positive")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    def as_array(self) -> np.ndarray:
        """Row layout ``(x, y, heading, length, width)`` used by the array API."""
        return np.array(
            [self.center.x, self.center.y, self.heading, self.length, self.width],
            dtype=np.float64,
        )

    def corners(self) -> np.ndarray:
        return box_corners(self.as_array())


def point_segment_distance(p: Point2, s: Segment2) -> float:
    ax, ay = s.a.x, s.a.y
    dx, dy = s.b.x - ax, s.b.y - ay
    t = ((p.x - ax) * dx + (p.y - ay) * dy) / (dx * dx + dy * dy)
    t = min(1.0, max(0.0, t))
    return math.hypot(p.x - (ax + t * dx), p.y - (ay + t * dy))


def point_segment_distance_array(
    points: npt.ArrayLike, starts: npt.ArrayLike, ends: npt.ArrayLike
) -> tuple[np.ndarray, np.ndarray]:
    """Distances from every point to every segment.

    :param points: ``(..., 2)`` query points
    :param starts: ``(S, 2)`` segment start points
    :param ends: ``(S, 2)`` segment end points
    :return: ``(dist, t)`` each of shape ``(..., S)``; ``t`` is the clamped
        projection parameter along each segment
    """
    p = np.asarray(points, dtype=np.float64)[..., None, :]
    a = np.asarray(starts, dtype=np.float64)
    d = np.asarray(ends, dtype=np.float64) - a
    denom = np.einsum("sk,sk->s", d, d)
    t = np.einsum("...sk,sk->...s", p - a, d) / denom
    t = np.clip(t, 0.0, 1.0)
    foot = a + t[..., None] * d
    return np.linalg.norm(p - foot, axis=-1), t


def heading_alignment_angle(v_ego: npt.ArrayLike, v_lane: npt.ArrayLike) -> float:
    """Unsigned angle in [0, pi] between two direction vectors."""
    u = np.asarray(v_ego, dtype=np.float64)
    v = np.asarray(v_lane, dtype=np.float64)
    nu, nv = math.hypot(u[0], u[1]), math.hypot(v[0], v[1])
    if nu == 0.0 or nv == 0.0:
        raise ValueError("heading alignment undefined for a zero-length vector")
    cos = (u[0] * v[0] + u[1] * v[1]) / (nu * nv)
    return math.acos(min(1.0, max(-1.0, cos)))


def heading_alignment_angle_array(
    headings: npt.ArrayLike, lane_dirs: npt.ArrayLike
) -> np.ndarray:
    """Vectorized alignment between heading angles and lane direction vectors."""
    h = np.asarray(headings, dtype=np.float64)
    d = np.asarray(lane_dirs, dtype=np.float64)
    cos = (np.cos(h) * d[..., 0] + np.sin(h) * d[..., 1]) / np.linalg.norm(d, axis=-1)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def box_corners(boxes: npt.ArrayLike) -> np.ndarray:
    """Corners ``(..., 4, 2)`` of boxes given as ``(..., 5)`` rows, counter-clockwise."""
    b = np.asarray(boxes, dtype=np.float64)
    c, s = np.cos(b[..., 2]), np.sin(b[..., 2])
    hl, hw = b[..., 3] / 2.0, b[..., 4] / 2.0
    signs = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]])
    lx = signs[:, 0] * hl[..., None]
    ly = signs[:, 1] * hw[..., None]
    x = b[..., 0, None] + lx * c[..., None] - ly * s[..., None]
    y = b[..., 1, None] + lx * s[..., None] + ly * c[..., None]
    return np.stack([x, y], axis=-1)


def box_separation_array(a: npt.ArrayLike, b: npt.ArrayLike) -> np.ndarray:
    """Largest projected gap between two boxes over the four edge normals.

    Positive means a separating axis exists (the value is a lower bound on the
    Euclidean gap); zero is tangency; negative is the minimum penetration depth
    along the tested axes. Inputs broadcast as ``(..., 5)`` rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca, sa = np.cos(a[..., 2]), np.sin(a[..., 2])
    cb, sb = np.cos(b[..., 2]), np.sin(b[..., 2])
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    hla, hwa = a[..., 3] / 2.0, a[..., 4] / 2.0
    hlb, hwb = b[..., 3] / 2.0, b[..., 4] / 2.0
    # cosines between the box axes; |u_i . v_j|
    c_ll = np.abs(ca * cb + sa * sb)
    c_lw = np.abs(-ca * sb + sa * cb)
    c_wl = np.abs(-sa * cb + ca * sb)
    c_ww = np.abs(sa * sb + ca * cb)
    gaps = (
        np.abs(dx * ca + dy * sa) - hla - (hlb * c_ll + hwb * c_lw),
        np.abs(-dx * sa + dy * ca) - hwa - (hlb * c_wl + hwb * c_ww),
        np.abs(dx * cb + dy * sb) - hlb - (hla * c_ll + hwa * c_wl),
        np.abs(-dx * sb + dy * cb) - hwb - (hla * c_lw + hwa * c_ww),
    )
    return np.maximum(np.maximum(gaps[0], gaps[1]), np.maximum(gaps[2], gaps[3]))


def boxes_intersect_array(a: npt.ArrayLike, b: npt.ArrayLike) -> np.ndarray:
    """Separating-axis overlap test; touching boxes count as intersecting."""
    return box_separation_array(a, b) <= 0.0


def boxes_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    return bool(boxes_intersect_array(a.as_array(), b.as_array()))


def box_separation(a: OrientedBox, b: OrientedBox) -> float:
    return float(box_separation_array(a.as_array(), b.as_array()))


def to_local_frame(
    points: npt.ArrayLike, origin: npt.ArrayLike, heading: float
) -> np.ndarray:
    """Express world points ``(..., 2)`` in the frame at ``origin`` rotated by ``heading``."""
    p = np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    c, s = math.cos(heading), math.sin(heading)
    return np.stack([p[..., 0] * c + p[..., 1] * s, -p[..., 0] * s + p[..., 1] * c], axis=-1)


def to_world_frame(
    points: npt.ArrayLike, origin: npt.ArrayLike, heading: float
) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(heading), math.sin(heading)
    o = np.asarray(origin, dtype=np.float64)
    return np.stack([o[0] + p[..., 0] * c - p[..., 1] * s, o[1] + p[..., 0] * s + p[..., 1] * c], axis=-1)
