"""Rotated grasp rectangles and the exact IoU between them.

A rectangle's ``width`` (the gripper opening) runs along the direction given
by ``phi``; ``jaw`` is the perpendicular extent. Intersection areas come from
Sutherland-Hodgman clipping of the two convex quads, so the IoU is exact up
to floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

HALF_PI = math.pi / 2.0


def fold_angle(phi: float) -> float:
    """Fold an angle into [-pi/2, pi/2] under the gripper's pi-symmetry."""
    if -HALF_PI <= phi <= HALF_PI:
        return float(phi)
    return float((phi + HALF_PI) % math.pi - HALF_PI)


def angle_distance(a: float, b: float) -> float:
    """Distance between grasp angles under pi-periodicity, in [0, pi/2]."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


@dataclass
class GraspRectangle:
    """One proposed or annotated grasp in image coordinates."""

    center: tuple[float, float]
    phi: float
    width: float
    jaw: float | None = None

    def __post_init__(self):
        if self.width < 0:
            raise ContractViolation(f"grasp width must be >= 0, got {self.width}")
        self.phi = fold_angle(self.phi)
        if self.jaw is None:
            self.jaw = self.width / 2.0
        if self.jaw < 0:
            raise ContractViolation(f"grasp jaw must be >= 0, got {self.jaw}")

    @property
    def area(self) -> float:
        return self.width * self.jaw

    def corners(self) -> np.ndarray:
        """The four corners as a (4, 2) array with consistent winding."""
        cx, cy = self.center
        ca, sa = math.cos(self.phi), math.sin(self.phi)
        ux, uy = ca * self.width / 2.0, sa * self.width / 2.0
        vx, vy = -sa * self.jaw / 2.0, ca * self.jaw / 2.0
        return np.array([
            [cx + ux + vx, cy + uy + vy],
            [cx - ux + vx, cy - uy + vy],
            [cx - ux - vx, cy - uy - vy],
            [cx + ux - vx, cy + uy - vy],
        ])

    @staticmethod
    def from_annotation(ann) -> "GraspRectangle":
        """Build from a dataset annotation (theta in degrees)."""
        return GraspRectangle((ann.x, ann.y), math.radians(ann.theta),
                              ann.opening, ann.jaw_size)


def _polygon_area(pts) -> float:
    acc = 0.0
    m = len(pts)
    for i in range(m):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % m]
        acc += x1 * y2 - x2 * y1
    return abs(acc) / 2.0


def _clip_convex(subject, clip) -> list:
    """Sutherland-Hodgman: clip `subject` against convex `clip` polygon."""
    # orient the inside test by the clip polygon's winding
    acc = 0.0
    for i in range(len(clip)):
        x1, y1 = clip[i]
        x2, y2 = clip[(i + 1) % len(clip)]
        acc += x1 * y2 - x2 * y1
    sign = 1.0 if acc >= 0 else -1.0

    output = [tuple(p) for p in subject]
    for i in range(len(clip)):
        if not output:
            return []
        ex1, ey1 = clip[i]
        ex2, ey2 = clip[(i + 1) % len(clip)]
        dx, dy = ex2 - ex1, ey2 - ey1

        def inside(p):
            return sign * (dx * (p[1] - ey1) - dy * (p[0] - ex1)) >= -1e-12

        def intersect(p, q):
            rx, ry = q[0] - p[0], q[1] - p[1]
            den = dx * ry - dy * rx
            if abs(den) < 1e-15:
                return q
            t = (dx * (p[1] - ey1) - dy * (p[0] - ex1)) / -den
            return (p[0] + t * rx, p[1] + t * ry)

        clipped = []
        prev = output[-1]
        prev_in = inside(prev)
        for cur in output:
            cur_in = inside(cur)
            if cur_in:
                if not prev_in:
                    clipped.append(intersect(prev, cur))
                clipped.append(cur)
            elif prev_in:
                clipped.append(intersect(prev, cur))
            prev, prev_in = cur, cur_in
        output = clipped
    return output


def rect_iou(a: GraspRectangle, b: GraspRectangle) -> float:
    """Exact intersection-over-union of two rotated rectangles in [0, 1]."""
    area_a, area_b = a.area, b.area
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    inter_pts = _clip_convex(a.corners(), b.corners())
    inter = _polygon_area(inter_pts) if len(inter_pts) >= 3 else 0.0
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))
