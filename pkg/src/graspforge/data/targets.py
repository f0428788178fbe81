"""Ground-truth map construction and input normalization.

Each annotated grasp paints the centre third of its rectangle (full opening
retained, height shrunk to jaw_size/3) into the quality map; the angle maps
store cos(2.theta)/sin(2.theta) and the width map stores opening/150 clamped
to [0, 1]. Later grasps overwrite earlier ones where rectangles overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation

WIDTH_SCALE = 150.0
CENTER_THIRD = 3.0


@dataclass
class GroundTruthMaps:
    """Rasterized training targets; spatially aligned float32 maps."""

    q: np.ndarray
    cos: np.ndarray
    sin: np.ndarray
    w: np.ndarray
    a: np.ndarray | None = None

    @property
    def shape(self):
        return self.q.shape

    def stackable(self):
        maps = [self.q, self.cos, self.sin, self.w]
        if self.a is not None:
            maps.append(self.a)
        return maps


def stack_ground_truth(batch):
    """Stack per-sample GroundTruthMaps into (N, 1, H, W) arrays for a loss."""
    q = np.stack([b.q for b in batch])[:, None]
    cos = np.stack([b.cos for b in batch])[:, None]
    sin = np.stack([b.sin for b in batch])[:, None]
    w = np.stack([b.w for b in batch])[:, None]
    a = None
    if batch[0].a is not None:
        a = np.stack([b.a for b in batch])[:, None]
    return GroundTruthMaps(q, cos, sin, w, a)


def normalize_depth(depth) -> np.ndarray:
    """Per-image min-max normalization into [0, 1]; flat images map to 0."""
    d = np.asarray(depth, dtype=np.float32)
    lo = float(d.min())
    hi = float(d.max())
    if hi <= lo:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


def normalize_rgb(image) -> np.ndarray:
    """8-bit RGB -> float32 CHW in [0,1], centered by its scalar mean."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"expected (H, W, 3) RGB image, got {img.shape}")
    x = img.astype(np.float32) / 255.0
    x -= np.float32(x.mean(dtype=np.float64))
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def rasterize_ground_truth(grasps, image_size, aux_task="none",
                           depth=None, mask=None) -> GroundTruthMaps:
    """Paint each grasp's centre-third rectangle into fresh target maps.

    ``image_size`` is (H, W) or a single int. Rectangles partially outside
    the image are clipped. The auxiliary target is the min-max normalized
    depth image (depth task) or the binary object mask (saliency task).
    """
    if isinstance(image_size, int):
        h = w = image_size
    else:
        h, w = image_size
    q = np.zeros((h, w), dtype=np.float32)
    cos_m = np.zeros((h, w), dtype=np.float32)
    sin_m = np.zeros((h, w), dtype=np.float32)
    w_m = np.zeros((h, w), dtype=np.float32)

    for g in grasps:
        theta = math.radians(g.theta)
        ca, sa = math.cos(theta), math.sin(theta)
        half_u = g.opening / 2.0
        half_v = g.jaw_size / (2.0 * CENTER_THIRD)
        ext_x = abs(ca) * half_u + abs(sa) * half_v
        ext_y = abs(sa) * half_u + abs(ca) * half_v
        x0 = max(0, int(math.floor(g.x - ext_x)))
        x1 = min(w - 1, int(math.ceil(g.x + ext_x)))
        y0 = max(0, int(math.floor(g.y - ext_y)))
        y1 = min(h - 1, int(math.ceil(g.y + ext_y)))
        if x0 > x1 or y0 > y1:
            continue
        ys = np.arange(y0, y1 + 1, dtype=np.float64)[:, None] - g.y
        xs = np.arange(x0, x1 + 1, dtype=np.float64)[None, :] - g.x
        du = xs * ca + ys * sa
        dv = -xs * sa + ys * ca
        inside = (np.abs(du) <= half_u) & (np.abs(dv) <= half_v)
        if not inside.any():
            continue
        window = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        q[window][inside] = 1.0
        cos_m[window][inside] = math.cos(2.0 * theta)
        sin_m[window][inside] = math.sin(2.0 * theta)
        w_m[window][inside] = min(max(g.opening / WIDTH_SCALE, 0.0), 1.0)

    a = None
    if aux_task == "depth":
        if depth is None:
            raise ContractViolation("depth auxiliary task requires a depth image")
        a = normalize_depth(depth)
    elif aux_task == "saliency":
        if mask is None:
            raise ContractViolation("saliency auxiliary task requires an object mask")
        a = np.asarray(mask != 0, dtype=np.float32)
    elif aux_task != "none":
        raise ContractViolation(f"unknown auxiliary task '{aux_task}'")
    return GroundTruthMaps(q, cos_m, sin_m, w_m, a)


def ground_truth_for_sample(sample, aux_task="none") -> GroundTruthMaps:
    return rasterize_ground_truth(sample.grasps, sample.image_size, aux_task,
                                  depth=sample.depth, mask=sample.mask)
