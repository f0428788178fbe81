"""Grasp extraction from parameter maps and the IoU success metric.

A proposal is read off the smoothed quality map's argmax; it counts as
correct when some ground-truth rectangle overlaps it with IoU > 25% and the
grasp angles agree within 30 degrees (mod the gripper's pi-symmetry).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import GraspRectangle, angle_distance, rect_iou

IOU_THRESHOLD = 0.25
ANGLE_THRESHOLD = math.radians(30.0)
SMOOTH_SIGMA = 5.0
WIDTH_SCALE = 150.0


def _mirror_indices(n: int, radius: int) -> np.ndarray:
    # reflect-without-edge-repeat, valid for any radius
    if n == 1:
        return np.zeros(n + 2 * radius, dtype=np.intp)
    idx = np.arange(-radius, n + radius)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m < n, m, period - m).astype(np.intp)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(3 * sigma)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_smooth(image: np.ndarray, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """Separable Gaussian blur, kernel truncated at +/-3 sigma, normalized to
    sum 1, with mirrored borders."""
    if sigma <= 0:
        raise ContractViolation(f"sigma must be > 0, got {sigma}")
    img = np.asarray(image)
    if img.ndim != 2:
        raise ContractViolation(f"expected a 2-D map, got shape {img.shape}")
    kernel = gaussian_kernel(sigma).astype(img.dtype if img.dtype == np.float64 else np.float32)
    radius = (len(kernel) - 1) // 2
    out = img
    for axis in (0, 1):
        idx = _mirror_indices(out.shape[axis], radius)
        padded = out[idx, :] if axis == 0 else out[:, idx]
        acc = kernel[0] * (padded[:out.shape[0]] if axis == 0 else padded[:, :out.shape[1]])
        for t in range(1, len(kernel)):
            sl = padded[t:t + out.shape[0]] if axis == 0 else padded[:, t:t + out.shape[1]]
            acc += kernel[t] * sl
        out = acc
    return out.astype(img.dtype, copy=False)


def _map_arrays(maps, sample=0):
    if hasattr(maps, "sample_arrays"):
        return maps.sample_arrays(sample)
    return maps


def recompose_angle(arrays) -> np.ndarray:
    """Per-pixel grasp angle from the two unit-circle component maps."""
    return np.arctan2(arrays["sin"], arrays["cos"]) / 2.0


def extract_grasp(maps, sigma: float = SMOOTH_SIGMA) -> GraspRectangle:
    """Best grasp from one sample's parameter maps.

    Q, W and the recomposed angle map are blurred first; the proposal sits at
    the smoothed Q argmax (first in row-major order on ties), with the angle
    and width read off the smoothed maps at that pixel. Width is scaled from
    the network's [0,1] range to pixels.
    """
    arrays = _map_arrays(maps)
    q_s = gaussian_smooth(arrays["q"], sigma)
    w_s = gaussian_smooth(arrays["w"], sigma)
    phi_s = gaussian_smooth(recompose_angle(arrays), sigma)
    flat = int(np.argmax(q_s))
    i, j = divmod(flat, q_s.shape[1])
    width = WIDTH_SCALE * float(np.clip(w_s[i, j], 0.0, 1.0))
    return GraspRectangle((float(j), float(i)), float(phi_s[i, j]), width)


def grasp_success(pred: GraspRectangle, gts, iou_threshold: float = IOU_THRESHOLD,
                  angle_threshold: float = ANGLE_THRESHOLD) -> bool:
    """True when some ground-truth grasp overlaps enough and is aligned."""
    gts = list(gts)
    if not gts:
        raise ContractViolation("grasp_success requires at least one ground-truth grasp")
    for gt in gts:
        if angle_distance(pred.phi, gt.phi) <= angle_threshold and \
                rect_iou(pred, gt) > iou_threshold:
            return True
    return False


def _best_match(pred: GraspRectangle, gts):
    """For reporting: the IoU/angle error of the most favourable ground
    truth, preferring ones that satisfy the angle gate, then higher IoU."""
    best_key, best = None, None
    for gt in gts:
        err = angle_distance(pred.phi, gt.phi)
        iou = rect_iou(pred, gt)
        key = (err <= ANGLE_THRESHOLD, iou)
        if best_key is None or key > best_key:
            best_key, best = key, (iou, math.degrees(err))
    return best


@dataclass
class SampleResult:
    sample_id: str
    success: bool
    iou: float
    angle_error_deg: float


class EvalReport:
    """Per-sample outcomes plus aggregate and per-fold statistics."""

    def __init__(self, results, fold_rates=None):
        self.results = list(results)
        self.fold_rates = list(fold_rates) if fold_rates else None

    @property
    def successes(self) -> int:
        return sum(1 for r in self.results if r.success)

    @property
    def success_rate(self) -> float:
        if not self.results:
            return 0.0
        return 100.0 * self.successes / len(self.results)

    @property
    def fold_mean(self):
        return float(np.mean(self.fold_rates)) if self.fold_rates else None

    @property
    def fold_std(self):
        if not self.fold_rates:
            return None
        if len(self.fold_rates) == 1:
            return 0.0
        return float(np.std(self.fold_rates, ddof=1))

    def to_text(self, header_lines=()) -> str:
        lines = [f"# {h}" for h in header_lines]
        lines.append("sample_id\tsuccess\tiou\tangle_error_deg")
        for r in self.results:
            lines.append(f"{r.sample_id}\t{int(r.success)}\t{r.iou:.6f}\t{r.angle_error_deg:.4f}")
        lines.append("# summary")
        lines.append(f"# samples {len(self.results)}")
        lines.append(f"# successes {self.successes}")
        lines.append(f"# success_rate {self.success_rate:.4f}")
        if self.fold_rates:
            rates = " ".join(f"{r:.4f}" for r in self.fold_rates)
            lines.append(f"# fold_rates {rates}")
            lines.append(f"# fold_mean {self.fold_mean:.4f}")
            lines.append(f"# fold_std {self.fold_std:.4f} (std over folds)")
        return "\n".join(lines) + "\n"

    @staticmethod
    def merge_folds(reports) -> "EvalReport":
        results = [r for rep in reports for r in rep.results]
        return EvalReport(results, fold_rates=[rep.success_rate for rep in reports])


def worker_threads() -> int:
    env = os.environ.get("GRASPFORGE_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def evaluate_model(model, samples, sigma: float = SMOOTH_SIGMA, threads=None) -> EvalReport:
    """Forward -> extract -> score every sample against its annotations.

    The model must be frozen; per-sample work may run on a thread pool
    (GRASPFORGE_THREADS) with a deterministic, order-preserving reduction.
    """
    from .data.targets import normalize_rgb

    samples = list(samples)
    if not samples:
        raise ContractViolation("evaluate_model requires a non-empty sample list")
    threads = worker_threads() if threads is None else max(1, int(threads))

    def score(sample):
        maps = model.forward(normalize_rgb(sample.rgb))
        pred = extract_grasp(maps, sigma)
        gts = [GraspRectangle.from_annotation(g) for g in sample.grasps]
        ok = grasp_success(pred, gts)
        iou, err = _best_match(pred, gts)
        return SampleResult(sample.scene_id, ok, iou, err)

    if threads == 1:
        results = [score(s) for s in samples]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score, samples))
    return EvalReport(results)
