"""Jacquard-format scene ingestion.

A scene is four files: an RGB image, a perfect-depth image, a binary object
mask, and a text grasp file with one `x;y;theta;opening;jaw_size` record per
line (pixels / degrees). The synthetic generator persists the same layout,
so everything downstream is format-agnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import (
    AnnotationFormatError,
    ContractViolation,
    EmptyAnnotationError,
    SceneFileMissingError,
)

GRASP_FIELDS = ("x", "y", "theta", "opening", "jaw_size")


def fold_theta(theta: float) -> float:
    """Fold a gripper angle in degrees into (-90, 90]."""
    t = math.fmod(theta, 180.0)
    if t > 90.0:
        t -= 180.0
    elif t <= -90.0:
        t += 180.0
    return t


@dataclass
class GraspAnnotation:
    """One successful antipodal grasp: center, rotation, opening and the
    height of its rectangle footprint, all in the image frame."""

    x: float
    y: float
    theta: float          # degrees in (-90, 90]
    opening: float        # gripper jaw separation, px
    jaw_size: float       # rectangle height, px

    def scaled(self, factor: float, dx: float = 0.0, dy: float = 0.0) -> "GraspAnnotation":
        """Similarity transform: translate by (-dx, -dy), then scale."""
        return GraspAnnotation((self.x - dx) * factor, (self.y - dy) * factor,
                               self.theta, self.opening * factor, self.jaw_size * factor)


@dataclass
class SceneSample:
    """One view of one object with its grasp annotations."""

    object_id: str
    scene_id: str
    rgb: np.ndarray                 # (H, W, 3) uint8
    depth: np.ndarray               # (H, W) float32
    mask: np.ndarray                # (H, W) bool
    grasps: list = field(default_factory=list)

    @property
    def image_size(self):
        return self.rgb.shape[:2]

    def validate(self):
        if self.rgb.shape[:2] != self.depth.shape or self.rgb.shape[:2] != self.mask.shape:
            raise ContractViolation(
                f"scene {self.scene_id}: image sizes disagree "
                f"(rgb {self.rgb.shape[:2]}, depth {self.depth.shape}, mask {self.mask.shape})")
        return self


def parse_grasps_file(path, image_size=None) -> list:
    """Parse one grasp per line; malformed lines name the file and line.

    Duplicate (x, y, theta) rows with different jaw sizes are all retained.
    """
    path = Path(path)
    if not path.is_file():
        raise SceneFileMissingError(f"grasp file not found: {path}")
    grasps = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(";")
            if len(parts) != 5:
                raise AnnotationFormatError(
                    path, line_no, f"expected 5 ';'-separated fields, got {len(parts)}")
            try:
                x, y, theta, opening, jaw = (float(p) for p in parts)
            except ValueError as e:
                raise AnnotationFormatError(path, line_no, f"non-numeric field ({e})") from None
            if not all(math.isfinite(v) for v in (x, y, theta, opening, jaw)):
                raise AnnotationFormatError(path, line_no, "non-finite value")
            if opening <= 0:
                raise AnnotationFormatError(path, line_no, f"opening must be > 0, got {opening}")
            if jaw <= 0:
                raise AnnotationFormatError(path, line_no, f"jaw_size must be > 0, got {jaw}")
            if image_size is not None:
                h, w = image_size
                if not (0 <= x < w and 0 <= y < h):
                    raise AnnotationFormatError(
                        path, line_no, f"grasp center ({x}, {y}) outside {w}x{h} image")
            grasps.append(GraspAnnotation(x, y, fold_theta(theta), opening, jaw))
    return grasps


def save_grasps(path, grasps):
    """Inverse of parse_grasps_file; full-precision floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as f:
        for g in grasps:
            f.write(f"{g.x!r};{g.y!r};{g.theta!r};{g.opening!r};{g.jaw_size!r}\n")


def _load_image(path):
    path = Path(path)
    if not path.is_file():
        raise SceneFileMissingError(f"image file not found: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    with Image.open(path) as im:
        return np.asarray(im)


def parse_jacquard_scene(rgb_path, depth_path, mask_path, grasps_path,
                         require_grasps=True) -> SceneSample:
    """Load a scene's four files into a SceneSample.

    Missing files raise SceneFileMissingError; malformed grasp lines raise
    AnnotationFormatError with the file and line number. Training samples
    must have at least one grasp.
    """
    rgb = _load_image(rgb_path)
    if rgb.ndim == 2:
        rgb = np.stack([rgb] * 3, axis=-1)
    rgb = np.ascontiguousarray(rgb[:, :, :3]).astype(np.uint8)
    depth = np.asarray(_load_image(depth_path), dtype=np.float32)
    if depth.ndim == 3:
        depth = depth[:, :, 0]
    mask = _load_image(mask_path)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    mask = mask != 0
    grasps = parse_grasps_file(grasps_path, image_size=rgb.shape[:2])
    if require_grasps and not grasps:
        raise EmptyAnnotationError(f"training scene has no grasps: {grasps_path}")
    stem = Path(grasps_path).name
    scene_id = stem[:-len("_grasps.txt")] if stem.endswith("_grasps.txt") else Path(grasps_path).stem
    object_id = Path(grasps_path).parent.name
    return SceneSample(object_id, f"{object_id}/{scene_id}", rgb, depth, mask, grasps).validate()


@dataclass(frozen=True)
class ScenePaths:
    object_id: str
    rgb: Path
    depth: Path
    mask: Path
    grasps: Path


_DEPTH_SUFFIXES = ("_perfect_depth.npy", "_perfect_depth.tiff", "_perfect_depth.tif",
                   "_perfect_depth.png")
_RGB_SUFFIXES = ("_RGB.png", "_RGB.jpg")


def _first_existing(base, stem, suffixes, kind):
    for s in suffixes:
        p = base / f"{stem}{s}"
        if p.is_file():
            return p
    raise SceneFileMissingError(f"no {kind} file for scene {base / stem}")


def discover_scenes(root) -> list:
    """Find every scene under a dataset root (one directory per object)."""
    root = Path(root)
    if not root.is_dir():
        raise SceneFileMissingError(f"dataset root not found: {root}")
    out = []
    for grasps in sorted(root.glob("*/*_grasps.txt")):
        stem = grasps.name[:-len("_grasps.txt")]
        base = grasps.parent
        out.append(ScenePaths(
            object_id=base.name,
            rgb=_first_existing(base, stem, _RGB_SUFFIXES, "RGB"),
            depth=_first_existing(base, stem, _DEPTH_SUFFIXES, "depth"),
            mask=base / f"{stem}_mask.png",
            grasps=grasps,
        ))
    return out


def load_scene(paths: ScenePaths, require_grasps=True) -> SceneSample:
    return parse_jacquard_scene(paths.rgb, paths.depth, paths.mask, paths.grasps,
                                require_grasps=require_grasps)
