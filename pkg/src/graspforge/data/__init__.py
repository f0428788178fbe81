from .jacquard import (
    GraspAnnotation,
    SceneSample,
    ScenePaths,
    discover_scenes,
    load_scene,
    parse_grasps_file,
    parse_jacquard_scene,
    save_grasps,
)
from .targets import GroundTruthMaps, normalize_depth, normalize_rgb, rasterize_ground_truth
from .augment import AugmentParams, augment, prepare_eval_sample
from .splits import FoldSplit, kfold_split
from .synthetic import SynthSpec, synth_scene, write_synthetic_dataset

__all__ = [
    "AugmentParams",
    "FoldSplit",
    "GraspAnnotation",
    "GroundTruthMaps",
    "ScenePaths",
    "SceneSample",
    "SynthSpec",
    "augment",
    "discover_scenes",
    "kfold_split",
    "load_scene",
    "normalize_depth",
    "normalize_rgb",
    "parse_grasps_file",
    "parse_jacquard_scene",
    "prepare_eval_sample",
    "rasterize_ground_truth",
    "save_grasps",
    "synth_scene",
    "write_synthetic_dataset",
]
