"""Pose refinement from keypoint attraction maps.

Initial center/offset poses are expanded into local candidate lattices,
scored by a small message-passing network, correlated against
reweighed global heatmaps and decoded into refined keypoints.
"""
from .cmp import CmpConfig, CmpParams, KamSet, LocalContext, cmp_forward, init_params
from .core import (COCO_SKELETON, NUM_KEYPOINTS, DenseMaps, GtInstance, KemGrid, PoseSet, SkeletonSpec,
                   bilinear_sample)
from .decode import decode, decode_initial_poses, extract_centers
from .errors import LogocapError
from .kem import global_kems, local_kems, sample_and_reweigh
from .metrics import evaluate_ap, mean_oks, oks, select_best_gt, similarity_tensor, upper_bound_oracle
from .refine import RefineConfig, contextual_adaptation, decode_final, refine_poses
from .synth import SceneConfig, perturb_poses, sample_scene

__version__ = "0.1.0"

__all__ = [
    "CmpConfig", "CmpParams", "KamSet", "LocalContext", "cmp_forward", "init_params",
    "COCO_SKELETON", "NUM_KEYPOINTS", "DenseMaps", "GtInstance", "KemGrid", "PoseSet", "SkeletonSpec",
    "bilinear_sample", "decode", "decode_initial_poses", "extract_centers", "LogocapError",
    "global_kems", "local_kems", "sample_and_reweigh", "evaluate_ap", "mean_oks", "oks",
    "select_best_gt", "similarity_tensor", "upper_bound_oracle", "RefineConfig",
    "contextual_adaptation", "decode_final", "refine_poses", "SceneConfig", "perturb_poses", "sample_scene",
]
