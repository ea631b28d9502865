"""Deterministic synthetic multi-person scenes.

A scene is a handful of articulated 17-keypoint stick figures placed on an
integer pixel grid, together with the dense maps an idealised backbone
would emit for them.  The "predicted" maps differ from the clean ones by
configurable jitter and noise, which is what gives the refinement stage
something to fix.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import NUM_KEYPOINTS, DenseMaps, GtInstance, PoseSet
from .io import gt_to_coco, load_coco_keypoints, load_tensor, save_tensor, write_json_atomic
from .losses import _gauss_plane, render_gt_heatmaps, render_gt_offsets

# Upright figure of unit height, x to the image right, y down.  The
# person's left side appears on the image right.
TEMPLATE = np.array([
    [0.000, -0.420],                     # nose
    [0.028, -0.447], [-0.028, -0.447],   # eyes
    [0.060, -0.432], [-0.060, -0.432],   # ears
    [0.120, -0.300], [-0.120, -0.300],   # shoulders
    [0.150, -0.130], [-0.150, -0.130],   # elbows
    [0.165, 0.030], [-0.165, 0.030],     # wrists
    [0.080, 0.030], [-0.080, 0.030],     # hips
    [0.085, 0.250], [-0.085, 0.250],     # knees
    [0.085, 0.470], [-0.085, 0.470],     # ankles
])

# (joint, parent) chains rotated as rigid limbs, root first
_LIMBS = (
    ((7, 9), 5, 0.7), ((8, 10), 6, 0.7),     # upper arms
    ((9,), 7, 0.8), ((10,), 8, 0.8),          # forearms
    ((13, 15), 11, 0.3), ((14, 16), 12, 0.3),  # thighs
    ((15,), 13, 0.3), ((16,), 14, 0.3),       # shins
)

OFFSET_PATCH = 2


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    height: int = 256
    width: int = 256
    persons: tuple = (2, 3)
    scale_range: tuple = (120.0, 170.0)
    max_rotation: float = 0.35
    keypoint_jitter: float = 1.0
    offset_noise: float = 0.0
    heatmap_noise: float = 0.02
    feat_channels: int = 17
    feature_mode: str = "gaussian-encoding"
    heatmap_sigma: float = 2.0
    feature_sigma: float = 3.0
    min_separation: float = 40.0
    margin: int = 6

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("image dims must be positive")
        for name in ("keypoint_jitter", "offset_noise", "heatmap_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.feature_mode not in ("gaussian-encoding", "random-smooth"):
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if self.feature_mode == "gaussian-encoding" and self.feat_channels < NUM_KEYPOINTS:
            raise ValueError("gaussian-encoding features need at least 17 channels")
        lo, hi = self.persons
        if not 0 <= lo <= hi:
            raise ValueError("invalid person count range")

    def to_dict(self):
        d = asdict(self)
        d["persons"] = list(self.persons)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["persons"] = tuple(d["persons"])
        d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    image_id: int
    gts: list
    maps: DenseMaps
    clean_maps: DenseMaps


def scene_rng(seed, index, stream=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index), int(stream)]))


def _rotate(points, pivot, angle):
    c, s = np.cos(angle), np.sin(angle)
    rel = points - pivot
    return pivot + rel @ np.array([[c, s], [-s, c]])


def articulated_pose(rng, height, rotation):
    """17 x 2 keypoints of a randomly articulated figure, centered at 0."""
    pts = TEMPLATE.copy()
    for joints, parent, spread in _LIMBS:
        angle = rng.uniform(-spread, spread)
        idx = list(joints)
        pts[idx] = _rotate(pts[idx], pts[parent], angle)
    pts[:5] += rng.uniform(-0.02, 0.02, size=2)
    pts = _rotate(pts * height, np.zeros(2), rotation)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return pts - 0.5 * (lo + hi)


def _place_people(cfg: SceneConfig, rng):
    count = int(rng.integers(cfg.persons[0], cfg.persons[1] + 1))
    placed = []
    scale = 1.0
    lo_m = cfg.margin
    while len(placed) < count:
        for _ in range(200):
            height = rng.uniform(*cfg.scale_range) * scale
            pts = articulated_pose(rng, height, rng.uniform(-cfg.max_rotation, cfg.max_rotation))
            span_lo, span_hi = pts.min(axis=0), pts.max(axis=0)
            x_lo, x_hi = lo_m - span_lo[0], cfg.width - 1 - lo_m - span_hi[0]
            y_lo, y_hi = lo_m - span_lo[1], cfg.height - 1 - lo_m - span_hi[1]
            if x_lo > x_hi or y_lo > y_hi:
                continue
            shift = np.array([rng.uniform(x_lo, x_hi), rng.uniform(y_lo, y_hi)])
            kp = np.floor(pts + shift + 0.5)
            kp[:, 0] = np.clip(kp[:, 0], lo_m, cfg.width - 1 - lo_m)
            kp[:, 1] = np.clip(kp[:, 1], lo_m, cfg.height - 1 - lo_m)
            g = GtInstance(np.column_stack([kp, np.full(NUM_KEYPOINTS, 2.0)]), 1.0, len(placed))
            c = np.array(g.center())
            if all(np.hypot(*(c - np.array(o.center()))) >= cfg.min_separation for o in placed):
                x0, y0, x1, y1 = g.bbox()
                area = max((x1 - x0) * (y1 - y0), 1.0)
                placed.append(GtInstance(g.keypoints, area, len(placed)))
                break
        else:
            scale *= 0.9
    return placed


def _render_features(cfg, gts, positions, rng):
    h, w = cfg.height, cfg.width
    C = cfg.feat_channels
    feats = np.zeros((C, h, w))
    start = 0
    if cfg.feature_mode == "gaussian-encoding":
        for g, pts in zip(gts, positions):
            for j in range(NUM_KEYPOINTS):
                np.maximum(feats[j], _gauss_plane(h, w, pts[j, 0], pts[j, 1], cfg.feature_sigma), out=feats[j])
        start = NUM_KEYPOINTS
    for c in range(start, C):
        field = gaussian_filter(rng.normal(size=(h, w)), 4.0)
        feats[c] = field / (np.abs(field).max() + 1e-12)
    return feats


def sample_scene(config: SceneConfig, index: int = 0) -> Scene:
    """Scene ``index`` of the stream defined by ``config.seed``."""
    rng = scene_rng(config.seed, index)
    gts = _place_people(config, rng)
    dims = (config.height, config.width)
    true_pos = [g.keypoints[:, :2] for g in gts]
    jitter_pos = [p + rng.normal(0.0, config.keypoint_jitter, size=p.shape) if config.keypoint_jitter > 0 else p
                  for p in true_pos]

    clean_hm, _ = render_gt_heatmaps(gts, dims, config.heatmap_sigma)
    clean_off, off_mask = render_gt_offsets(gts, dims, OFFSET_PATCH)
    clean_feat = _render_features(config, gts, true_pos, scene_rng(config.seed, index, 1))
    clean = DenseMaps(clean_hm, clean_off, clean_feat)

    hm, _ = render_gt_heatmaps(gts, dims, config.heatmap_sigma, positions=jitter_pos)
    feat = _render_features(config, gts, jitter_pos, scene_rng(config.seed, index, 1))
    off = clean_off.copy()
    if config.heatmap_noise > 0:
        # center channel stays clean so spurious peaks do not spawn detections
        noise = rng.normal(0.0, config.heatmap_noise, size=(NUM_KEYPOINTS,) + hm.shape[1:])
        hm[:NUM_KEYPOINTS] = np.clip(hm[:NUM_KEYPOINTS] + noise, 0.0, 1.0)
        feat = feat + rng.normal(0.0, config.heatmap_noise, size=feat.shape)
    if config.offset_noise > 0:
        off = off + np.where(off_mask, rng.normal(0.0, config.offset_noise, size=off.shape), 0.0)
    return Scene(index, gts, DenseMaps(hm, off, feat), clean)


def perturb_poses(poses: PoseSet, sigma: float, seed: int) -> PoseSet:
    """Displace keypoints by i.i.d. uniform noise in [-sigma, sigma] per axis."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0 or len(poses) == 0:
        return poses
    rng = np.random.default_rng(seed)
    kp = np.array(poses.keypoints)
    kp[..., :2] += rng.uniform(-sigma, sigma, size=kp[..., :2].shape)
    return poses.replace(keypoints=kp)


def perturbation_seed(seed: int, image_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(image_id), 7]).generate_state(1)[0])


# -- scene directories --------------------------------------------------------

def write_scene_dir(scenes, directory, config: SceneConfig, dtype="f64"):
    """Write scenes as tensor files plus one COCO ground-truth JSON."""
    d = Path(directory)
    images = []
    for sc in scenes:
        sub = d / "scenes" / f"{sc.image_id:06d}"
        sub.mkdir(parents=True, exist_ok=True)
        save_tensor(sc.maps.heatmaps, sub / "heatmaps.lgct", dtype)
        save_tensor(sc.maps.offsets, sub / "offsets.lgct", dtype)
        save_tensor(sc.maps.features, sub / "features.lgct", dtype)
        images.append((sc.image_id, sc.gts, (config.height, config.width)))
    write_json_atomic(gt_to_coco(images), d / "gt.json")
    write_json_atomic({"scene_config": config.to_dict(), "count": len(images)}, d / "scene.json")


def read_scene_dir(directory):
    """Yield ``(image_id, gts, maps)`` lazily from a scene directory."""
    d = Path(directory)
    for image_id, gts in load_coco_keypoints(d / "gt.json"):
        sub = d / "scenes" / f"{image_id:06d}"
        maps = DenseMaps(load_tensor(sub / "heatmaps.lgct"), load_tensor(sub / "offsets.lgct"),
                         load_tensor(sub / "features.lgct"))
        yield image_id, gts, maps


def scene_dir_config(directory) -> dict:
    return json.loads((Path(directory) / "scene.json").read_text())
