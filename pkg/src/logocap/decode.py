"""Center-offset pose initialisation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CENTER_CHANNEL, NUM_KEYPOINTS, DenseMaps, PoseSet

DEFAULT_MAX_N = 30
DEFAULT_THRESHOLD = 0.01


@dataclass(frozen=True)
class CenterCandidate:
    x: int
    y: int
    score: float


def local_maxima_mask(m: np.ndarray) -> np.ndarray:
    """True where a pixel strictly exceeds every existing 8-neighbour."""
    h, w = m.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = m
    mask = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            mask &= m > padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return mask


def extract_centers(center_map, max_n: int = DEFAULT_MAX_N,
                    threshold: float = DEFAULT_THRESHOLD) -> list[CenterCandidate]:
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    m = np.asarray(center_map, dtype=np.float64)
    flat = np.flatnonzero(local_maxima_mask(m) & (m >= threshold))
    vals = m.reshape(-1)[flat]
    order = np.argsort(-vals, kind="stable")[:max_n]
    w = m.shape[1]
    return [CenterCandidate(int(flat[i] % w), int(flat[i] // w), float(vals[i])) for i in order]


def decode_initial_poses(maps: DenseMaps, candidates) -> PoseSet:
    if not candidates:
        return PoseSet.empty()
    xs = np.array([c.x for c in candidates], dtype=np.intp)
    ys = np.array([c.y for c in candidates], dtype=np.intp)
    sc = np.array([c.score for c in candidates], dtype=np.float64)
    off = maps.offsets[:, ys, xs].T.reshape(-1, NUM_KEYPOINTS, 2)
    kps = np.empty((len(candidates), NUM_KEYPOINTS, 3))
    kps[..., 0] = xs[:, None] + off[..., 0]
    kps[..., 1] = ys[:, None] + off[..., 1]
    kps[..., 2] = sc[:, None]
    centers = np.stack([xs, ys, sc], axis=1).astype(np.float64)
    return PoseSet(centers, kps)


def decode(maps: DenseMaps, max_n: int = DEFAULT_MAX_N, threshold: float = DEFAULT_THRESHOLD) -> PoseSet:
    """Baseline decoder: peaks of the center channel plus offsets."""
    return decode_initial_poses(maps, extract_centers(maps.heatmaps[CENTER_CHANNEL], max_n, threshold))
