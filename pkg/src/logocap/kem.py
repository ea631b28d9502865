"""Local and global keypoint expansion maps and Gaussian reweighing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import COCO_SKELETON, NUM_KEYPOINTS, KemGrid, PoseSet, SkeletonSpec, sample_channelwise
from .errors import ShapeError

LOCAL_WINDOW = 11
GLOBAL_WINDOW = 97
DEFAULT_UPSAMPLE = 4


def _offset_lattice(k):
    if k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be odd, got {k}")
    r = k // 2
    steps = np.arange(-r, r + 1, dtype=np.float64)
    dy, dx = np.meshgrid(steps, steps, indexing="ij")
    return np.stack([dx, dy], axis=-1)  # k x k x 2, (x, y)


def local_kems(poses: PoseSet, spec: SkeletonSpec = COCO_SKELETON, k: int = LOCAL_WINDOW) -> KemGrid:
    """Lift every keypoint to a k x k lattice scaled by ``sigma_j / min(sigma)``."""
    lattice = _offset_lattice(k)
    scale = spec.expansion_rates[None, :, None, None, None]
    coords = poses.xy[:, :, None, None, :] + lattice[None, None] * scale
    return KemGrid(coords.reshape(len(poses), NUM_KEYPOINTS, k, k, 2))


def global_kems(poses: PoseSet, a: int = GLOBAL_WINDOW, factor: int = 1,
                spec: SkeletonSpec | None = None) -> KemGrid:
    """Unit-stride a x a lattice around each keypoint.

    Coordinates are expressed in the frame of the heatmaps upsampled by
    ``factor``.  Passing ``spec`` scales the lattice per keypoint type the
    same way the local KEMs are scaled.
    """
    lattice = _offset_lattice(a)
    if spec is None:
        offs = lattice[None, None]
    else:
        offs = lattice[None, None] * spec.expansion_rates[None, :, None, None, None]
    coords = factor * poses.xy[:, :, None, None, :] + offs
    return KemGrid(coords.reshape(len(poses), NUM_KEYPOINTS, a, a, 2))


def gaussian_window(a: int, sigma: float) -> np.ndarray:
    c = (a - 1) / 2.0
    u = np.arange(a, dtype=np.float64) - c
    return np.exp(-(u[:, None] ** 2 + u[None, :] ** 2) / (2.0 * sigma ** 2))


def reweigh_sigma(a: int) -> float:
    return (a - 1) / 6.0


@dataclass(frozen=True)
class ReweighedHeatmaps:
    values: np.ndarray  # N x 17 x a x a
    sigma: float

    @property
    def a(self) -> int:
        return self.values.shape[-1]


def upsample_heatmaps(maps, factor: int) -> np.ndarray:
    """Bilinear upsampling where output texel i samples the input at i / factor."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("factor must be a positive integer")
    m = np.asarray(maps, dtype=np.float64)
    if factor == 1:
        return m.copy()
    c, h, w = m.shape
    I, J = np.meshgrid(np.arange(factor * h), np.arange(factor * w), indexing="ij")
    out = np.empty((c, factor * h, factor * w))
    for ch in range(c):
        chans = np.full(I.size, ch)
        out[ch] = sample_channelwise(m, J.reshape(-1) / factor, I.reshape(-1) / factor,
                                     chans).reshape(I.shape)
    return out


def sample_and_reweigh(heatmaps, grid: KemGrid, sigma: float | None = None,
                       factor: int = 1) -> ReweighedHeatmaps:
    """Sample keypoint heatmaps on the global KEMs and apply the Gaussian prior.

    ``heatmaps`` holds the 17 keypoint channels.  With ``factor > 1`` they
    are low-resolution maps and sampling happens on their implicit
    ``factor``-times upsampled version (grid coordinates are in that frame).
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    N, J, a = grid.coords.shape[:3]
    if hm.ndim != 3 or hm.shape[0] != J:
        raise ShapeError(f"grid has {J} keypoint channels but heatmaps have shape {hm.shape}")
    sigma = reweigh_sigma(a) if sigma is None else float(sigma)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    pts = grid.coords.reshape(-1, 2)
    chans = np.broadcast_to(np.arange(J)[None, :, None, None], (N, J, a, a)).reshape(-1)
    sampled = sample_channelwise(hm, pts[:, 0], pts[:, 1], chans, factor).reshape(N, J, a, a)
    return ReweighedHeatmaps(sampled * gaussian_window(a, sigma), sigma)
