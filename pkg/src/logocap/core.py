"""Shared data model and bilinear sampling.

Coordinates are continuous pixels with the origin at the center of texel
(0, 0): texel ``[row, col]`` sits at ``(x=col, y=row)``.  Every value object
stores float64 arrays and marks them read-only after construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

NUM_KEYPOINTS = 17
CENTER_CHANNEL = 17

COCO_KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class SkeletonSpec:
    names: tuple = COCO_KEYPOINT_NAMES
    sigmas: np.ndarray = field(default_factory=lambda: np.array(COCO_SIGMAS))

    def __post_init__(self):
        sig = _frozen(self.sigmas)
        if sig.ndim != 1 or len(self.names) != sig.shape[0]:
            raise ShapeError("names and sigmas must have equal length")
        if not np.all(sig > 0):
            raise ValueError("keypoint sigmas must be strictly positive")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "sigmas", sig)

    @property
    def num_keypoints(self) -> int:
        return len(self.names)

    @property
    def expansion_rates(self) -> np.ndarray:
        """Per-type lattice stride, ``sigma_j / min(sigma)``."""
        return self.sigmas / self.sigmas.min()


COCO_SKELETON = SkeletonSpec()


@dataclass(frozen=True)
class DenseMaps:
    """Per-image network outputs: 18 heatmaps, 34 offsets, C features."""

    heatmaps: np.ndarray
    offsets: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        hm, off, feat = (_frozen(a) for a in (self.heatmaps, self.offsets, self.features))
        if hm.ndim != 3 or hm.shape[0] != NUM_KEYPOINTS + 1:
            raise ShapeError(f"heatmaps must be 18xhxw, got {hm.shape}")
        if off.ndim != 3 or off.shape[0] != 2 * NUM_KEYPOINTS:
            raise ShapeError(f"offsets must be 34xhxw, got {off.shape}")
        if feat.ndim != 3:
            raise ShapeError(f"features must be Cxhxw, got {feat.shape}")
        if not hm.shape[1:] == off.shape[1:] == feat.shape[1:]:
            raise ShapeError("heatmaps, offsets and features differ in spatial size")
        object.__setattr__(self, "heatmaps", hm)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "features", feat)

    @property
    def size(self):
        return self.heatmaps.shape[1:]


@dataclass(frozen=True)
class PoseSet:
    """N pose instances.

    ``centers`` is N x 3 (x, y, score) and ``keypoints`` N x 17 x 3.  The
    instance ranking score defaults to the center score when not given.
    """

    centers: np.ndarray
    keypoints: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        c = _frozen(self.centers).reshape(-1, 3)
        k = _frozen(self.keypoints).reshape(-1, NUM_KEYPOINTS, 3)
        if c.shape[0] != k.shape[0]:
            raise ShapeError("centers and keypoints disagree on instance count")
        s = c[:, 2] if self.scores is None else np.asarray(self.scores, dtype=np.float64)
        s = _frozen(s).reshape(-1)
        if s.shape[0] != c.shape[0]:
            raise ShapeError("one instance score per pose is required")
        for name, arr in (("centers", c), ("keypoints", k)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "keypoints", k)
        object.__setattr__(self, "scores", s)

    def __len__(self):
        return self.centers.shape[0]

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, NUM_KEYPOINTS, 3)))

    @property
    def xy(self) -> np.ndarray:
        return self.keypoints[..., :2]

    def replace(self, **changes):
        kw = dict(centers=self.centers, keypoints=self.keypoints, scores=self.scores)
        kw.update(changes)
        return PoseSet(**kw)


@dataclass(frozen=True)
class GtInstance:
    keypoints: np.ndarray  # 17 x 3, (x, y, visibility)
    area: float
    id: int = 0

    def __post_init__(self):
        k = _frozen(self.keypoints).reshape(NUM_KEYPOINTS, 3)
        if not self.area > 0:
            raise ValueError(f"instance {self.id}: area must be positive")
        object.__setattr__(self, "keypoints", k)
        object.__setattr__(self, "area", float(self.area))

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    @property
    def num_visible(self) -> int:
        return int(self.visible.sum())

    def bbox(self):
        """(x0, y0, x1, y1) of the visible keypoints."""
        pts = self.keypoints[self.visible, :2]
        if len(pts) == 0:
            return (0.0, 0.0, 0.0, 0.0)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def center(self):
        """Bounding-box center snapped to the nearest texel."""
        x0, y0, x1, y1 = self.bbox()
        return (float(np.floor(0.5 * (x0 + x1) + 0.5)), float(np.floor(0.5 * (y0 + y1) + 0.5)))


@dataclass(frozen=True)
class KemGrid:
    """Keypoint expansion lattice, N x 17 x k x k x 2 pixel coordinates."""

    coords: np.ndarray

    def __post_init__(self):
        c = _frozen(self.coords)
        if c.ndim != 5 or c.shape[-1] != 2 or c.shape[2] != c.shape[3]:
            raise ShapeError(f"KEM grid must be N x J x k x k x 2, got {c.shape}")
        object.__setattr__(self, "coords", c)

    @property
    def window_size(self) -> int:
        return self.coords.shape[2]

    @property
    def num_instances(self) -> int:
        return self.coords.shape[0]

    @property
    def centers(self) -> np.ndarray:
        r = self.window_size // 2
        return self.coords[:, :, r, r, :]

    @property
    def strides(self) -> np.ndarray:
        """N x J x 2 lattice step along (x, y); zero when k == 1."""
        k = self.window_size
        if k == 1:
            return np.zeros(self.coords.shape[:2] + (2,))
        sx = (self.coords[:, :, 0, -1, 0] - self.coords[:, :, 0, 0, 0]) / (k - 1)
        sy = (self.coords[:, :, -1, 0, 1] - self.coords[:, :, 0, 0, 1]) / (k - 1)
        return np.stack([sx, sy], axis=-1)


def _bilinear_gather(m, xs, ys):
    """Sample every channel of ``m`` (c x h x w) at flat xs/ys; returns P x c."""
    h, w = m.shape[1:]
    x = np.clip(xs, 0.0, w - 1)
    y = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    top = m[:, y0, x0] * (1 - wx) + m[:, y0, x1] * wx
    bot = m[:, y1, x0] * (1 - wx) + m[:, y1, x1] * wx
    return (top * (1 - wy) + bot * wy).T


def bilinear_sample(tensor, points) -> np.ndarray:
    """Bilinearly sample a c x h x w tensor at (x, y) points.

    Out-of-bounds points are clamped to the border first.  Returns an
    array of shape ``points.shape[:-1] + (c,)``.
    """
    m = np.asarray(tensor, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty tensor")
    if m.ndim == 2:
        m = m[None]
    pts = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(pts)):
        raise ValueError("sample points must be finite")
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, 2)
    out = _bilinear_gather(m, flat[:, 0], flat[:, 1])
    return out.reshape(lead + (m.shape[0],))


def sample_channelwise(tensor, xs, ys, channels, factor: int = 1) -> np.ndarray:
    """Sample ``tensor[channels[i]]`` at (xs[i], ys[i]) for each i.

    With ``factor > 1`` the coordinates address the map upsampled by that
    factor (see :func:`logocap.kem.upsample_heatmaps`).  The upsampled texels
    are evaluated on demand, so the result equals materialising the
    upsampled map and sampling it, without the memory cost.
    """
    m = np.asarray(tensor, dtype=np.float64)
    ch = np.asarray(channels, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h, w = m.shape[1:]
    if factor == 1:
        return _gather_channel(m, ch, xs, ys, h, w)
    H, W = factor * h, factor * w
    X = np.clip(xs, 0.0, W - 1)
    Y = np.clip(ys, 0.0, H - 1)
    X0 = np.floor(X).astype(np.intp)
    Y0 = np.floor(Y).astype(np.intp)
    X1 = np.minimum(X0 + 1, W - 1)
    Y1 = np.minimum(Y0 + 1, H - 1)
    wx = X - X0
    wy = Y - Y0

    def up(J, I):
        return _gather_channel(m, ch, J / factor, I / factor, h, w)

    top = up(X0, Y0) * (1 - wx) + up(X1, Y0) * wx
    bot = up(X0, Y1) * (1 - wx) + up(X1, Y1) * wx
    return top * (1 - wy) + bot * wy


def _gather_channel(m, ch, xs, ys, h, w):
    x = np.clip(xs, 0.0, w - 1)
    y = np.clip(ys, 0.0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = x - x0
    wy = y - y0
    top = m[ch, y0, x0] * (1 - wx) + m[ch, y0, x1] * wx
    bot = m[ch, y1, x0] * (1 - wx) + m[ch, y1, x1] * wx
    return top * (1 - wy) + bot * wy
