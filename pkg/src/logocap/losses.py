"""Training objectives and ground-truth rendering.

Every loss returns ``(value, gradient)`` with the gradient taken with
respect to the prediction argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CENTER_CHANNEL, NUM_KEYPOINTS, KemGrid
from .errors import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_total: float = 0.01
    fg_weight: float = 1.0
    bg_weight: float = 0.1
    beta: float = 1.0 / 9.0
    top1_lambda: float = 0.75
    heatmap_sigma: float = 2.0
    area_exponent: float = 1.0
    clamp_target: bool = True

    def __post_init__(self):
        for name in ("fg_weight", "bg_weight", "beta", "top1_lambda", "heatmap_sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_total < 0:
            raise ValueError("lambda_total must be non-negative")


def _gauss_plane(h, w, x, y, sigma):
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = np.exp(-((xs - x) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((ys - y) ** 2) / (2 * sigma ** 2))
    return gy[:, None] * gx[None, :]


def render_gt_heatmaps(gts, dims, sigma: float = 2.0, center_sigma: float | None = None,
                       positions=None):
    """Render 18 Gaussian heatmaps (peak 1, max-combined) and a foreground mask.

    ``positions`` optionally overrides where each instance's keypoints are
    drawn (N x 17 x 2); visibility and centers still come from ``gts``.
    """
    h, w = dims
    center_sigma = sigma if center_sigma is None else center_sigma
    hm = np.zeros((NUM_KEYPOINTS + 1, h, w))
    mask = np.zeros((h, w), dtype=bool)
    pad = 3.0 * sigma
    for i, g in enumerate(gts):
        pts = g.keypoints[:, :2] if positions is None else np.asarray(positions[i])
        for j in np.flatnonzero(g.visible):
            np.maximum(hm[j], _gauss_plane(h, w, pts[j, 0], pts[j, 1], sigma), out=hm[j])
        if g.num_visible:
            cx, cy = g.center()
            np.maximum(hm[CENTER_CHANNEL], _gauss_plane(h, w, cx, cy, center_sigma), out=hm[CENTER_CHANNEL])
            x0, y0, x1, y1 = g.bbox()
            r0, r1 = int(max(np.floor(y0 - pad), 0)), int(min(np.ceil(y1 + pad), h - 1))
            c0, c1 = int(max(np.floor(x0 - pad), 0)), int(min(np.ceil(x1 + pad), w - 1))
            mask[r0:r1 + 1, c0:c1 + 1] = True
    return hm, mask


def render_gt_offsets(gts, dims, patch: int = 2):
    """Offsets from every pixel of a (2 patch + 1)^2 block around each gt
    center to that instance's keypoints, plus the block mask.  Later
    instances overwrite earlier ones where blocks overlap."""
    h, w = dims
    off = np.zeros((2 * NUM_KEYPOINTS, h, w))
    mask = np.zeros((h, w), dtype=bool)
    for g in gts:
        if g.num_visible == 0:
            continue
        cx, cy = (int(v) for v in g.center())
        ys = np.arange(max(cy - patch, 0), min(cy + patch, h - 1) + 1)
        xs = np.arange(max(cx - patch, 0), min(cx + patch, w - 1) + 1)
        block = np.ix_(ys, xs)
        for j in range(NUM_KEYPOINTS):
            off[2 * j][block] = g.keypoints[j, 0] - xs[None, :]
            off[2 * j + 1][block] = g.keypoints[j, 1] - ys[:, None]
        mask[block] = True
    return off, mask


def gt_centers(gts):
    """``(x, y, area)`` triples of the usable instances, for the offset loss."""
    return [(*g.center(), g.area) for g in gts if g.num_visible > 0]


def heatmap_loss(pred, gt, mask, weights: LossWeights = LossWeights()):
    """Foreground/background weighted MSE over the 18 x h x w domain."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[1:] != np.shape(mask):
        raise ShapeError("prediction, target and mask shapes differ")
    w = np.where(mask, weights.fg_weight, weights.bg_weight)[None]
    r = pred - gt
    n = pred.size
    return float(((w * r) ** 2).sum() / n), 2.0 * w ** 2 * r / n


def smooth_l1(x, beta: float = 1.0 / 9.0):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x ** 2 / beta, ax - 0.5 * beta)


def smooth_l1_grad(x, beta: float = 1.0 / 9.0):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def offset_loss(pred, gt, centers, weights: LossWeights = LossWeights()):
    """Area-weighted SmoothL1 on the 34 offset channels at gt center pixels.

    ``centers`` is a sequence of ``(x, y, area)`` with integer pixel x, y.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("offset prediction and target shapes differ")
    centers = list(centers)
    if not centers:
        raise ValueError("no centers")
    grad = np.zeros_like(pred)
    total = 0.0
    for x, y, area in centers:
        xi, yi = int(x), int(y)
        a = float(area) ** weights.area_exponent
        diff = pred[:, yi, xi] - gt[:, yi, xi]
        total += a * smooth_l1(diff, weights.beta).sum()
        grad[:, yi, xi] += a * smooth_l1_grad(diff, weights.beta)
    n = len(centers)
    return total / n, grad / n


def local_gt_heatmaps(grid: KemGrid, matched, sigma: float, factor: int = 1):
    """On-the-fly targets for the refined heatmaps.

    ``matched[n]`` is the gt instance paired with prediction n (or None).
    Each target plane is a peak-1 Gaussian of std ``sigma`` at the gt
    keypoint position expressed in the grid frame; invisible keypoints and
    unmatched instances get all-zero planes.
    """
    coords = grid.coords
    N, J, a = coords.shape[:3]
    out = np.zeros((N, J, a, a))
    for n, gt in enumerate(matched):
        if gt is None:
            continue
        target = factor * gt.keypoints[:, None, None, :2]
        d2 = ((coords[n] - target) ** 2).sum(-1)
        planes = np.exp(-d2 / (2.0 * sigma ** 2))
        out[n] = np.where(gt.visible[:, None, None], planes, 0.0)
    return out


def refined_heatmap_loss(refined, target):
    r = np.asarray(getattr(refined, "values", refined), dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise ShapeError("refined heatmaps and target shapes differ")
    if r.size == 0:
        return 0.0, np.zeros_like(r)
    diff = r - t
    return float((diff ** 2).mean()), 2.0 * diff / r.size


def oks_kernel_loss(kams, target, s_match: float, s_k):
    """``s_match * sum_k s_k * |K - S|^2`` for one instance.

    ``target`` is the (clamped) similarity slice of the matched gt,
    17 x k x k; ``s_match`` and ``s_k`` are treated as constants.
    """
    K = np.asarray(getattr(kams, "values", kams), dtype=np.float64)
    S = np.asarray(target, dtype=np.float64)
    if K.shape != S.shape:
        raise ShapeError("KAM and similarity target shapes differ")
    w = float(s_match) * np.asarray(s_k, dtype=np.float64).reshape(-1, 1, 1)
    diff = K - S
    return float((w * diff ** 2).sum()), 2.0 * w * diff


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    """Combine the four terms; returns ``(L, dL/dpart)``."""
    lam = weights.lambda_total
    coef = {"heatmap": 1.0, "refined": 1.0, "offset": lam, "kernel": lam}
    value = sum(coef[k] * float(parts.get(k, 0.0)) for k in coef)
    return value, coef
