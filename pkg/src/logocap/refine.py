"""Dynamic per-keypoint correlation of attraction maps with global heatmaps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .cmp import CmpParams, KamSet, cmp_forward, encode_local_context
from .core import COCO_SKELETON, NUM_KEYPOINTS, DenseMaps, KemGrid, PoseSet, SkeletonSpec
from .errors import MissingCacheError, ShapeError
from .kem import (DEFAULT_UPSAMPLE, GLOBAL_WINDOW, LOCAL_WINDOW, ReweighedHeatmaps,
                  global_kems, local_kems, sample_and_reweigh)

TOP1_WEIGHT = 0.75


@dataclass(frozen=True)
class RefinedHeatmaps:
    values: np.ndarray  # N x 17 x a x a


def _values(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def _check_shapes(h, k):
    if h.ndim != 4 or k.ndim != 4 or h.shape[:2] != k.shape[:2]:
        raise ShapeError(f"heatmaps {h.shape} and kernels {k.shape} disagree on N x 17")
    if k.shape[2] != k.shape[3] or k.shape[2] % 2 == 0:
        raise ShapeError(f"kernels must be odd and square, got {k.shape[2:]}")
    if k.shape[2] > h.shape[2] + 2 * (k.shape[2] // 2):
        raise ShapeError("kernel larger than the padded heatmap window")


def _correlate_direct(h, k):
    n, j, a, b = h.shape
    ks = k.shape[2]
    r = ks // 2
    hp = np.pad(h, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros_like(h)
    for u in range(ks):
        for v in range(ks):
            out += k[:, :, u, v, None, None] * hp[:, :, u:u + a, v:v + b]
    return out


def contextual_adaptation(hbar, kams, method: str = "direct", cache: dict | None = None) -> RefinedHeatmaps:
    """Correlate each ``hbar[n, j]`` with its own kernel ``kams[n, j]``.

    Zero padding keeps the a x a size; the kernel is not flipped.
    ``method="fft"`` trades exactness in the last few ulps for speed.
    """
    h, k = _values(hbar), _values(kams)
    _check_shapes(h, k)
    if h.shape[0] == 0:
        out = np.zeros_like(h)
    elif method == "fft":
        out = fftconvolve(h, k[:, :, ::-1, ::-1], mode="same", axes=(2, 3))
    elif method == "direct":
        out = _correlate_direct(h, k)
    else:
        raise ValueError(f"unknown method {method!r}")
    if cache is not None:
        cache.update(hbar=h, kams=k, method=method)
    return RefinedHeatmaps(out)


def adaptation_backward(cache: dict | None, upstream, need_hbar: bool = True):
    """Gradients ``(d_hbar, d_kams)`` of the per-instance correlation."""
    if not cache or "hbar" not in cache:
        raise MissingCacheError("adaptation_backward needs the cache from contextual_adaptation")
    h, k, method = cache["hbar"], cache["kams"], cache["method"]
    g = _values(upstream)
    if g.shape != h.shape:
        raise ShapeError("upstream gradient must match the refined heatmap shape")
    ks = k.shape[2]
    r = ks // 2
    a, b = h.shape[2:]
    if h.shape[0] == 0:
        return np.zeros_like(h), np.zeros_like(k)
    hp = np.pad(h, ((0, 0), (0, 0), (r, r), (r, r)))
    if method == "fft":
        d_k = fftconvolve(hp, g[:, :, ::-1, ::-1], mode="valid", axes=(2, 3))
        d_h = fftconvolve(g, k, mode="same", axes=(2, 3)) if need_hbar else None
        return d_h, d_k
    d_k = np.empty_like(k)
    for u in range(ks):
        for v in range(ks):
            d_k[:, :, u, v] = (g * hp[:, :, u:u + a, v:v + b]).sum(axis=(2, 3))
    d_h = None
    if need_hbar:
        gp = np.pad(g, ((0, 0), (0, 0), (r, r), (r, r)))
        d_h = np.zeros_like(h)
        for u in range(ks):
            for v in range(ks):
                # output (x - u + r) read hbar at x, with kernel tap (u, v)
                d_h += k[:, :, u, v, None, None] * gp[:, :, ks - 1 - u:ks - 1 - u + a, ks - 1 - v:ks - 1 - v + b]
    return d_h, d_k


def top2_cells(plane):
    """Flat indices of the best and second-best distinct cells (row-major ties)."""
    flat = plane.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    return int(order[0]), int(order[1] if order.size > 1 else order[0])


def decode_final(refined, grid: KemGrid, centers, lam: float = TOP1_WEIGHT) -> PoseSet:
    """Convex top-2 decoding of refined heatmaps into poses.

    Locations are returned in the frame of ``grid``.  A keypoint's final
    score is its convex confidence (clipped to [0, 1]) times the center
    score; keypoints scoring <= 0 keep their location with score 0, and
    instances without any positive keypoint are dropped.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    vals = _values(refined)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    N, J, a, _ = vals.shape
    coords = grid.coords.reshape(N, J, a * a, 2)
    kps = np.zeros((N, J, 3))
    for n in range(N):
        for j in range(J):
            plane = vals[n, j].reshape(-1)
            i1, i2 = top2_cells(plane)
            kps[n, j, :2] = lam * coords[n, j, i1] + (1 - lam) * coords[n, j, i2]
            conf = min(max(lam * plane[i1] + (1 - lam) * plane[i2], 0.0), 1.0)
            kps[n, j, 2] = conf * centers[n, 2]
    valid = kps[..., 2] > 0
    kps[..., 2] = np.where(valid, kps[..., 2], 0.0)
    keep = valid.any(axis=1)
    scores = np.array([kps[n, valid[n], 2].mean() for n in np.flatnonzero(keep)])
    return PoseSet(centers[keep], kps[keep], scores.reshape(-1))


@dataclass(frozen=True)
class RefineConfig:
    k: int = LOCAL_WINDOW
    a: int = GLOBAL_WINDOW
    factor: int = DEFAULT_UPSAMPLE
    lam: float = TOP1_WEIGHT
    sigma: float | None = None
    global_scaled: bool = False
    method: str = "direct"


def refine_poses(maps: DenseMaps, initial: PoseSet, params: CmpParams,
                 config: RefineConfig = RefineConfig(), spec: SkeletonSpec = COCO_SKELETON,
                 return_intermediates: bool = False):
    """Full refinement: KEMs, context, CMP, reweighing, adaptation, decoding."""
    if len(initial) == 0:
        return (PoseSet.empty(), {}) if return_intermediates else PoseSet.empty()
    kems = local_kems(initial, spec, config.k)
    ctx = encode_local_context(maps.features, params, kems)
    kams = cmp_forward(ctx, params, training=False)
    grid = global_kems(initial, config.a, config.factor, spec if config.global_scaled else None)
    hbar = sample_and_reweigh(maps.heatmaps[:NUM_KEYPOINTS], grid, config.sigma, config.factor)
    refined = contextual_adaptation(hbar, kams, config.method)
    poses = decode_final(refined, grid, initial.centers, config.lam)
    kp = np.array(poses.keypoints)
    kp[..., :2] /= config.factor
    out = poses.replace(keypoints=kp)
    if return_intermediates:
        return out, {"kems": kems, "kams": kams, "grid": grid, "hbar": hbar, "refined": refined}
    return out


__all__ = [
    "RefinedHeatmaps", "ReweighedHeatmaps", "KamSet", "RefineConfig",
    "contextual_adaptation", "adaptation_backward", "decode_final", "refine_poses", "top2_cells",
]
