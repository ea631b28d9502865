"""Keypoint similarity, OKS, AP evaluation and the local-window upper bound."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import COCO_SKELETON, GtInstance, KemGrid, PoseSet, SkeletonSpec
from .errors import NoGroundTruthError, UnmatchedInstanceError

OKS_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MEDIUM_RANGE = (32.0 ** 2, 96.0 ** 2)
LARGE_RANGE = (96.0 ** 2, float("inf"))


def _similarity(d2, sigma, area):
    return np.exp(-d2 / (2.0 * area * (2.0 * sigma) ** 2))


def keypoint_similarity(pred, gt, sigma_j: float, area: float) -> float:
    """COCO per-keypoint similarity ``exp(-d^2 / (2 * area * (2 sigma)^2))``."""
    if not area > 0:
        raise ValueError("area must be positive")
    if not sigma_j > 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(pred, dtype=np.float64)[:2] - np.asarray(gt, dtype=np.float64)[:2]
    return float(_similarity(d @ d, sigma_j, area))


def keypoint_similarities(pred_xy, gt: GtInstance, spec: SkeletonSpec = COCO_SKELETON):
    """Vector of 17 similarities of a predicted pose against ``gt``."""
    d = np.asarray(pred_xy, dtype=np.float64)[:, :2] - gt.keypoints[:, :2]
    return _similarity((d ** 2).sum(axis=1), spec.sigmas, gt.area)


def oks(pred, gt: GtInstance, spec: SkeletonSpec = COCO_SKELETON) -> float:
    """Mean keypoint similarity over the keypoints visible in ``gt``."""
    vis = gt.visible
    if not vis.any():
        raise UnmatchedInstanceError("unmatched instance: ground truth has no visible keypoints")
    return float(keypoint_similarities(pred, gt, spec)[vis].mean())


def oks_matrix(poses: PoseSet, gts, spec=COCO_SKELETON) -> np.ndarray:
    """P x G OKS table; gts without visible keypoints get NaN columns."""
    out = np.full((len(poses), len(gts)), np.nan)
    for g, gt in enumerate(gts):
        if gt.num_visible == 0:
            continue
        for p in range(len(poses)):
            out[p, g] = oks(poses.keypoints[p], gt, spec)
    return out


@dataclass(frozen=True)
class SimilarityTensor:
    """17 x k x k x N_gt similarities of one instance's local KEMs."""

    values: np.ndarray
    clamp_floor: float = 0.5

    def clamped(self) -> np.ndarray:
        return np.maximum(self.values, self.clamp_floor)

    @property
    def num_gt(self) -> int:
        return self.values.shape[-1]


def similarity_tensor(kems, gts, spec: SkeletonSpec = COCO_SKELETON,
                      clamp_floor: float = 0.5) -> SimilarityTensor:
    coords = kems.coords if isinstance(kems, KemGrid) else np.asarray(kems, dtype=np.float64)
    if coords.ndim == 5:
        if coords.shape[0] != 1:
            raise ValueError("similarity_tensor expects the grid of a single instance")
        coords = coords[0]
    J, k = coords.shape[0], coords.shape[1]
    vals = np.zeros((J, k, k, len(gts)))
    for g, gt in enumerate(gts):
        d = coords - gt.keypoints[:, None, None, :2]
        sim = _similarity((d ** 2).sum(-1), spec.sigmas[:, None, None], gt.area)
        vals[..., g] = np.where(gt.visible[:, None, None], sim, 0.0)
    return SimilarityTensor(vals, clamp_floor)


def select_best_gt(s: SimilarityTensor):
    """Index and matching score of the gt with the highest clamped mean."""
    if s.num_gt == 0:
        raise NoGroundTruthError("no ground truth")
    scores = s.clamped().mean(axis=(0, 1, 2))
    best = int(np.argmax(scores))
    return best, float(scores[best])


# -- AP -----------------------------------------------------------------------

@dataclass(frozen=True)
class ApReport:
    ap: float
    per_threshold: dict
    thresholds: tuple = OKS_THRESHOLDS
    empty: bool = False
    extra: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "ap"])
        for t in self.thresholds:
            w.writerow([f"{t:.2f}", repr(float(self.per_threshold[t]))])
        w.writerow(["mean", repr(float(self.ap))])
        for key in sorted(self.extra):
            w.writerow([key, repr(float(self.extra[key]))])
        return buf.getvalue()


def _interpolated_ap(tp, fp, n_gt):
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(fp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.spacing(1))
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _pose_area(kp):
    valid = kp[:, 2] > 0
    if not valid.any():
        return 0.0
    lo = kp[valid, :2].min(axis=0)
    hi = kp[valid, :2].max(axis=0)
    return float(np.prod(hi - lo))


def evaluate_ap(results, gts, spec: SkeletonSpec = COCO_SKELETON, area_range=None) -> ApReport:
    """Simplified COCO keypoint AP with greedy score-ordered matching.

    ``results`` and ``gts`` are parallel per-image lists.  With
    ``area_range=(lo, hi)`` ground truths outside the range are ignored, as
    are detections that match only ignored gts or that fall outside the
    range unmatched.
    """
    images = []
    n_gt = 0
    for poses, image_gts in zip(results, gts):
        usable = [g for g in image_gts if g.num_visible > 0]
        if area_range is None:
            ignore = np.zeros(len(usable), dtype=bool)
        else:
            ignore = np.array([not (area_range[0] <= g.area < area_range[1]) for g in usable], dtype=bool)
        n_gt += int((~ignore).sum())
        table = oks_matrix(poses, usable, spec) if len(poses) and usable else np.zeros((len(poses), len(usable)))
        ids = np.array([g.id for g in usable], dtype=np.int64)
        images.append((poses, table, ignore, ids))

    order = [(-float(poses.scores[p]), i, p) for i, (poses, *_rest) in enumerate(images) for p in range(len(poses))]
    order.sort()

    per = {}
    for t in OKS_THRESHOLDS:
        taken = [np.zeros(len(img[2]), dtype=bool) for img in images]
        tp, fp = [], []
        for _, i, p in order:
            poses, table, ignore, ids = images[i]
            match = -1
            for want_ignored in (False, True):
                cand = np.flatnonzero(~taken[i] & (ignore == want_ignored) & (table[p] >= t)) if table.shape[1] else []
                if len(cand):
                    best = table[p, cand].max()
                    tied = cand[table[p, cand] == best]
                    match = int(tied[np.lexsort((tied, ids[tied]))][0])
                    break
            if match >= 0:
                taken[i][match] = True
                if ignore[match]:
                    continue
                tp.append(1.0)
                fp.append(0.0)
            else:
                if area_range is not None:
                    a = _pose_area(poses.keypoints[p])
                    if not (area_range[0] <= a < area_range[1]):
                        continue
                tp.append(0.0)
                fp.append(1.0)
        per[t] = _interpolated_ap(np.array(tp), np.array(fp), n_gt)
    empty = n_gt == 0 or not order
    return ApReport(float(np.mean([per[t] for t in OKS_THRESHOLDS])), per, OKS_THRESHOLDS, empty)


def mean_oks(results, gts, spec: SkeletonSpec = COCO_SKELETON) -> float:
    """Average over usable gts of the best OKS any prediction achieves."""
    vals = []
    for poses, image_gts in zip(results, gts):
        for g in image_gts:
            if g.num_visible == 0:
                continue
            if len(poses) == 0:
                vals.append(0.0)
            else:
                vals.append(max(oks(poses.keypoints[p], g, spec) for p in range(len(poses))))
    return float(np.mean(vals)) if vals else 0.0


# -- local-window oracle ------------------------------------------------------

def upper_bound_oracle(initial: PoseSet, gts, spec: SkeletonSpec = COCO_SKELETON, k: int = 11):
    """Snap each keypoint to its best-similarity cell in its local KEM window.

    Each instance is first matched to the gt with the largest summed
    similarity over the whole window, then every visible keypoint moves to
    the lattice cell most similar to that gt's keypoint.  Returns the
    snapped poses and their mean OKS against the matched gts.
    """
    from .kem import local_kems

    usable = [g for g in gts if g.num_visible > 0]
    if len(initial) == 0 or not usable:
        return initial, 0.0
    grid = local_kems(initial, spec, k).coords
    kps = np.array(initial.keypoints)
    scores = []
    for n in range(len(initial)):
        sim = similarity_tensor(grid[n], usable, spec).values
        g = int(np.argmax(sim.sum(axis=(0, 1, 2))))
        gt = usable[g]
        for j in np.flatnonzero(gt.visible):
            u, v = np.unravel_index(int(np.argmax(sim[j, :, :, g])), sim.shape[1:3])
            kps[n, j, :2] = grid[n, j, u, v]
        scores.append(oks(kps[n], gt, spec))
    return initial.replace(keypoints=kps), float(np.mean(scores))
