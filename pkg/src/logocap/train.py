"""Toy-scale training of the refinement head and scene-level evaluation.

The backbone outputs (dense maps) are fixed inputs; only the feature
projection and the message-passing network are trained.  Heatmap and
offset losses are still computed on those fixed maps so the logged total
matches the full objective.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cmp import (CmpConfig, CmpParams, cmp_backward, cmp_forward, encode_backward, init_params,
                  project_context, update_running_stats)
from .core import COCO_SKELETON, NUM_KEYPOINTS, bilinear_sample
from .decode import DEFAULT_MAX_N, DEFAULT_THRESHOLD, decode
from .errors import NumericalError
from .kem import global_kems, local_kems, reweigh_sigma, sample_and_reweigh
from .losses import (LossWeights, gt_centers, heatmap_loss, local_gt_heatmaps, offset_loss,
                     oks_kernel_loss, refined_heatmap_loss, render_gt_heatmaps, render_gt_offsets,
                     total_loss)
from .metrics import (evaluate_ap, keypoint_similarities, mean_oks, select_best_gt, similarity_tensor,
                      upper_bound_oracle)
from .optim import AdamState, optimizer_step
from .refine import RefineConfig, adaptation_backward, contextual_adaptation, refine_poses
from .synth import perturb_poses, perturbation_seed

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L_H", "L_Hr", "L_O", "L_K", "total")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    d: int = 16
    norm: str = "recal"
    positional: bool = True
    lr: float = 1e-3
    epochs: int = 3
    max_steps: int | None = None
    perturb: float = 4.0
    refine: RefineConfig = RefineConfig(method="fft")
    weights: LossWeights = LossWeights()
    max_n: int = DEFAULT_MAX_N
    threshold: float = DEFAULT_THRESHOLD


@dataclass
class SceneBatch:
    """Everything a training step needs for one scene, precomputed once."""

    image_id: int
    sampled: np.ndarray          # N x 17 x k x k x C
    hbar: np.ndarray             # N x 17 x a x a
    target_refined: np.ndarray   # N x 17 x a x a
    target_kernel: np.ndarray    # N x 17 x k x k
    s_match: np.ndarray          # N
    s_k: np.ndarray              # N x 17
    fixed_losses: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.sampled.shape[0]


def initial_poses(maps, image_id, perturb, seed, max_n=DEFAULT_MAX_N, threshold=DEFAULT_THRESHOLD):
    poses = decode(maps, max_n, threshold)
    return perturb_poses(poses, perturb, perturbation_seed(seed, image_id))


def prepare_batch(image_id, gts, maps, cfg: TrainConfig, spec=COCO_SKELETON) -> SceneBatch | None:
    rc, w = cfg.refine, cfg.weights
    poses = initial_poses(maps, image_id, cfg.perturb, cfg.seed, cfg.max_n, cfg.threshold)
    usable = [g for g in gts if g.num_visible > 0]
    if len(poses) == 0 or not usable:
        return None
    kems = local_kems(poses, spec, rc.k)
    grid = global_kems(poses, rc.a, rc.factor, spec if rc.global_scaled else None)
    sigma = reweigh_sigma(rc.a) if rc.sigma is None else rc.sigma
    hbar = sample_and_reweigh(maps.heatmaps[:NUM_KEYPOINTS], grid, sigma, rc.factor).values
    matched, tk, sm, sk = [], [], [], []
    for n in range(len(poses)):
        sim = similarity_tensor(kems.coords[n], usable, spec)
        best, score = select_best_gt(sim)
        gt = usable[best]
        matched.append(gt)
        tk.append((sim.clamped() if w.clamp_target else sim.values)[..., best])
        sm.append(score)
        sk.append(np.where(gt.visible, keypoint_similarities(poses.keypoints[n], gt, spec), 0.0))
    target_refined = local_gt_heatmaps(grid, matched, sigma, rc.factor)

    dims = maps.size
    gt_hm, fg = render_gt_heatmaps(usable, dims, w.heatmap_sigma)
    gt_off, _ = render_gt_offsets(usable, dims)
    fixed = {"heatmap": heatmap_loss(maps.heatmaps, gt_hm, fg, w)[0],
             "offset": offset_loss(maps.offsets, gt_off, gt_centers(usable), w)[0]}
    return SceneBatch(image_id, bilinear_sample(maps.features, kems.coords), hbar, target_refined,
                      np.array(tk), np.array(sm), np.array(sk), fixed)


def batch_loss(batch: SceneBatch, params: CmpParams, cfg: TrainConfig, grads: bool = True):
    """Forward (training-mode norms) and optionally backward on one scene."""
    enc, net, ada = {}, {}, {}
    ctx = project_context(batch.sampled, params, enc)
    kams = cmp_forward(ctx, params, training=True, cache=net)
    refined = contextual_adaptation(batch.hbar, kams, cfg.refine.method, cache=ada)
    l_ref, d_ref = refined_heatmap_loss(refined, batch.target_refined)
    N = batch.size
    l_k, d_k = 0.0, np.zeros_like(kams.values)
    for n in range(N):
        v, g = oks_kernel_loss(kams.values[n], batch.target_kernel[n], batch.s_match[n], batch.s_k[n])
        l_k += v / N
        d_k[n] = g / N
    parts = dict(batch.fixed_losses, refined=l_ref, kernel=l_k)
    value, coef = total_loss(parts, cfg.weights)
    if not np.isfinite(value):
        raise NumericalError("non-finite training loss")
    out = {"parts": parts, "total": value, "cache": net}
    if grads:
        _, d_kam_ref = adaptation_backward(ada, d_ref, need_hbar=False)
        d_kam = coef["refined"] * d_kam_ref + coef["kernel"] * d_k
        g, d_ctx = cmp_backward(net, params, d_kam)
        g.update(encode_backward(enc, d_ctx))
        out["grads"] = g
    return out


def dataset_loss(batches, params, cfg) -> float:
    """Mean total loss over scenes with the given parameters (no update)."""
    vals = [batch_loss(b, params, cfg, grads=False)["total"] for b in batches]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class TrainResult:
    params: CmpParams
    log: list
    initial_loss: float
    final_loss: float

    def loss_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(LOSS_COLUMNS)
        for row in self.log:
            wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def train_toy(scenes, cfg: TrainConfig, spec=COCO_SKELETON, feat_channels: int | None = None) -> TrainResult:
    """Train projection + CMP on ``scenes`` = iterable of (image_id, gts, maps)."""
    batches = []
    for image_id, gts, maps in scenes:
        if feat_channels is None:
            feat_channels = maps.features.shape[0]
        b = prepare_batch(image_id, gts, maps, cfg, spec)
        if b is not None:
            batches.append(b)
    if feat_channels is None:
        raise ValueError("no scenes to train on")
    params = init_params(cfg.seed, CmpConfig(d=cfg.d, feat_channels=feat_channels, norm=cfg.norm,
                                             positional=cfg.positional))
    initial = dataset_loss(batches, params, cfg)
    state = AdamState()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    rows = []
    step = 0
    budget = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * len(batches)
    for epoch in range(cfg.epochs if cfg.max_steps is None else 10 ** 9):
        if step >= budget or not batches:
            break
        for idx in rng.permutation(len(batches)):
            if step >= budget:
                break
            res = batch_loss(batches[idx], params, cfg)
            p = res["parts"]
            rows.append((step, p["heatmap"], p["refined"], p["offset"], p["kernel"], res["total"]))
            try:
                new_t, state = optimizer_step(params.tensors, res["grads"], state, cfg.lr)
            except NumericalError as exc:
                raise NumericalError(f"training diverged at step {step}: {exc}") from exc
            params = update_running_stats(params.with_tensors(new_t), res["cache"])
            if step % 50 == 0:
                log.info("step %d total %.6g", step, res["total"])
            step += 1
    final = dataset_loss(batches, params, cfg)
    return TrainResult(params, rows, initial, final)


# -- evaluation ----------------------------------------------------------------

def map_ordered(fn, items, threads=1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order is kept.

    ``items`` is consumed lazily, a few per worker at a time, so a scene
    stream never has to sit in memory all at once.
    """
    n = max(int(threads or 1), 1)
    if n == 1:
        return [fn(x) for x in items]
    out = []
    it = iter(items)
    with ThreadPoolExecutor(n) as pool:
        while True:
            chunk = list(itertools.islice(it, 2 * n))
            if not chunk:
                return out
            out.extend(pool.map(fn, chunk))


def evaluate_scene(image_id, gts, maps, params, cfg: TrainConfig, spec=COCO_SKELETON, with_oracle=True):
    base = initial_poses(maps, image_id, cfg.perturb, cfg.seed, cfg.max_n, cfg.threshold)
    out = {"image_id": image_id, "gts": gts, "baseline": base}
    if params is not None:
        rc = RefineConfig(cfg.refine.k, cfg.refine.a, cfg.refine.factor, cfg.refine.lam,
                          cfg.refine.sigma, cfg.refine.global_scaled, "direct")
        out["refined"] = refine_poses(maps, base, params, rc, spec)
    if with_oracle:
        out["oracle"] = upper_bound_oracle(base, gts, spec, cfg.refine.k)[0]
    return out


def evaluate_scenes(scenes, params, cfg: TrainConfig, spec=COCO_SKELETON, threads=1, with_oracle=True):
    """Baseline / refined / oracle mean OKS and AP over a scene stream.

    Per-scene work can run on a thread pool; results merge in scene order.
    """
    def run(item):
        return evaluate_scene(*item, params, cfg, spec, with_oracle)

    results = map_ordered(run, scenes, threads)
    gts = [r["gts"] for r in results]
    summary = {"images": len(results)}
    for key in ("baseline", "refined", "oracle"):
        if results and key in results[0]:
            preds = [r[key] for r in results]
            summary[f"{key}_oks"] = mean_oks(preds, gts, spec)
            summary[f"{key}_ap"] = evaluate_ap(preds, gts, spec).ap
    return summary, results
