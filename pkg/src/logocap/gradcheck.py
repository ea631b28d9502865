"""Central finite-difference checks for every hand-written gradient.

Each check builds a small random instance, reduces the operation's output
to a scalar through a fixed random projection, and compares the analytic
gradient with central differences on a sample of entries.  The error is
the relative norm ``|a - n| / max(|a|, |n|)`` over the sampled entries.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .cmp import (CmpConfig, LocalContext, cmp_backward, cmp_forward, encode_backward, init_params,
                  project_context)
from .losses import (LossWeights, heatmap_loss, offset_loss, oks_kernel_loss, refined_heatmap_loss,
                     smooth_l1, smooth_l1_grad, total_loss)
from .refine import RefineConfig, adaptation_backward, contextual_adaptation
from .train import SceneBatch, TrainConfig, batch_loss

STEP = 1e-6
TOLERANCE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    tensor: str
    error: float
    entries: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def numeric_gradient(f, x, indices, step=STEP):
    """Central differences of scalar ``f()`` w.r.t. ``x.flat[indices]``; x is mutated in place."""
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for i, idx in enumerate(indices):
        old = flat[idx]
        flat[idx] = old + step
        hi = f()
        flat[idx] = old - step
        lo = f()
        flat[idx] = old
        out[i] = (hi - lo) / (2.0 * step)
    return out


def _sample(rng, size, limit):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def check(name, tensor, f, x, analytic, rng, samples=24, step=STEP) -> CheckResult:
    idx = _sample(rng, x.size, samples)
    num = numeric_gradient(f, x, idx, step)
    return CheckResult(name, tensor, relative_error(np.asarray(analytic).reshape(-1)[idx], num), len(idx))


# -- individual suites ----------------------------------------------------------

def _random_params(rng, cfg, seed):
    p = init_params(seed, cfg)
    t = {k: v.copy() for k, v in p.tensors.items()}
    # a non-zero head so gradients reach the lower layers
    t["head_w"] = rng.normal(0.0, 0.5, size=t["head_w"].shape)
    t["head_b"] = rng.normal(0.0, 0.5, size=t["head_b"].shape)
    buf = {k: (rng.normal(0, 0.3, v.shape) if k.endswith("mean") else rng.uniform(0.5, 2.0, v.shape))
           for k, v in p.buffers.items()}
    return replace(p, tensors=t, buffers=buf)


def check_cmp(rng, norm="recal", training=True, d=8, k=5, n=2, samples=24):
    cfg = CmpConfig(d=d, feat_channels=5, norm=norm)
    params = _random_params(rng, cfg, int(rng.integers(1 << 30)))
    codes = rng.normal(size=(n, cfg.channels, k, k))
    proj = rng.normal(size=(n, 17, k, k))

    def f():
        return float((cmp_forward(LocalContext(codes), params, training).values * proj).sum())

    cache = {}
    cmp_forward(LocalContext(codes), params, training, cache)
    grads, d_ctx = cmp_backward(cache, params, proj)
    label = f"cmp[{norm},{'train' if training else 'eval'}]"
    out = [check(label, name, f, params.tensors[name], grads[name], rng, samples)
           for name in sorted(params.tensors) if not name.startswith("proj")]
    out.append(check(label, "context", f, codes, d_ctx, rng, samples))
    return out


def check_encoder(rng, d=3, k=5, n=2, C=4, samples=24):
    params = init_params(int(rng.integers(1 << 30)), CmpConfig(d=d, feat_channels=C, norm="plain"))
    params.tensors["proj_b"][:] = rng.normal(size=d)
    sampled = rng.normal(size=(n, 17, k, k, C))
    proj = rng.normal(size=(n, 17 * d, k, k))

    def f():
        return float((project_context(sampled, params).codes * proj).sum())

    cache = {}
    project_context(sampled, params, cache)
    g = encode_backward(cache, proj)
    return [check("encoder", name, f, params.tensors[name], g[name], rng, samples)
            for name in ("proj_w", "proj_b")]


def check_adaptation(rng, method="direct", a=13, k=5, n=2, samples=24):
    h = rng.uniform(size=(n, 17, a, a))
    kam = rng.uniform(size=(n, 17, k, k))
    proj = rng.normal(size=h.shape)

    def f():
        return float((contextual_adaptation(h, kam, method).values * proj).sum())

    cache = {}
    contextual_adaptation(h, kam, method, cache)
    d_h, d_k = adaptation_backward(cache, proj)
    label = f"adaptation[{method}]"
    return [check(label, "hbar", f, h, d_h, rng, samples), check(label, "kams", f, kam, d_k, rng, samples)]


def check_losses(rng, samples=24):
    w = LossWeights()
    out = []
    h, wd = 6, 7
    pred = rng.uniform(size=(18, h, wd))
    gt = rng.uniform(size=pred.shape)
    mask = rng.uniform(size=(h, wd)) > 0.5
    out.append(check("heatmap_loss", "pred", lambda: heatmap_loss(pred, gt, mask, w)[0], pred,
                     heatmap_loss(pred, gt, mask, w)[1], rng, samples))

    off = rng.normal(0.0, 0.3, size=(34, h, wd))
    off_gt = rng.normal(0.0, 0.3, size=off.shape)
    centers = [(1, 2, 3.0), (5, 4, 0.7)]
    # keep residuals away from the smoothL1 kink at +-beta
    res = off - off_gt
    near = np.abs(np.abs(res) - w.beta) < 1e-3
    off[near] += 1e-2
    out.append(check("offset_loss", "pred", lambda: offset_loss(off, off_gt, centers, w)[0], off,
                     offset_loss(off, off_gt, centers, w)[1], rng, samples))

    x = rng.normal(0.0, 0.3, size=40)
    x[np.abs(np.abs(x) - w.beta) < 1e-3] += 1e-2
    out.append(check("smooth_l1", "x", lambda: float(smooth_l1(x, w.beta).sum()), x,
                     smooth_l1_grad(x, w.beta), rng, samples))

    r = rng.uniform(size=(2, 17, 5, 5))
    t = rng.uniform(size=r.shape)
    out.append(check("refined_heatmap_loss", "refined", lambda: refined_heatmap_loss(r, t)[0], r,
                     refined_heatmap_loss(r, t)[1], rng, samples))

    K = rng.uniform(size=(17, 5, 5))
    S = rng.uniform(0.5, 1.0, size=K.shape)
    sk = rng.uniform(size=17)
    out.append(check("oks_kernel_loss", "kams", lambda: oks_kernel_loss(K, S, 0.8, sk)[0], K,
                     oks_kernel_loss(K, S, 0.8, sk)[1], rng, samples))

    keys = ("heatmap", "refined", "offset", "kernel")
    vec = rng.uniform(size=4)
    _, coef = total_loss(dict(zip(keys, vec)), w)
    out.append(check("total_loss", "parts", lambda: total_loss(dict(zip(keys, vec)), w)[0], vec,
                     np.array([coef[k] for k in keys]), rng, samples))
    return out


def check_objective(rng, samples=12):
    """End-to-end: the training objective w.r.t. every trainable tensor."""

    k, a, C, n = 5, 9, 4, 2
    cfg = TrainConfig(d=2, refine=RefineConfig(k=k, a=a, method="direct"))
    params = _random_params(rng, CmpConfig(d=2, feat_channels=C), int(rng.integers(1 << 30)))
    batch = SceneBatch(0, rng.normal(size=(n, 17, k, k, C)), rng.uniform(size=(n, 17, a, a)),
                       rng.uniform(size=(n, 17, a, a)), rng.uniform(0.5, 1.0, size=(n, 17, k, k)),
                       rng.uniform(size=n), rng.uniform(size=(n, 17)), {"heatmap": 0.3, "offset": 2.0})

    def f():
        return batch_loss(batch, params, cfg, grads=False)["total"]

    g = batch_loss(batch, params, cfg)["grads"]
    return [check("objective", name, f, params.tensors[name], g[name], rng, samples)
            for name in sorted(params.tensors)]


def run_all(seed: int = 0):
    """Run every suite; returns ``(results, seconds)``."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    results = []
    for norm in ("recal", "plain"):
        for training in (True, False):
            results += check_cmp(rng, norm, training)
    results += check_encoder(rng)
    for method in ("direct", "fft"):
        results += check_adaptation(rng, method)
    results += check_losses(rng)
    results += check_objective(rng)
    return results, time.perf_counter() - start


def format_table(results) -> str:
    lines = [f"{'check':<26} {'tensor':<14} {'entries':>7} {'rel_error':>11}  status"]
    for r in results:
        lines.append(f"{r.name:<26} {r.tensor:<14} {r.entries:>7} {r.error:>11.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
