"""Local context encoding and the convolutional message-passing network.

Everything here is plain numpy with hand-written reverse-mode gradients.
Parameters live in a flat ``{name: array}`` dict so the optimizer and the
checkpoint writer can treat them uniformly.

Layer layout (``Ch = 17 * d`` channels throughout)::

    codes -> [conv3x3 -> norm -> relu] x 3 -> conv1x1 (17) -> logistic

Layers 1 and 3 use batch normalisation with a learned affine.  Layer 2
uses a recalibrating variant whose per-instance affine is a gated mixture
driven by the spatially pooled normalised activations; ``norm="plain"``
swaps it for ordinary batch norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import NUM_KEYPOINTS, KemGrid, bilinear_sample
from .errors import MissingCacheError, NumericalError, ShapeError
from .io import load_named_tensors, save_named_tensors

BN_EPS = 1e-5
NORM_VARIANTS = ("recal", "plain")


@dataclass(frozen=True)
class CmpConfig:
    d: int = 64
    feat_channels: int = 17
    norm: str = "recal"
    mixtures: int = 4
    positional: bool = True
    momentum: float = 0.1

    def __post_init__(self):
        if self.norm not in NORM_VARIANTS:
            raise ValueError(f"unknown norm variant {self.norm!r}")
        if self.positional and self.d < 2:
            raise ValueError("positional encoding needs d >= 2")

    @property
    def channels(self) -> int:
        return NUM_KEYPOINTS * self.d


@dataclass(frozen=True)
class CmpParams:
    config: CmpConfig
    tensors: dict
    buffers: dict = field(default_factory=dict)
    seed: int = 0

    def with_tensors(self, tensors):
        return replace(self, tensors=tensors)


@dataclass(frozen=True)
class LocalContext:
    codes: np.ndarray  # N x (17 d) x k x k

    def __post_init__(self):
        if self.codes.ndim != 4 or self.codes.shape[1] % NUM_KEYPOINTS:
            raise ShapeError(f"context codes must be N x (17 d) x k x k, got {self.codes.shape}")


@dataclass(frozen=True)
class KamSet:
    values: np.ndarray  # N x 17 x k x k, in (0, 1)


def init_params(seed: int, config: CmpConfig = CmpConfig()) -> CmpParams:
    """Fan-in scaled uniform init; the 1x1 head starts at zero."""
    rng = np.random.default_rng(seed)
    d, C, Ch, m = config.d, config.feat_channels, config.channels, config.mixtures

    def uniform(shape, fan_in):
        bound = np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    t = {"proj_w": uniform((d, C), C), "proj_b": np.zeros(d)}
    for layer in (1, 2, 3):
        t[f"conv{layer}_w"] = uniform((Ch, Ch, 3, 3), 9 * Ch)
    for layer in (1, 3):
        t[f"norm{layer}_gamma"] = np.ones(Ch)
        t[f"norm{layer}_beta"] = np.zeros(Ch)
    if config.norm == "recal":
        t["norm2_gate_w"] = uniform((Ch, m), Ch)
        t["norm2_gate_b"] = np.zeros(m)
        t["norm2_gamma"] = 1.0 + rng.uniform(-0.1, 0.1, size=(m, Ch))
        t["norm2_beta"] = rng.uniform(-0.1, 0.1, size=(m, Ch))
    else:
        t["norm2_gamma"] = np.ones(Ch)
        t["norm2_beta"] = np.zeros(Ch)
    t["head_w"] = np.zeros((NUM_KEYPOINTS, Ch))
    t["head_b"] = np.zeros(NUM_KEYPOINTS)
    buffers = {}
    for layer in (1, 2, 3):
        buffers[f"norm{layer}_mean"] = np.zeros(Ch)
        buffers[f"norm{layer}_var"] = np.ones(Ch)
    return CmpParams(config, t, buffers, seed)


# -- context encoding -----------------------------------------------------------

def encode_local_context(features, params: CmpParams, kems: KemGrid, cache: dict | None = None) -> LocalContext:
    """Sample features on the local KEMs, project to d dims, add the mesh code."""
    feats = np.asarray(features, dtype=np.float64)
    C = params.tensors["proj_w"].shape[1]
    if feats.shape[0] != C:
        raise ShapeError(f"features have {feats.shape[0]} channels, projection expects {C}")
    N, J, k = kems.coords.shape[:3]
    if N == 0:
        return LocalContext(np.zeros((0, J * params.config.d, k, k)))
    return project_context(bilinear_sample(feats, kems.coords), params, cache)


def project_context(sampled, params: CmpParams, cache: dict | None = None) -> LocalContext:
    """Context codes from pre-sampled features (N x 17 x k x k x C)."""
    w, b = params.tensors["proj_w"], params.tensors["proj_b"]
    N, J, k = sampled.shape[:3]
    d = w.shape[0]
    z = sampled @ w.T + b
    if params.config.positional:
        r = max(k // 2, 1)
        steps = (np.arange(k) - k // 2) / r
        z[..., 0] += steps[None, None, None, :]
        z[..., 1] += steps[None, None, :, None]
    if cache is not None:
        cache["sampled"] = sampled
    return LocalContext(np.ascontiguousarray(z.transpose(0, 1, 4, 2, 3).reshape(N, J * d, k, k)))


def encode_backward(cache: dict | None, d_codes) -> dict:
    if not cache or "sampled" not in cache:
        raise MissingCacheError("encode_backward needs the cache filled by encode_local_context")
    sampled = cache["sampled"]
    N, J, k, _, C = sampled.shape
    dz = d_codes.reshape(N, J, -1, k, k).transpose(0, 1, 3, 4, 2)
    flat_dz = dz.reshape(-1, dz.shape[-1])
    return {"proj_w": flat_dz.T @ sampled.reshape(-1, C), "proj_b": flat_dz.sum(axis=0)}


# -- forward / backward ---------------------------------------------------------

def _im2col(x):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(N * H * W, C * 9)


def _conv_forward(x, w):
    N, _, H, W = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(N, H, W, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, in_shape):
    N, C, H, W = in_shape
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    dw = (dmat.T @ cols).reshape(w.shape)
    dcols = (dmat @ w.reshape(w.shape[0], -1)).reshape(N, H, W, C, 3, 3)
    dxp = np.zeros((N, C, H + 2, W + 2))
    for a in range(3):
        for b in range(3):
            dxp[:, :, a:a + H, b:b + W] += dcols[..., a, b].transpose(0, 3, 1, 2)
    return dw, dxp[:, :, 1:-1, 1:-1]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check(arr, where):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite activations in {where}")


def cmp_forward(ctx: LocalContext, params: CmpParams, training: bool = False,
                cache: dict | None = None) -> KamSet:
    """Run the message-passing stack and return keypoint attraction maps.

    ``training`` selects batch statistics for normalisation (otherwise the
    running averages in ``params.buffers``).  Pass a dict as ``cache`` to
    keep the intermediates needed by :func:`cmp_backward`.
    """
    t, cfg = params.tensors, params.config
    x = np.asarray(ctx.codes, dtype=np.float64)
    N, Ch, H, W = x.shape
    if Ch != cfg.channels:
        raise ShapeError(f"context has {Ch} channels, parameters expect {cfg.channels}")
    if N == 0:
        return KamSet(np.zeros((0, NUM_KEYPOINTS, H, W)))
    layers = []
    for layer in (1, 2, 3):
        name = f"norm{layer}"
        z, cols = _conv_forward(x, t[f"conv{layer}_w"])
        if training:
            mean = z.mean(axis=(0, 2, 3))
            var = z.var(axis=(0, 2, 3))
        else:
            mean = params.buffers[f"{name}_mean"]
            var = params.buffers[f"{name}_var"]
        std = np.sqrt(var + BN_EPS)
        xhat = (z - mean[None, :, None, None]) / std[None, :, None, None]
        rec = {"cols": cols, "in_shape": x.shape, "xhat": xhat, "std": std,
               "mean": mean, "var": var, "count": N * H * W}
        if layer == 2 and cfg.norm == "recal":
            pooled = xhat.mean(axis=(2, 3))
            gate = _sigmoid(pooled @ t["norm2_gate_w"] + t["norm2_gate_b"])
            gam = gate @ t["norm2_gamma"]
            bet = gate @ t["norm2_beta"]
            y = gam[:, :, None, None] * xhat + bet[:, :, None, None]
            rec.update(pooled=pooled, gate=gate, gam=gam)
        else:
            y = t[f"{name}_gamma"][None, :, None, None] * xhat + t[f"{name}_beta"][None, :, None, None]
        x = np.maximum(y, 0.0)
        _check(x, f"layer {layer}")
        rec["act_mask"] = y > 0
        layers.append(rec)
    logits = np.einsum("oc,nchw->nohw", t["head_w"], x) + t["head_b"][None, :, None, None]
    kam = _sigmoid(logits)
    _check(kam, "output head")
    if cache is not None:
        cache.update(layers=layers, last=x, kam=kam, training=training)
    return KamSet(kam)


def cmp_backward(cache: dict | None, params: CmpParams, d_kam, exclude=()) -> tuple[dict, np.ndarray]:
    """Reverse pass.  Returns ``(param_grads, d_context_codes)``.

    Parameters named in ``exclude`` are left out of the gradient dict.
    """
    if not cache or "kam" not in cache:
        raise MissingCacheError("cmp_backward requires the cache filled by cmp_forward")
    t, cfg = params.tensors, params.config
    kam = cache["kam"]
    d_kam = np.asarray(d_kam, dtype=np.float64)
    if d_kam.shape != kam.shape:
        raise ShapeError(f"upstream gradient shape {d_kam.shape} != KAM shape {kam.shape}")
    g = {}
    dlog = d_kam * kam * (1.0 - kam)
    g["head_w"] = np.einsum("nohw,nchw->oc", dlog, cache["last"])
    g["head_b"] = dlog.sum(axis=(0, 2, 3))
    dx = np.einsum("oc,nohw->nchw", t["head_w"], dlog)
    training = cache["training"]
    for layer in (3, 2, 1):
        rec = cache["layers"][layer - 1]
        name = f"norm{layer}"
        dy = dx * rec["act_mask"]
        xhat = rec["xhat"]
        if layer == 2 and cfg.norm == "recal":
            gate, pooled = rec["gate"], rec["pooled"]
            dgam = (dy * xhat).sum(axis=(2, 3))
            dbet = dy.sum(axis=(2, 3))
            g["norm2_gamma"] = gate.T @ dgam
            g["norm2_beta"] = gate.T @ dbet
            dgate = dgam @ t["norm2_gamma"].T + dbet @ t["norm2_beta"].T
            dpre = dgate * gate * (1.0 - gate)
            g["norm2_gate_w"] = pooled.T @ dpre
            g["norm2_gate_b"] = dpre.sum(axis=0)
            dpooled = dpre @ t["norm2_gate_w"].T
            hw = xhat.shape[2] * xhat.shape[3]
            dxhat = dy * rec["gam"][:, :, None, None] + dpooled[:, :, None, None] / hw
        else:
            g[f"{name}_gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
            g[f"{name}_beta"] = dy.sum(axis=(0, 2, 3))
            dxhat = dy * t[f"{name}_gamma"][None, :, None, None]
        std = rec["std"][None, :, None, None]
        if training:
            m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dz = (dxhat - m1 - xhat * m2) / std
        else:
            dz = dxhat / std
        g[f"conv{layer}_w"], dx = _conv_backward(dz, rec["cols"], t[f"conv{layer}_w"], rec["in_shape"])
    for name in exclude:
        g.pop(name, None)
    return g, dx


def update_running_stats(params: CmpParams, cache: dict) -> CmpParams:
    """Fold the batch statistics of a training forward into the buffers."""
    mom = params.config.momentum
    buf = dict(params.buffers)
    for layer, rec in zip((1, 2, 3), cache["layers"]):
        n = rec["count"]
        unbiased = rec["var"] * n / (n - 1) if n > 1 else rec["var"]
        buf[f"norm{layer}_mean"] = (1 - mom) * buf[f"norm{layer}_mean"] + mom * rec["mean"]
        buf[f"norm{layer}_var"] = (1 - mom) * buf[f"norm{layer}_var"] + mom * unbiased
    return replace(params, buffers=buf)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(params: CmpParams, directory, extra: dict | None = None):
    cfg = params.config
    manifest = {
        "d": cfg.d, "feat_channels": cfg.feat_channels, "norm": cfg.norm,
        "mixtures": cfg.mixtures, "positional": cfg.positional,
        "momentum": cfg.momentum, "seed": params.seed, "window": 11,
    }
    if extra:
        manifest.update(extra)
    tensors = dict(params.tensors)
    tensors.update({f"buffer.{k}": v for k, v in params.buffers.items()})
    save_named_tensors(tensors, directory, manifest)


def load_checkpoint(directory) -> tuple[CmpParams, dict]:
    tensors, manifest = load_named_tensors(directory)
    cfg = CmpConfig(d=manifest["d"], feat_channels=manifest["feat_channels"], norm=manifest["norm"],
                    mixtures=manifest["mixtures"], positional=manifest["positional"],
                    momentum=manifest["momentum"])
    params = {k: v for k, v in tensors.items() if not k.startswith("buffer.")}
    buffers = {k[len("buffer."):]: v for k, v in tensors.items() if k.startswith("buffer.")}
    return CmpParams(cfg, params, buffers, manifest.get("seed", 0)), manifest
