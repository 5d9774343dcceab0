"""Desk-scale differentiable per-pixel segmenter with two encoders and gated fusion.

Each pixel is classified from the flattened k x k neighborhood of its raster
(replicate-padded). Two single-layer tanh encoders (image / events) feed a
two-token gated attention that forms a per-pixel convex combination of the
two feature vectors; one shared linear decoder produces logits for the image,
auxiliary, and fused heads. All gradients are analytic and exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np

from .core import (
    IGNORE,
    AllIgnored,
    DimensionMismatch,
    GrayImage,
    InvalidParams,
    LabelMask,
    NonFiniteInput,
    ProbMap,
    SignedMap,
)

Raster = Union[GrayImage, SignedMap, np.ndarray]


@dataclass(frozen=True)
class ModelDims:
    """patch: neighborhood side k (odd); feat/attn: feature and attention widths; classes: C."""

    patch: int = 5
    feat: int = 16
    attn: int = 8
    classes: int = 18

    def __post_init__(self):
        if self.patch < 1 or self.patch % 2 == 0:
            raise InvalidParams(f"ModelDims: patch must be odd and >= 1, got {self.patch}")
        if min(self.feat, self.attn, self.classes) < 1:
            raise InvalidParams("ModelDims: feat, attn, and classes must be >= 1")

    @property
    def d_in(self) -> int:
        return self.patch * self.patch

    def vector_length(self) -> int:
        return (
            2 * (self.d_in * self.feat + self.feat)
            + 2 * self.feat * self.attn
            + self.feat * self.classes
            + self.classes
        )


# Flat layout: w_image, b_image, w_events, b_events, w_query, w_key, w_decoder, b_decoder.
def _block_shapes(dims: ModelDims):
    return (
        ("w_image", (dims.d_in, dims.feat)),
        ("b_image", (dims.feat,)),
        ("w_events", (dims.d_in, dims.feat)),
        ("b_events", (dims.feat,)),
        ("w_query", (dims.feat, dims.attn)),
        ("w_key", (dims.feat, dims.attn)),
        ("w_decoder", (dims.feat, dims.classes)),
        ("b_decoder", (dims.classes,)),
    )


def _unpack(dims: ModelDims, vector: np.ndarray) -> Dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, shape in _block_shapes(dims):
        size = int(np.prod(shape))
        out[name] = vector[offset:offset + size].reshape(shape)
        offset += size
    return out


def _pack(dims: ModelDims, blocks: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([blocks[name].ravel() for name, _ in _block_shapes(dims)])


@dataclass(frozen=True)
class ModelParams:
    """All weights as one flat float64 vector plus the dims needed to interpret it."""

    dims: ModelDims
    vector: np.ndarray
    seed: int = 0

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64)
        if vec.shape != (self.dims.vector_length(),):
            raise DimensionMismatch(
                f"ModelParams: expected vector of length {self.dims.vector_length()}, got {vec.shape}"
            )
        if not np.isfinite(vec).all():
            raise NonFiniteInput("ModelParams: parameters must be finite")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    def blocks(self) -> Dict[str, np.ndarray]:
        return _unpack(self.dims, self.vector)

    def with_vector(self, vector: np.ndarray) -> "ModelParams":
        return ModelParams(self.dims, vector, self.seed)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "ModelParams":
        return cls(dims, np.zeros(dims.vector_length()))


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Seeded uniform init in [-s, s] with s = 1/sqrt(fan_in) per block."""
    rng = np.random.default_rng(seed)
    fan_in = {
        "w_image": dims.d_in, "b_image": dims.d_in,
        "w_events": dims.d_in, "b_events": dims.d_in,
        "w_query": dims.feat, "w_key": dims.feat,
        "w_decoder": dims.feat, "b_decoder": dims.feat,
    }
    blocks = {}
    for name, shape in _block_shapes(dims):
        s = 1.0 / np.sqrt(fan_in[name])
        blocks[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(dims, _pack(dims, blocks), seed)


def sgd_step(params: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
    return params.with_vector(params.vector - lr * np.asarray(grad))


def _raster_data(raster: Raster) -> np.ndarray:
    if isinstance(raster, (GrayImage, SignedMap)):
        return raster.data
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D raster, got shape {arr.shape}")
    return arr


def patch_features(raster: Raster, patch: int) -> np.ndarray:
    """Flattened replicate-padded k x k neighborhood per pixel, shape (H*W, k*k)."""
    arr = _raster_data(raster)
    pad = patch // 2
    padded = np.pad(arr, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))
    return windows.reshape(arr.size, patch * patch)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _encode_flat(patches: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.tanh(patches @ w + b)


def encode(raster: Raster, which: str, params: ModelParams) -> np.ndarray:
    """Per-pixel features tanh(W patch + b) for the selected encoder, shape (H, W, feat)."""
    arr = _raster_data(raster)
    if not np.isfinite(arr).all():
        raise NonFiniteInput("encode: input raster contains non-finite values")
    blocks = params.blocks()
    if which == "image":
        w, b = blocks["w_image"], blocks["b_image"]
    elif which == "events":
        w, b = blocks["w_events"], blocks["b_events"]
    else:
        raise InvalidParams(f"encode: which must be 'image' or 'events', got {which!r}")
    feats = _encode_flat(patch_features(arr, params.dims.patch), w, b)
    return feats.reshape(arr.shape[0], arr.shape[1], params.dims.feat)


def _fuse_flat(f_img: np.ndarray, f_aux: np.ndarray, w_query: np.ndarray, w_key: np.ndarray):
    """Two-token gated attention; returns fused features plus the backprop cache."""
    scale = 1.0 / np.sqrt(w_query.shape[1])
    q = f_img @ w_query
    k_img = f_img @ w_key
    k_aux = f_aux @ w_key
    s_img = (q * k_img).sum(axis=1) * scale
    s_aux = (q * k_aux).sum(axis=1) * scale
    top = np.maximum(s_img, s_aux)
    e_img = np.exp(s_img - top)
    e_aux = np.exp(s_aux - top)
    denom = e_img + e_aux
    w_img = e_img / denom
    w_aux = e_aux / denom
    fused = w_img[:, None] * f_img + w_aux[:, None] * f_aux
    return fused, dict(q=q, k_img=k_img, k_aux=k_aux, w_img=w_img, w_aux=w_aux, scale=scale)


def fuse(f_img: np.ndarray, f_evt: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-pixel convex combination of the two feature maps, attention-weighted."""
    f_img = np.asarray(f_img, dtype=np.float64)
    f_evt = np.asarray(f_evt, dtype=np.float64)
    if f_img.shape != f_evt.shape:
        raise DimensionMismatch(f"fuse: feature shapes differ, {f_img.shape} vs {f_evt.shape}")
    shape = f_img.shape
    blocks = params.blocks()
    fused, _ = _fuse_flat(
        f_img.reshape(-1, shape[-1]), f_evt.reshape(-1, shape[-1]),
        blocks["w_query"], blocks["w_key"],
    )
    return fused.reshape(shape)


def decode(features: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-pixel logits V f + c, shape (..., classes)."""
    blocks = params.blocks()
    return np.asarray(features, dtype=np.float64) @ blocks["w_decoder"] + blocks["b_decoder"]


def _heads(image: Raster, aux: Raster, params: ModelParams):
    """Forward pass producing all three logit heads plus the cache for backprop."""
    img = _raster_data(image)
    aux_arr = _raster_data(aux)
    if img.shape != aux_arr.shape:
        raise DimensionMismatch(f"forward: image {img.shape} and aux {aux_arr.shape} shapes differ")
    blocks = params.blocks()
    p_img = patch_features(img, params.dims.patch)
    p_aux = patch_features(aux_arr, params.dims.patch)
    f_img = _encode_flat(p_img, blocks["w_image"], blocks["b_image"])
    f_aux = _encode_flat(p_aux, blocks["w_events"], blocks["b_events"])
    fused, att = _fuse_flat(f_img, f_aux, blocks["w_query"], blocks["w_key"])
    v, c = blocks["w_decoder"], blocks["b_decoder"]
    cache = dict(
        shape=img.shape, blocks=blocks, patches_img=p_img, patches_aux=p_aux,
        f_img=f_img, f_aux=f_aux, f_fused=fused, att=att,
        u_img=f_img @ v + c, u_aux=f_aux @ v + c, u_fused=fused @ v + c,
    )
    return cache


@dataclass(frozen=True)
class ForwardProbs:
    p_image: ProbMap
    p_aux: ProbMap
    p_fused: ProbMap


def forward(image: Raster, aux: Raster, params: ModelParams) -> ForwardProbs:
    """Softmax outputs of the image, auxiliary, and fused heads."""
    cache = _heads(image, aux, params)
    h, w = cache["shape"]
    c = params.dims.classes

    def prob(u):
        return ProbMap(w, h, c, softmax(u).reshape(h, w, c))

    return ForwardProbs(prob(cache["u_img"]), prob(cache["u_aux"]), prob(cache["u_fused"]))


def ce_loss(logits: np.ndarray, labels: LabelMask) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over non-IGNORE pixels and its gradient w.r.t. the logits.

    gradient = (softmax(logits) - onehot(y)) / count on supervised pixels, 0 elsewhere.
    """
    u = np.asarray(logits, dtype=np.float64)
    if u.ndim == 3:
        if u.shape[:2] != (labels.height, labels.width):
            raise DimensionMismatch(f"ce_loss: logits {u.shape} do not match labels "
                                    f"{labels.width}x{labels.height}")
        flat = u.reshape(-1, u.shape[2])
    elif u.ndim == 2:
        flat = u
    else:
        raise DimensionMismatch(f"ce_loss: logits must be (H, W, C) or (N, C), got {u.shape}")
    if flat.shape[1] != labels.num_classes:
        raise DimensionMismatch(f"ce_loss: {flat.shape[1]} logit classes vs {labels.num_classes} label classes")
    y = labels.labels.ravel()
    if flat.shape[0] != y.size:
        raise DimensionMismatch("ce_loss: pixel counts differ")

    valid = y != IGNORE
    count = int(valid.sum())
    if count == 0:
        raise AllIgnored("ce_loss: no supervised pixels")

    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    loss = -logp[valid, y[valid]].sum() / count

    grad = np.zeros_like(flat)
    grad[valid] = np.exp(logp[valid])
    grad[valid, y[valid]] -= 1.0
    grad[valid] /= count
    return float(loss), grad.reshape(u.shape)


def _head_grad(u: np.ndarray, y: np.ndarray, valid: np.ndarray, count: int, lam: float):
    """Loss and d(loss)/d(logits) for one head, already scaled by its lambda weight."""
    shifted = u - u.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logz[:, None]
    loss = -logp[valid, y[valid]].sum() / count
    grad = np.zeros_like(u)
    grad[valid] = np.exp(logp[valid])
    grad[valid, y[valid]] -= 1.0
    grad[valid] *= lam / count
    return float(loss), grad


def weighted_loss(
    image: Raster,
    aux: Raster,
    labels: LabelMask,
    params: ModelParams,
    lam_image: float,
    lam_aux: float,
    lam_fused: float,
) -> Tuple[float, np.ndarray, Dict[str, float]]:
    """Lambda-weighted cross-entropy over the three heads and its full parameter gradient.

    Returns (loss, flat gradient aligned with ModelParams.vector, per-head losses).
    """
    if min(lam_image, lam_aux, lam_fused) < 0:
        raise InvalidParams("weighted_loss: lambda weights must be >= 0")
    cache = _heads(image, aux, params)
    h, w = cache["shape"]
    if (labels.width, labels.height) != (w, h):
        raise DimensionMismatch("weighted_loss: labels do not match raster dimensions")
    y = labels.labels.ravel()
    valid = y != IGNORE
    count = int(valid.sum())
    if count == 0:
        raise AllIgnored("weighted_loss: no supervised pixels")

    loss_img, g_img = _head_grad(cache["u_img"], y, valid, count, lam_image)
    loss_aux, g_aux = _head_grad(cache["u_aux"], y, valid, count, lam_aux)
    loss_fused, g_fused = _head_grad(cache["u_fused"], y, valid, count, lam_fused)
    total = lam_image * loss_img + lam_aux * loss_aux + lam_fused * loss_fused

    blocks = cache["blocks"]
    f_img, f_aux, f_fused = cache["f_img"], cache["f_aux"], cache["f_fused"]
    att = cache["att"]
    v = blocks["w_decoder"]

    d_v = f_img.T @ g_img + f_aux.T @ g_aux + f_fused.T @ g_fused
    d_c = g_img.sum(axis=0) + g_aux.sum(axis=0) + g_fused.sum(axis=0)

    d_fused = g_fused @ v.T
    a_img = (d_fused * f_img).sum(axis=1)
    a_aux = (d_fused * f_aux).sum(axis=1)
    w_img, w_aux = att["w_img"], att["w_aux"]
    mix = w_img * a_img + w_aux * a_aux
    ds_img = w_img * (a_img - mix)
    ds_aux = w_aux * (a_aux - mix)

    scale = att["scale"]
    q, k_img, k_aux = att["q"], att["k_img"], att["k_aux"]
    d_q = (ds_img[:, None] * k_img + ds_aux[:, None] * k_aux) * scale
    d_k_img = ds_img[:, None] * q * scale
    d_k_aux = ds_aux[:, None] * q * scale
    d_wq = f_img.T @ d_q
    d_wk = f_img.T @ d_k_img + f_aux.T @ d_k_aux

    d_f_img = g_img @ v.T + w_img[:, None] * d_fused + d_q @ blocks["w_query"].T + d_k_img @ blocks["w_key"].T
    d_f_aux = g_aux @ v.T + w_aux[:, None] * d_fused + d_k_aux @ blocks["w_key"].T

    d_z_img = d_f_img * (1.0 - f_img * f_img)
    d_z_aux = d_f_aux * (1.0 - f_aux * f_aux)
    grads = {
        "w_image": cache["patches_img"].T @ d_z_img,
        "b_image": d_z_img.sum(axis=0),
        "w_events": cache["patches_aux"].T @ d_z_aux,
        "b_events": d_z_aux.sum(axis=0),
        "w_query": d_wq,
        "w_key": d_wk,
        "w_decoder": d_v,
        "b_decoder": d_c,
    }
    head_losses = {"image": loss_img, "aux": loss_aux, "fused": loss_fused}
    return float(total), _pack(params.dims, grads), head_losses
