"""
Grad-CAM, Guided Backpropagation and Guided Grad-CAM.

Two layers of API live here. The batch functions (`saliency_pass`,
`guided_backprop`) work on (N, ...) tensors and, when called under an active
tape, keep the Grad-CAM map differentiable with respect to the saliency
layer's activations. Grad-CAM weights and guided-backprop maps are gradients
themselves and are always returned as detached constants.

The per-sample functions return `SaliencyMap` objects with an explicit
raw/normalized state, for evaluation and export.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn.autodiff import Tape, Tensor, backward, make_output, mean, mul, pick, relu, tsum
from .nn.layers import ForwardResult, Model, ShapeError
from .pgm import write_pgm


class MapState(enum.Enum):
    RAW = "raw"
    NORMALIZED = "normalized"


class Method(enum.Enum):
    GRAD_CAM = "gradcam"
    GUIDED_BACKPROP = "guided-backprop"
    GUIDED_GRAD_CAM = "guided-gradcam"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown saliency method {value!r}; valid methods: {valid}") from None


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray
    class_index: int
    layer: str
    state: MapState
    method: Method

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# differentiable batch ops


def channel_weighted_sum(acts: Tensor, weights: np.ndarray) -> Tensor:
    """sum_k w[n, k] * acts[n, k] for acts (N, K, H, W); weights are constants."""
    w = np.asarray(weights, dtype=acts.data.dtype)
    if w.shape != acts.shape[:2]:
        raise ShapeError(f"weights shape {w.shape} does not match activations {acts.shape[:2]}")
    out = np.einsum("nk,nkhw->nhw", w, acts.data)
    return make_output(
        "channel_weighted_sum",
        out,
        (acts,),
        lambda g: (w[:, :, None, None] * g[:, None, :, :],),
    )


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_nearest(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of (N, h, w) to (N, H, W)."""
    n, h, w = x.shape
    H, W = size
    ri, ci = _nearest_index(h, H), _nearest_index(w, W)
    out = x.data[:, ri][:, :, ci]

    def vjp(g):
        gx = np.zeros_like(x.data)
        tmp = np.zeros((n, h, W), dtype=g.dtype)
        np.add.at(tmp, (slice(None), ri), g)
        np.add.at(gx, (slice(None), slice(None), ci), tmp)
        return (gx,)

    return make_output("upsample_nearest", np.ascontiguousarray(out), (x,), vjp)


def minmax_normalize(x: Tensor) -> Tensor:
    """Per-sample min-max scaling of (N, H, W) maps to [0, 1]; constant maps become zeros."""
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    lo_i = flat.argmin(axis=1)
    hi_i = flat.argmax(axis=1)
    rows = np.arange(n)
    lo = flat[rows, lo_i][:, None]
    hi = flat[rows, hi_i][:, None]
    rng = hi - lo
    flat_ok = rng[:, 0] > 0
    safe = np.where(rng > 0, rng, 1).astype(flat.dtype)
    y = np.where(rng > 0, (flat - lo) / safe, 0).astype(flat.dtype)

    def vjp(g):
        gf = g.reshape(n, -1)
        gx = np.where(rng > 0, gf / safe, 0).astype(gf.dtype)
        # d y_j / d lo = (x_j - hi) / r^2 ; d y_j / d hi = -(x_j - lo) / r^2
        g_lo = np.where(flat_ok, ((flat - hi) * gf).sum(axis=1) / safe[:, 0] ** 2, 0)
        g_hi = np.where(flat_ok, (-(flat - lo) * gf).sum(axis=1) / safe[:, 0] ** 2, 0)
        gx[rows, lo_i] += g_lo.astype(gf.dtype)
        gx[rows, hi_i] += g_hi.astype(gf.dtype)
        return (gx.reshape(x.shape),)

    return make_output("minmax_normalize", y.reshape(x.shape), (x,), vjp)


# ---------------------------------------------------------------------------
# batch saliency


def grad_cam_alpha(model: Model, acts: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Spatially averaged d logit[class] / d activations, shape (N, K)."""
    a = Tensor(np.array(acts), requires_grad=True)
    with Tape() as tape:
        logits = model.forward_from_activations(a)
        seed = tsum(pick(logits, classes))
    (g,) = backward(tape, seed, [a], accumulate=False)
    return g.data.mean(axis=(2, 3))


def guided_backprop(model: Model, images: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Guided-backprop input gradients reduced to (N, H, W) by max |g| over channels."""
    x = Tensor(np.array(images), requires_grad=True)
    with Tape() as tape:
        fwd = model.forward(x)
        seed = tsum(pick(fwd.logits, classes))
    (g,) = backward(tape, seed, [x], relu_rule="guided", accumulate=False)
    return np.abs(np.abs(g.data).max(axis=1))


@dataclass
class SaliencyPass:
    forward: ForwardResult
    alpha: np.ndarray
    guided: Optional[np.ndarray]
    raw: Tensor
    normalized: Tensor
    s_hat: Tensor


def saliency_pass(
    model: Model,
    images: Tensor,
    classes: Sequence[int],
    method: Method,
    alpha: Optional[np.ndarray] = None,
    guided: Optional[np.ndarray] = None,
) -> SaliencyPass:
    """Forward pass plus saliency maps for `classes`, recorded on the active tape.

    Passing `alpha` / `guided` pins those gradient-derived constants, which
    is how finite-difference oracles reproduce the stop-gradient convention.
    """
    method = Method.parse(method)
    if method is Method.GUIDED_BACKPROP:
        raise ValueError("guided backprop alone is not class discriminative; use gradcam or guided-gradcam")
    classes = np.asarray(classes, dtype=np.int64)
    if np.any(classes < 0) or np.any(classes >= model.class_count):
        raise ValueError(f"class index out of range [0, {model.class_count})")
    fwd = model.forward(images)
    acts = fwd.activations
    if alpha is None:
        alpha = grad_cam_alpha(model, acts.data, classes)
    cam = relu(channel_weighted_sum(acts, alpha))
    if method is Method.GUIDED_GRAD_CAM:
        if guided is None:
            guided = guided_backprop(model, images.data, classes)
        cam = mul(upsample_nearest(cam, guided.shape[1:]), Tensor(guided.astype(cam.data.dtype)))
    norm = minmax_normalize(cam)
    return SaliencyPass(fwd, alpha, guided, cam, norm, mean(norm, axis=(1, 2)))


# ---------------------------------------------------------------------------
# per-sample maps


def _image_of(example) -> np.ndarray:
    img = getattr(example, "image", example)
    return np.asarray(img, dtype=np.float32)


def grad_cam_weights(activations, grads) -> np.ndarray:
    """Global-average-pooled gradients: one weight per activation map (K,)."""
    a = np.asarray(getattr(activations, "data", activations))
    g = np.asarray(getattr(grads, "data", grads))
    if a.shape != g.shape:
        raise ShapeError(f"activations {a.shape} and gradients {g.shape} differ")
    if g.ndim != 3 or g.shape[1] < 1 or g.shape[2] < 1:
        raise ShapeError(f"expected K x H x W gradients, got {g.shape}")
    return g.mean(axis=(1, 2))


def grad_cam_map(activations, weights, class_index: int = 0, layer: str = "") -> SaliencyMap:
    a = np.asarray(getattr(activations, "data", activations))
    w = np.asarray(weights)
    if a.ndim != 3 or w.shape != (a.shape[0],):
        raise ShapeError(f"need {a.shape[0] if a.ndim == 3 else '?'} weights for activations {a.shape}")
    values = relu(channel_weighted_sum(Tensor(a[None]), w[None])).data[0]
    return SaliencyMap(values, class_index, layer, MapState.RAW, Method.GRAD_CAM)


def grad_cam(model: Model, example, class_index: int) -> SaliencyMap:
    _check_class(model, class_index)
    x = Tensor(_image_of(example)[None])
    fwd = model.forward(x)
    alpha = grad_cam_alpha(model, fwd.activations.data, [class_index])
    return grad_cam_map(fwd.activations.data[0], alpha[0], class_index, model.saliency_layer)


def guided_backprop_map(model: Model, example, class_index: int) -> SaliencyMap:
    _check_class(model, class_index)
    values = guided_backprop(model, _image_of(example)[None], [class_index])[0]
    return SaliencyMap(values, class_index, "input", MapState.RAW, Method.GUIDED_BACKPROP)


def upsample_map(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return upsample_nearest(Tensor(np.asarray(values)[None]), size).data[0]


def guided_grad_cam_map(gradcam: SaliencyMap, guided: SaliencyMap) -> SaliencyMap:
    if gradcam.state is not MapState.RAW or guided.state is not MapState.RAW:
        raise ValueError("guided grad-cam combines raw maps")
    up = upsample_map(gradcam.values, guided.shape)
    if up.shape != guided.shape:
        raise ShapeError(f"upsampled grad-cam {up.shape} does not match guided map {guided.shape}")
    return SaliencyMap(up * guided.values, gradcam.class_index, gradcam.layer, MapState.RAW, Method.GUIDED_GRAD_CAM)


def normalize_map(smap: SaliencyMap) -> SaliencyMap:
    values = minmax_normalize(Tensor(smap.values[None])).data[0]
    return replace(smap, values=values, state=MapState.NORMALIZED)


def compute_map(model: Model, example, class_index: int, method) -> SaliencyMap:
    """Raw map of any supported method for one example."""
    method = Method.parse(method)
    if method is Method.GRAD_CAM:
        return grad_cam(model, example, class_index)
    if method is Method.GUIDED_BACKPROP:
        return guided_backprop_map(model, example, class_index)
    return guided_grad_cam_map(grad_cam(model, example, class_index), guided_backprop_map(model, example, class_index))


def batch_maps(model: Model, images: np.ndarray, classes: Sequence[int], method, input_size: bool = True) -> np.ndarray:
    """Normalized (N, H, W) maps for a batch; Grad-CAM maps are upsampled to the input grid."""
    method = Method.parse(method)
    if method is Method.GUIDED_BACKPROP:
        raw = guided_backprop(model, images, classes)
        return minmax_normalize(Tensor(raw)).data
    sp = saliency_pass(model, Tensor(np.asarray(images, dtype=np.float32)), classes, method)
    norm = sp.normalized
    if input_size and norm.shape[1:] != images.shape[2:]:
        norm = upsample_nearest(norm, images.shape[2:])
    return norm.data


def _check_class(model: Model, class_index: int) -> None:
    if not 0 <= class_index < model.class_count:
        raise ValueError(f"class index {class_index} out of range [0, {model.class_count})")


def map_filename(sample_id, method, class_index: int) -> str:
    return f"{sample_id}_{Method.parse(method).value}_{class_index}.pgm"


def export_pgm(smap: SaliencyMap, out_dir, sample_id) -> Path:
    if smap.state is not MapState.NORMALIZED:
        smap = normalize_map(smap)
    path = Path(out_dir) / map_filename(sample_id, smap.method, smap.class_index)
    write_pgm(path, smap.values)
    return path
