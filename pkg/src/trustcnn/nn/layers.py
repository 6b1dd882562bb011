"""Layer kernels, layer descriptions and the sequential model container."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, make_output, relu


class ShapeError(ValueError):
    pass


class LayerKind(enum.Enum):
    CONV2D = "conv2d"
    RELU = "relu"
    MAXPOOL2 = "maxpool2"
    GLOBAL_AVG_POOL = "gap"
    DENSE = "dense"
    SOFTMAX = "softmax"


@dataclass
class LayerSpec:
    kind: LayerKind
    name: str
    out_channels: int = 0
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    out_features: int = 0
    frozen: bool = False

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        if self.kind is LayerKind.CONV2D:
            if min(self.kernel) < 1 or self.stride < 1 or self.out_channels < 1 or self.padding < 0:
                raise ValueError(f"layer {self.name!r}: invalid conv geometry")
        if self.kind is LayerKind.DENSE and self.out_features < 1:
            raise ValueError(f"layer {self.name!r}: out_features must be >= 1")

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.DENSE)


def conv(name, out_channels, kernel=3, stride=1, padding=1, frozen=False) -> LayerSpec:
    k = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    return LayerSpec(LayerKind.CONV2D, name, out_channels=out_channels, kernel=k,
                     stride=stride, padding=padding, frozen=frozen)


def dense(name, out_features, frozen=False) -> LayerSpec:
    return LayerSpec(LayerKind.DENSE, name, out_features=out_features, frozen=frozen)


def simple(kind: LayerKind, name: str) -> LayerSpec:
    return LayerSpec(kind, name)


# ---------------------------------------------------------------------------
# kernels


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x (N,C,H,W), w (O,C,kh,kw), b (O,)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (N, Ho, Wo, C, kh, kw) -> rows of receptive fields
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T + b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gf.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = gf.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gf @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw, gb

    return make_output("conv2d", out, (x, w, b), vjp)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pool; odd trailing rows/cols are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = x.data[:, :, : ho * 2, : wo * 2].reshape(n, c, ho, 2, wo, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * 2, : wo * 2] = gb
        return (gx,)

    return make_output("maxpool2", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = x.data.dtype.type(1.0 / (h * w))
    return make_output(
        "gap",
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to((g * inv)[:, :, None, None], x.shape).astype(g.dtype),),
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N,F) @ w.T with w (O,F)."""
    return make_output(
        "dense",
        x.data @ w.data.T + b.data,
        (x, w, b),
        lambda g: (
            g @ w.data if x.requires_grad else None,
            g.T @ x.data if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        ),
    )


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = logits.data
    if z.size == 0 or z.shape[-1] == 0:
        raise ShapeError("softmax of empty logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_output("softmax", y, (logits,), vjp)


# ---------------------------------------------------------------------------
# model


@dataclass
class Layer:
    spec: LayerSpec
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def params(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def set_frozen(self, frozen: bool) -> None:
        self.spec.frozen = frozen
        for p in self.params:
            p.requires_grad = not frozen


def layer_forward(layer: Layer, x: Tensor) -> Tensor:
    """Apply one layer, checking the input shape against its description."""
    spec = layer.spec
    kind = spec.kind
    if kind is LayerKind.CONV2D:
        if x.ndim != 4 or x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(
                f"layer {spec.name!r}: expected (N, {layer.weight.shape[1]}, H, W) input, got {x.shape}"
            )
        kh, kw = spec.kernel
        if x.shape[2] + 2 * spec.padding < kh or x.shape[3] + 2 * spec.padding < kw:
            raise ShapeError(f"layer {spec.name!r}: spatial extent {x.shape[2:]} smaller than kernel {spec.kernel}")
        return conv2d(x, layer.weight, layer.bias, spec.stride, spec.padding)
    if kind is LayerKind.RELU:
        return relu(x)
    if kind is LayerKind.MAXPOOL2:
        if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"layer {spec.name!r}: maxpool2 needs (N, C, H>=2, W>=2), got {x.shape}")
        return maxpool2(x)
    if kind is LayerKind.GLOBAL_AVG_POOL:
        if x.ndim != 4:
            raise ShapeError(f"layer {spec.name!r}: expected 4-D input, got {x.shape}")
        return global_avg_pool(x)
    if kind is LayerKind.DENSE:
        if x.ndim != 2 or x.shape[1] != layer.weight.shape[1]:
            raise ShapeError(
                f"layer {spec.name!r}: expected (N, {layer.weight.shape[1]}) input, got {x.shape}"
            )
        return linear(x, layer.weight, layer.bias)
    if kind is LayerKind.SOFTMAX:
        return softmax(x)
    raise AssertionError(kind)


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    activations: Optional[Tensor] = None


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class Model:
    """Sequential stack ending in a softmax, with one named saliency conv layer.

    The saliency activations are the output of the saliency conv block: the
    conv itself, followed by its ReLU when a ReLU comes directly after it.
    """

    layers: list[Layer]
    saliency_layer: str
    class_count: int
    input_channels: int = 1
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        kinds = [l.spec.kind for l in self.layers]
        if kinds.count(LayerKind.SOFTMAX) != 1 or kinds[-1] is not LayerKind.SOFTMAX:
            raise ValueError("model needs exactly one softmax layer, placed last")
        self._index = {n: i for i, n in enumerate(names)}
        if self.saliency_layer not in self._index:
            raise ValueError(f"saliency layer {self.saliency_layer!r} not in model")
        if self.layer(self.saliency_layer).spec.kind is not LayerKind.CONV2D:
            raise ValueError(f"saliency layer {self.saliency_layer!r} is not a Conv2d layer")

    def layer(self, name: str) -> Layer:
        return self.layers[self._index[name]]

    def index(self, name: str) -> int:
        return self._index[name]

    @property
    def param_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.spec.has_params]

    @property
    def unfrozen(self) -> list[Layer]:
        return [l for l in self.param_layers if not l.spec.frozen]

    def check_trainable(self) -> Layer:
        """The single unfrozen layer; training any other count is unsupported."""
        free = self.unfrozen
        if len(free) != 1:
            raise ValueError(f"training needs exactly one unfrozen layer, found {[l.name for l in free]}")
        return free[0]

    @property
    def saliency_tap(self) -> int:
        i = self.index(self.saliency_layer)
        if i + 1 < len(self.layers) and self.layers[i + 1].spec.kind is LayerKind.RELU:
            return i + 1
        return i

    def forward(self, x: Tensor) -> ForwardResult:
        tap = self.saliency_tap
        acts = None
        h = x
        for i, layer in enumerate(self.layers[:-1]):
            h = layer_forward(layer, h)
            if i == tap:
                acts = h
        probs = layer_forward(self.layers[-1], h)
        return ForwardResult(logits=h, probs=probs, activations=acts)

    def forward_from_activations(self, acts: Tensor) -> Tensor:
        """Logits computed from saliency activations (the head of the network)."""
        h = acts
        for layer in self.layers[self.saliency_tap + 1:-1]:
            h = layer_forward(layer, h)
        return h

    def state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {l.name: (l.weight.data.copy(), l.bias.data.copy()) for l in self.param_layers}


def init_layer_params(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator) -> tuple[Layer, tuple]:
    """Create parameters for `spec` given the per-sample input shape; returns output shape too."""
    layer = Layer(spec)
    if spec.kind is LayerKind.CONV2D:
        c, h, w = in_shape
        kh, kw = spec.kernel
        o = spec.out_channels
        wt = glorot_uniform(rng, (o, c, kh, kw), c * kh * kw, o * kh * kw)
        layer.weight = Tensor(wt, name=f"{spec.name}.weight")
        layer.bias = Tensor(np.zeros(o, np.float32), name=f"{spec.name}.bias")
        ho = (h + 2 * spec.padding - kh) // spec.stride + 1
        wo = (w + 2 * spec.padding - kw) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"layer {spec.name!r}: input {in_shape} smaller than kernel {spec.kernel}")
        out = (o, ho, wo)
    elif spec.kind is LayerKind.DENSE:
        (f,) = in_shape
        wt = glorot_uniform(rng, (spec.out_features, f), f, spec.out_features)
        layer.weight = Tensor(wt, name=f"{spec.name}.weight")
        layer.bias = Tensor(np.zeros(spec.out_features, np.float32), name=f"{spec.name}.bias")
        out = (spec.out_features,)
    elif spec.kind is LayerKind.MAXPOOL2:
        c, h, w = in_shape
        out = (c, h // 2, w // 2)
    elif spec.kind is LayerKind.GLOBAL_AVG_POOL:
        out = (in_shape[0],)
    else:
        out = in_shape
    layer.set_frozen(spec.frozen)
    return layer, out


def build_model(
    specs: list[LayerSpec],
    input_shape: tuple[int, int, int],
    saliency_layer: str,
    seed: int = 0,
) -> Model:
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(input_shape)
    for spec in specs:
        layer, shape = init_layer_params(spec, shape, rng)
        layers.append(layer)
    class_count = next(l.spec.out_features for l in reversed(layers) if l.spec.kind is LayerKind.DENSE)
    return Model(layers, saliency_layer, class_count, input_channels=input_shape[0])


def default_specs(class_count: int) -> list[LayerSpec]:
    return [
        conv("conv1", 8, 3, padding=1),
        simple(LayerKind.RELU, "relu1"),
        simple(LayerKind.MAXPOOL2, "pool1"),
        conv("conv2", 16, 3, padding=1),
        simple(LayerKind.RELU, "relu2"),
        simple(LayerKind.MAXPOOL2, "pool2"),
        simple(LayerKind.GLOBAL_AVG_POOL, "gap"),
        dense("dense", class_count),
        simple(LayerKind.SOFTMAX, "softmax"),
    ]


def default_model(class_count: int, image_size: int = 32, channels: int = 1, seed: int = 0) -> Model:
    """conv(8) -> relu -> pool -> conv(16) -> relu -> pool -> gap -> dense -> softmax."""
    return build_model(default_specs(class_count), (channels, image_size, image_size), "conv2", seed)
