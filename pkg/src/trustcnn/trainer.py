"""SGD on the single unfrozen layer, transfer-head insertion, evaluation and grid search."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import LabeledExample, batches, stack
from .loss import Ablation, CeNorm, LossBreakdown, LossConfig, LossKind, loss_for
from .metrics import MetricsReport, metrics_report
from .nn.autodiff import Tape, Tensor, backward, clamp, log, mean, pick, scale
from .nn.layers import Layer, LayerKind, Model, conv, dense, init_layer_params, simple
from .saliency import Method, batch_maps

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, breakdown: LossBreakdown):
        self.step = step
        self.breakdown = breakdown
        super().__init__(f"non-finite loss at step {step}: {breakdown}")


@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind = LossKind.TRUSTWORTHY
    method: Method = Method.GUIDED_GRAD_CAM
    lam: float = 0.9
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 32
    ablation: Ablation = Ablation.FULL
    seed: int = 0
    ce_norm: CeNorm = CeNorm.CLASS_COUNT

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        object.__setattr__(self, "ce_norm", CeNorm(self.ce_norm))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.lam, self.method, self.ce_norm, self.ablation)


def sgd_step(model: Model, grads: dict[str, tuple[np.ndarray, np.ndarray]], lr: float) -> Model:
    """w <- w - lr * g for the layers named in `grads`; all must be unfrozen."""
    lr32 = np.float32(lr)
    for name, (gw, gb) in grads.items():
        layer = model.layer(name)
        if layer.spec.frozen:
            raise ValueError(f"gradient supplied for frozen layer {name!r}")
        layer.weight.data = (layer.weight.data - lr32 * gw).astype(np.float32)
        layer.bias.data = (layer.bias.data - lr32 * gb).astype(np.float32)
    return model


def append_transfer_head(model: Model, filters: int, kernel=(1, 1), stride: int = 1, seed: int = 0) -> Model:
    """New model: the original up to its last conv block, a fresh conv + relu, then gap/dense/softmax.

    Every original layer is frozen; only the new conv trains and it becomes
    the saliency layer. Original parameter arrays are shared, not copied.
    """
    convs = [i for i, l in enumerate(model.layers) if l.spec.kind is LayerKind.CONV2D]
    if not convs:
        raise ValueError("model has no convolutional layer")
    if model.layers[-1].spec.kind is not LayerKind.SOFTMAX:
        raise ValueError("model has no softmax layer")
    last = convs[-1]
    if last + 1 < len(model.layers) and model.layers[last + 1].spec.kind is LayerKind.RELU:
        last += 1
    kept = []
    for layer in model.layers[: last + 1]:
        spec = replace(layer.spec, frozen=True)
        new = Layer(spec, layer.weight, layer.bias)
        if layer.weight is not None:
            new.weight = Tensor(layer.weight.data, name=layer.weight.name)
            new.bias = Tensor(layer.bias.data, name=layer.bias.name)
        new.set_frozen(True)
        kept.append(new)
    in_ch = model.layers[convs[-1]].spec.out_channels
    rng = np.random.default_rng(seed)
    head_conv, _ = init_layer_params(
        conv("transfer", filters, kernel, stride=stride, padding=0), (in_ch, kernel[0], kernel[1]), rng
    )
    head_dense, _ = init_layer_params(dense("head_dense", model.class_count, frozen=True), (filters,), rng)
    layers = kept + [
        head_conv,
        Layer(simple(LayerKind.RELU, "transfer_relu")),
        Layer(simple(LayerKind.GLOBAL_AVG_POOL, "head_gap")),
        head_dense,
        Layer(simple(LayerKind.SOFTMAX, "head_softmax")),
    ]
    return Model(layers, "transfer", model.class_count, model.input_channels)


def clone(model: Model) -> Model:
    return copy.deepcopy(model)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    model: Model,
    dataset: Sequence[LabeledExample],
    config: TrainConfig,
    on_step: Optional[Callable[[int, LossBreakdown], None]] = None,
) -> tuple[Model, list[LossBreakdown]]:
    """Train the model's single unfrozen layer in place; returns it with the per-step log."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    layer = model.check_trainable()
    lcfg = config.loss_config
    history: list[LossBreakdown] = []
    step = 0
    for epoch in range(config.epochs):
        for batch in batches(dataset, config.batch_size, _epoch_seed(config.seed, epoch)):
            with Tape() as tape:
                bd = loss_for(batch, model, lcfg)
            if not np.isfinite(bd.loss.data).all() or not np.isfinite(bd.total):
                raise NonFiniteLossError(step, bd)
            gw, gb = backward(tape, bd.loss, [layer.weight, layer.bias], accumulate=False)
            sgd_step(model, {layer.name: (gw.data, gb.data)}, config.lr)
            bd.loss = None
            bd.saliency = None
            history.append(bd)
            if on_step is not None:
                on_step(step, bd)
            step += 1
    return model, history


def write_log(history: Sequence[LossBreakdown], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LossBreakdown.CSV_HEADER)
        for i, bd in enumerate(history):
            w.writerow([i] + [repr(float(v)) for v in bd.row(i)[1:]])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    report: MetricsReport
    preds: np.ndarray
    labels: np.ndarray
    maps: np.ndarray
    s_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))


def predict(model: Model, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(model.forward(Tensor(images[s:s + batch_size])).probs.data.argmax(axis=1))
    return np.concatenate(out)


def evaluate(
    model: Model,
    dataset: Sequence[LabeledExample],
    method=Method.GUIDED_GRAD_CAM,
    tau: float = 0.5,
    baseline: Optional["Evaluation"] = None,
    batch_size: int = 128,
) -> Evaluation:
    """Metrics with predicted-class maps; `baseline` supplies maps for the SSIM column."""
    b = stack(dataset)
    preds = predict(model, b.images, batch_size)
    maps = np.concatenate([
        batch_maps(model, b.images[s:s + batch_size], preds[s:s + batch_size], method)
        for s in range(0, len(preds), batch_size)
    ])
    report = metrics_report(
        preds.tolist(), b.labels.tolist(), maps, b.masks, tau,
        baseline_maps=None if baseline is None else baseline.maps, num_classes=model.class_count,
    )
    return Evaluation(report, preds, b.labels, maps, maps.mean(axis=(1, 2)))


@dataclass
class GridRow:
    lr: float
    lam: float
    config: TrainConfig
    report: MetricsReport


def grid_search(
    train_set: Sequence[LabeledExample],
    test_set: Sequence[LabeledExample],
    base_config: TrainConfig,
    lrs: Sequence[float],
    lambdas: Sequence[float],
    model_factory: Callable[[int], Model],
    tau: float = 0.5,
) -> list[GridRow]:
    """One freshly initialized model per (lr, lambda); rows ranked by test accuracy.

    A cross-entropy baseline with the same initialization seed provides the
    maps for the SSIM column.
    """
    if not lrs or not lambdas:
        raise ValueError("grids must be nonempty")
    base_cfg = replace(base_config, loss=LossKind.CE)
    baseline, _ = train(model_factory(base_config.seed), train_set, base_cfg)
    base_eval = evaluate(baseline, test_set, base_config.method, tau)
    rows = []
    for lr in lrs:
        for lam in lambdas:
            cfg = replace(base_config, lr=lr, lam=lam)
            model, _ = train(model_factory(cfg.seed), train_set, cfg)
            ev = evaluate(model, test_set, cfg.method, tau, baseline=base_eval)
            rows.append(GridRow(lr, lam, cfg, ev.report))
    # stable: ties keep (lr, lambda) grid order
    return sorted(rows, key=lambda r: -r.report.accuracy)


def pretrain(
    model: Model,
    dataset: Sequence[LabeledExample],
    epochs: int = 10,
    lr: float = 0.01,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[Model, list[float]]:
    """Cross-entropy training of every parametrized layer with Adam.

    This builds the backbone that transfer heads are later attached to; the
    saliency-aware objective itself never trains more than one layer.
    Returns the model and the per-step unnormalized cross entropy.
    """
    params = [p for l in model.param_layers for p in l.params]
    for p in params:
        p.requires_grad = True
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = [np.zeros_like(p.data) for p in params]
    v = [np.zeros_like(p.data) for p in params]
    losses = []
    t = 0
    for epoch in range(epochs):
        for batch in batches(dataset, batch_size, _epoch_seed(seed, epoch)):
            t += 1
            with Tape() as tape:
                fwd = model.forward(Tensor(batch.images))
                ce = mean(scale(log(clamp(pick(fwd.probs, batch.labels), lo=1e-12)), -1.0))
            grads = backward(tape, ce, params, accumulate=False)
            for i, (p, g) in enumerate(zip(params, grads)):
                m[i] = b1 * m[i] + (1 - b1) * g.data
                v[i] = b2 * v[i] + (1 - b2) * g.data ** 2
                mhat = m[i] / (1 - b1 ** t)
                vhat = v[i] / (1 - b2 ** t)
                p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
            losses.append(float(ce.data))
    for l in model.param_layers:
        l.set_frozen(l.spec.frozen)
    return model, losses
