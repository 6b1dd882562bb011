"""
Saliency-aware training objective.

Per sample, with ce* the normalized cross entropy and s the confidence of
the normalized predicted saliency map:

    loss = lam * ce* + (1 - lam) * s + ce* * (1 - s) + s * (1 - ce*)

averaged once over the batch. The mask-supervised variant replaces s with
the normalized pixel-wise cross entropy between the map and the object mask.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Batch
from .nn.autodiff import Tensor, add, clamp, log, mean, mul, pick, scale, sub, tsum
from .nn.layers import Model
from .saliency import MapState, Method, SaliencyMap, saliency_pass, upsample_nearest

PROB_FLOOR = 1e-12
PWCE_SCALE = math.log(1e12)


class CeNorm(enum.Enum):
    CLASS_COUNT = "classcount"
    LOG_CLASS_COUNT = "logclasscount"


class Ablation(enum.Enum):
    FULL = "full"
    R1_ZERO = "r1zero"
    R2_ZERO = "r2zero"
    # both interaction terms off; with lam = 1 this is plain cross entropy
    BOTH_ZERO = "bothzero"

    @property
    def use_r1(self) -> bool:
        return self in (Ablation.FULL, Ablation.R2_ZERO)

    @property
    def use_r2(self) -> bool:
        return self in (Ablation.FULL, Ablation.R1_ZERO)


class LossKind(enum.Enum):
    CE = "ce"
    TRUSTWORTHY = "trustworthy"
    TRUSTWORTHY_PWCE = "trustworthy-pwce"


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind = LossKind.TRUSTWORTHY
    lam: float = 0.9
    method: Method = Method.GUIDED_GRAD_CAM
    ce_norm: CeNorm = CeNorm.CLASS_COUNT
    ablation: Ablation = Ablation.FULL

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "ce_norm", CeNorm(self.ce_norm))
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def ablation_mode(config: LossConfig, mode) -> LossConfig:
    return replace(config, ablation=Ablation(mode))


@dataclass
class LossBreakdown:
    ce: float
    s_hat: float
    r1: float
    r2: float
    total: float
    lam: float
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)
    saliency: Optional[object] = field(default=None, repr=False, compare=False)

    def row(self, step: int) -> list:
        return [step, self.ce, self.s_hat, self.r1, self.r2, self.total, self.lam]

    CSV_HEADER = ("step", "ce", "s_hat", "r1", "r2", "total", "lambda")


# ---------------------------------------------------------------------------
# scalar definitions


def per_sample_ce(probs, true_class: int) -> float:
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64).reshape(-1)
    if not 0 <= true_class < p.size:
        raise ValueError(f"class {true_class} out of range [0, {p.size})")
    return float(-np.log(max(p[true_class], PROB_FLOOR)))


def _ce_divisor(class_count: int, mode: CeNorm) -> float:
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    return float(class_count) if CeNorm(mode) is CeNorm.CLASS_COUNT else math.log(class_count)


def normalize_ce(ce: float, class_count: int, mode: CeNorm = CeNorm.CLASS_COUNT) -> float:
    return min(ce / _ce_divisor(class_count, mode), 1.0)


def saliency_confidence(smap: SaliencyMap) -> float:
    if smap.state is not MapState.NORMALIZED:
        raise ValueError("saliency confidence needs a normalized map")
    return float(np.mean(smap.values))


def _unit(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name}={v} outside [0, 1]; inputs must be normalized")


def r1(ce_star: float, s_hat: float) -> float:
    """Penalty for a wrong label paired with a weak map."""
    _unit("ce_star", ce_star)
    _unit("s_hat", s_hat)
    return ce_star * (1.0 - s_hat)


def r2(ce_star: float, s_hat: float) -> float:
    """Penalty for a confident map paired with a right label."""
    _unit("ce_star", ce_star)
    _unit("s_hat", s_hat)
    return s_hat * (1.0 - ce_star)


def per_sample_total(ce_star: float, s: float, lam: float, ablation=Ablation.FULL) -> float:
    ablation = Ablation(ablation)
    total = lam * ce_star + (1.0 - lam) * s
    if ablation.use_r1:
        total += r1(ce_star, s)
    if ablation.use_r2:
        total += r2(ce_star, s)
    return total


def pwce(truth_mask, smap) -> float:
    """Normalized pixel-wise cross entropy between a binary mask and a [0, 1] map."""
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    if isinstance(smap, SaliencyMap) and smap.state is not MapState.NORMALIZED:
        raise ValueError("pwce needs a normalized map")
    m = np.asarray(truth_mask, dtype=np.float64)
    p = np.asarray(values, dtype=np.float64)
    if m.shape != p.shape:
        raise ValueError(f"mask {m.shape} and map {p.shape} differ")
    raw = -(m * np.log(np.maximum(p, PROB_FLOOR)) + (1 - m) * np.log(np.maximum(1 - p, PROB_FLOOR)))
    return float(min(raw.mean() / PWCE_SCALE, 1.0))


# ---------------------------------------------------------------------------
# tape versions


def ce_star_batch(probs: Tensor, labels, class_count: int, mode: CeNorm) -> Tensor:
    ce = scale(log(clamp(pick(probs, labels), lo=PROB_FLOOR)), -1.0)
    return clamp(scale(ce, 1.0 / _ce_divisor(class_count, mode)), hi=1.0)


def pwce_batch(masks: np.ndarray, maps: Tensor) -> Tensor:
    m = Tensor(np.asarray(masks, dtype=maps.data.dtype))
    one_minus_m = Tensor(1 - m.data)
    pos = mul(m, log(clamp(maps, lo=PROB_FLOOR)))
    neg = mul(one_minus_m, log(clamp(sub(1.0, maps), lo=PROB_FLOOR)))
    raw = scale(mean(add(pos, neg), axis=(1, 2)), -1.0)
    return clamp(scale(raw, 1.0 / PWCE_SCALE), hi=1.0)


def combine(
    ce_star: Tensor, s: Optional[Tensor], lam: float, ablation: Ablation, reduction: str = "sum"
) -> LossBreakdown:
    """Batch objective (sum or mean of per-sample terms) and the batch-mean breakdown."""
    terms = scale(ce_star, lam)
    s_mean = r1_mean = r2_mean = 0.0
    if s is not None:
        terms = add(terms, scale(s, 1.0 - lam))
        s_mean = float(np.mean(s.data, dtype=np.float64))
        if ablation.use_r1:
            t1 = mul(ce_star, sub(1.0, s))
            terms = add(terms, t1)
            r1_mean = float(np.mean(t1.data, dtype=np.float64))
        if ablation.use_r2:
            t2 = mul(s, sub(1.0, ce_star))
            terms = add(terms, t2)
            r2_mean = float(np.mean(t2.data, dtype=np.float64))
    loss = tsum(terms) if reduction == "sum" else mean(terms)
    ce_mean = float(np.mean(ce_star.data, dtype=np.float64))
    total = lam * ce_mean + (1.0 - lam) * s_mean + r1_mean + r2_mean
    return LossBreakdown(ce_mean, s_mean, r1_mean, r2_mean, total, lam, loss)


def ce_loss(batch: Batch, model: Model, norm: CeNorm = CeNorm.CLASS_COUNT) -> LossBreakdown:
    fwd = model.forward(Tensor(batch.images))
    ce_star = ce_star_batch(fwd.probs, batch.labels, model.class_count, CeNorm(norm))
    return combine(ce_star, None, 1.0, Ablation.BOTH_ZERO)


def trustworthy_loss(
    batch: Batch,
    model: Model,
    lam: float = 0.9,
    method=Method.GUIDED_GRAD_CAM,
    norm: CeNorm = CeNorm.CLASS_COUNT,
    ablation=Ablation.FULL,
    pwce_variant: bool = False,
    alpha: Optional[np.ndarray] = None,
    guided: Optional[np.ndarray] = None,
) -> LossBreakdown:
    """Objective for one batch; call under a tape to differentiate `breakdown.loss`.

    Saliency maps use the true class. Grad-CAM weights and guided maps are
    constants of the pass (pin them with `alpha` / `guided`).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    model.check_trainable()
    ablation = Ablation(ablation)
    if pwce_variant and batch.masks is None:
        raise ValueError("mask-supervised loss needs a ground-truth mask for every example")
    sp = saliency_pass(model, Tensor(batch.images), batch.labels, method, alpha=alpha, guided=guided)
    ce_star = ce_star_batch(sp.forward.probs, batch.labels, model.class_count, CeNorm(norm))
    if pwce_variant:
        maps = sp.normalized
        if maps.shape[1:] != batch.masks.shape[1:]:
            maps = upsample_nearest(maps, batch.masks.shape[1:])
        s = pwce_batch(batch.masks, maps)
    else:
        s = sp.s_hat
    out = combine(ce_star, s, lam, ablation)
    out.saliency = sp
    return out


def trustworthy_loss_pwce(batch, model, lam=0.9, method=Method.GUIDED_GRAD_CAM, norm=CeNorm.CLASS_COUNT,
                          ablation=Ablation.FULL, **kw) -> LossBreakdown:
    return trustworthy_loss(batch, model, lam, method, norm, ablation, pwce_variant=True, **kw)


def loss_for(batch: Batch, model: Model, config: LossConfig, **kw) -> LossBreakdown:
    if config.kind is LossKind.CE:
        return ce_loss(batch, model, config.ce_norm)
    return trustworthy_loss(
        batch, model, config.lam, config.method, config.ce_norm, config.ablation,
        pwce_variant=config.kind is LossKind.TRUSTWORTHY_PWCE, **kw,
    )
