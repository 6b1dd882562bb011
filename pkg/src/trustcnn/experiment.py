"""Multi-seed baseline vs trustworthy comparison on the distractor shapes task.

One backbone is pretrained with cross entropy on clean shapes and shared by
every run. Each run attaches a fresh transfer head (seeded by the run seed, so
the baseline and trustworthy arms of a seed start from identical weights) and
trains only that head on the distractor training set.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import SHAPES, ShapesConfig, gen_shapes
from .loss import Ablation, LossKind
from .metrics import REPORT_COLUMNS, MetricsReport, report_values
from .nn.layers import Model, default_model
from .saliency import Method
from .trainer import TrainConfig, append_transfer_head, evaluate, pretrain, train

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    loss: LossKind
    method: Method
    ablation: Ablation


BASELINE = Arm("baseline", LossKind.CE, Method.GUIDED_GRAD_CAM, Ablation.FULL)
ARMS = (BASELINE,) + tuple(
    Arm(f"{m.value}/{a.value}", LossKind.TRUSTWORTHY, m, a)
    for m in (Method.GRAD_CAM, Method.GUIDED_GRAD_CAM)
    for a in (Ablation.FULL, Ablation.R1_ZERO, Ablation.R2_ZERO)
)


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    classes: tuple[str, ...] = SHAPES
    image_size: int = 32
    noise_level: float = 0.1
    train_per_class: int = 50
    test_per_class: int = 50
    source_per_class: int = 100
    data_seed: int = 123
    source_seed: int = 999
    backbone_seed: int = 0
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.01
    filters: int = 16
    epochs: int = 50
    lr: float = 0.01
    lam: float = 0.9
    batch_size: int = 32
    tau: float = 0.5
    arms: tuple[str, ...] = field(default=tuple(a.name for a in ARMS))

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "arms", tuple(self.arms))
        known = {a.name for a in ARMS}
        if set(self.arms) - known:
            raise ValueError(f"unknown arms {sorted(set(self.arms) - known)}; known: {sorted(known)}")
        if BASELINE.name not in self.arms:
            raise ValueError("the baseline arm is required for the SSIM column")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def shapes(self, per_class: int, seed: int, distractor: bool) -> ShapesConfig:
        return ShapesConfig(self.classes, self.image_size, per_class, self.noise_level, distractor, seed)

    def train_config(self, arm: Arm, seed: int) -> TrainConfig:
        return TrainConfig(arm.loss, arm.method, self.lam, self.lr, self.epochs, self.batch_size, arm.ablation,
                           seed)


RESULT_COLUMNS = ("seed", "lr", "lambda", "loss_kind", "method", "ablation") + REPORT_COLUMNS


@dataclass
class RunResult:
    seed: int
    arm: Arm
    config: TrainConfig
    report: MetricsReport
    seconds: float = 0.0

    def row(self) -> list[str]:
        c = self.config
        return [str(self.seed), f"{c.lr:g}", f"{c.lam:g}", c.loss.value, c.method.value, c.ablation.value,
                *(f"{v:.6f}" for v in report_values(self.report))]


def build_backbone(cfg: ExperimentConfig) -> Model:
    source = gen_shapes(cfg.shapes(cfg.source_per_class, cfg.source_seed, distractor=False))
    model = default_model(len(cfg.classes), cfg.image_size, seed=cfg.backbone_seed)
    model, _ = pretrain(model, source, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.batch_size, cfg.backbone_seed)
    return model


def datasets(cfg: ExperimentConfig):
    train_set = gen_shapes(cfg.shapes(cfg.train_per_class, cfg.data_seed, distractor=True))
    test_set = gen_shapes(cfg.shapes(cfg.test_per_class, cfg.data_seed + 1, distractor=True))
    return train_set, test_set


def run_seed(cfg: ExperimentConfig, backbone: Model, train_set, test_set, seed: int) -> list[RunResult]:
    """Every configured arm for one seed; the baseline runs first and anchors SSIM."""
    arms = [a for a in ARMS if a.name in cfg.arms]
    out = []
    base_eval = None
    for arm in arms:
        tcfg = cfg.train_config(arm, seed)
        t0 = time.perf_counter()
        model, _ = train(append_transfer_head(backbone, cfg.filters, seed=seed), train_set, tcfg)
        ev = evaluate(model, test_set, arm.method, cfg.tau, baseline=base_eval)
        if arm is BASELINE:
            base_eval = ev
        dt = time.perf_counter() - t0
        logger.info("seed %d %s: acc %.3f energy %.3f (%.1fs)", seed, arm.name, ev.report.accuracy,
                    ev.report.energy_in_mask, dt)
        out.append(RunResult(seed, arm, tcfg, ev.report, dt))
    return out


def _seed_job(args):
    return run_seed(*args)


def thread_limit() -> int:
    raw = os.environ.get("TRUSTCNN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"TRUSTCNN_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> list[RunResult]:
    """All seeds x arms, ordered by (seed, arm) regardless of worker count."""
    backbone = build_backbone(cfg)
    train_set, test_set = datasets(cfg)
    workers = thread_limit() if workers is None else workers
    jobs = [(cfg, backbone, train_set, test_set, s) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            per_seed = list(pool.map(_seed_job, jobs))
    else:
        per_seed = [_seed_job(j) for j in jobs]
    return [r for rows in per_seed for r in rows]


# ---------------------------------------------------------------------------
# reporting


def results_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in results:
        w.writerow(r.row())
    return buf.getvalue()


def read_results(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def arm_means(results: Sequence[RunResult]) -> dict[str, dict[str, float]]:
    """Per-arm means of every report column, arms in run order."""
    out: dict[str, dict[str, float]] = {}
    names = list(dict.fromkeys(r.arm.name for r in results))
    for name in names:
        vals = np.array([report_values(r.report) for r in results if r.arm.name == name], dtype=np.float64)
        out[name] = dict(zip(REPORT_COLUMNS, vals.mean(axis=0).tolist()))
    return out


def arm_name(row: dict) -> str:
    """Arm of a results.csv row."""
    if row["loss_kind"] == LossKind.CE.value:
        return BASELINE.name
    return f"{row['method']}/{row['ablation']}"


def csv_arm_means(rows: Sequence[dict]) -> dict[str, dict[str, float]]:
    """`arm_means` computed from rows returned by `read_results`."""
    out: dict[str, dict[str, float]] = {}
    for name in dict.fromkeys(arm_name(r) for r in rows):
        vals = np.array([[float(r[c]) for c in REPORT_COLUMNS] for r in rows if arm_name(r) == name])
        out[name] = dict(zip(REPORT_COLUMNS, vals.mean(axis=0).tolist()))
    return out


def _means(results) -> dict[str, dict[str, float]]:
    return results if isinstance(results, dict) else arm_means(results)


def summary_table(results: Sequence[RunResult]) -> str:
    """Aligned per-arm means over seeds."""
    means = arm_means(results)
    n_seeds = len({r.seed for r in results})
    cols = ("Accuracy", "Precision", "Recall", "Energy", "Case 1", "Case 3", "SSIM")
    name_w = max(len("Model"), *(len(n) for n in means)) + 2
    head = ("Model".ljust(name_w) + "".join(c.ljust(11) for c in cols)).rstrip()
    lines = [f"mean over {n_seeds} seed(s)", head, "-" * len(head)]
    for name, m in means.items():
        ssim_cell = "-" if math.isnan(m["ssim_vs_baseline"]) else f"{m['ssim_vs_baseline']:.3f}"
        cells = [
            f"{100 * m['accuracy']:.1f}%", f"{100 * m['precision']:.1f}%", f"{100 * m['recall']:.1f}%",
            f"{m['energy_in_mask']:.3f}", f"{100 * m['case1']:.1f}%", f"{100 * m['case3']:.1f}%", ssim_cell,
        ]
        lines.append((name.ljust(name_w) + "".join(c.ljust(11) for c in cells)).rstrip())
    return "\n".join(lines) + "\n"


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self, warn_only: bool = False) -> str:
        tag = "PASS" if self.passed else ("WARN" if warn_only else "FAIL")
        return f"{tag} {self.name}: {self.detail}"


def directional_checks(results, arm: str = "guided-gradcam/full") -> list[Check]:
    """Accuracy within one point of baseline, higher energy-in-mask, lower case-3 fraction.

    `results` is a list of RunResult or an arm-means dict.
    """
    means = _means(results)
    b, t = means[BASELINE.name], means[arm]
    return [
        Check("accuracy", t["accuracy"] >= b["accuracy"] - 0.01,
              f"trustworthy {t['accuracy']:.4f} vs baseline {b['accuracy']:.4f} (need >= baseline - 0.01)"),
        Check("energy_in_mask", t["energy_in_mask"] > b["energy_in_mask"],
              f"trustworthy {t['energy_in_mask']:.4f} vs baseline {b['energy_in_mask']:.4f} (need >)"),
        Check("case3", t["case3"] < b["case3"],
              f"trustworthy {t['case3']:.4f} vs baseline {b['case3']:.4f} (need <)"),
    ]


def ablation_ordering(results, method: Method) -> Check:
    """Mean SSIM vs baseline ordered r2zero >= full >= r1zero."""
    means = _means(results)
    s = {a: means[f"{method.value}/{a}"]["ssim_vs_baseline"] for a in ("r2zero", "full", "r1zero")}
    ok = s["r2zero"] >= s["full"] >= s["r1zero"]
    return Check(f"ablation ssim order ({method.value})", ok,
                 f"r2zero {s['r2zero']:.4f}, full {s['full']:.4f}, r1zero {s['r1zero']:.4f}")


def write_outputs(results: Sequence[RunResult], cfg: ExperimentConfig, out_dir) -> dict[str, Path]:
    """results.csv, table.txt and config.json; all byte-identical across reruns."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "table": out / "table.txt", "config": out / "config.json"}
    paths["results"].write_text(results_csv(results))
    text = summary_table(results)
    if "guided-gradcam/full" in cfg.arms:
        text += "\n" + "\n".join(c.line() for c in directional_checks(results)) + "\n"
    for m in (Method.GRAD_CAM, Method.GUIDED_GRAD_CAM):
        if all(f"{m.value}/{a}" in cfg.arms for a in ("full", "r1zero", "r2zero")):
            text += ablation_ordering(results, m).line(warn_only=True) + "\n"
    paths["table"].write_text(text)
    paths["config"].write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return paths


def small_config(**overrides) -> ExperimentConfig:
    """A seconds-scale configuration for smoke and determinism checks."""
    base = ExperimentConfig(seeds=(0, 1), train_per_class=6, test_per_class=4, source_per_class=8,
                            pretrain_epochs=1, epochs=1, batch_size=8)
    return replace(base, **overrides)
