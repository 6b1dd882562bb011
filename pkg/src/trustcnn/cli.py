"""trustcnn command line: gen, train, saliency, compare, reproduce.

Every option can also come from a JSON file given with --config; keys are
the long flag names with dashes replaced by underscores. Flags win over the
file, the file wins over built-in defaults, and unknown keys are rejected.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import experiment
from .data import SHAPES, GenerationError, IdxError, ShapesConfig, config_dict, gen_shapes, load_dataset, \
    save_dataset, stack
from .loss import Ablation, CeNorm, LossKind
from .metrics import CaseBreakdown, case_of, case_table, energy_in_mask, performance_table, report_csv
from .nn.checkpoint import ArchitectureMismatchError, CheckpointError, load_checkpoint, read_entries, \
    save_checkpoint
from .nn.layers import Model, default_model
from .pgm import write_pgm
from .saliency import Method, batch_maps, map_filename
from .trainer import NonFiniteLossError, TrainConfig, append_transfer_head, evaluate, predict, pretrain, train, \
    write_log

logger = logging.getLogger("trustcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=[k.value for k in LossKind])
    p.add_argument("--method", type=str, help="gradcam or guided-gradcam")
    p.add_argument("--lambda", dest="lam", type=float, help="cross-entropy weight in [0, 1]")
    p.add_argument("--lr", type=float, help="SGD learning rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--ablation", choices=[a.value for a in (Ablation.FULL, Ablation.R1_ZERO, Ablation.R2_ZERO)])
    p.add_argument("--ce-norm", choices=[c.value for c in CeNorm])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trustcnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON file of option defaults")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        return p

    g = common("gen", "generate the synthetic shapes dataset")
    g.add_argument("--classes", type=str, help="comma-separated subset of " + ",".join(SHAPES))
    g.add_argument("--n", type=int, help="samples per class")
    g.add_argument("--size", type=int, help="image side length")
    g.add_argument("--noise", type=float, help="background noise level")
    g.add_argument("--distractor", action="store_const", const=True, help="add an off-mask distractor shape")

    t = common("train", "train a transfer head with cross entropy or the trustworthy loss")
    t.add_argument("--data", type=Path, help="dataset directory")
    _train_flags(t)
    t.add_argument("--filters", type=int, help="transfer conv filters")
    t.add_argument("--backbone", type=Path, help="pretrained default-architecture checkpoint")
    t.add_argument("--pretrain-epochs", type=int, help="backbone epochs when no --backbone is given")
    t.add_argument("--tau", type=float, help="energy-in-mask threshold for an accurate map")

    s = common("saliency", "export normalized saliency maps as PGM files")
    s.add_argument("--checkpoint", type=Path, help="trained model checkpoint")
    s.add_argument("--data", type=Path, help="dataset directory")
    s.add_argument("--method", type=str)
    s.add_argument("--tau", type=float, help="energy-in-mask threshold for an accurate map")

    c = common("compare", "compare two checkpoints on one dataset")
    c.add_argument("--a", type=Path, help="first checkpoint")
    c.add_argument("--b", type=Path, help="second checkpoint")
    c.add_argument("--data", type=Path, help="dataset directory")
    c.add_argument("--method", type=str)
    c.add_argument("--tau", type=float, help="energy-in-mask threshold for an accurate map")

    r = common("reproduce", "run the multi-seed baseline vs trustworthy suite")
    _train_flags(r)
    r.add_argument("--seeds", type=int, help="number of seeds (0..k-1)")
    r.add_argument("--n", type=int, help="training samples per class")
    r.add_argument("--tau", type=float, help="energy-in-mask threshold for an accurate map")
    return parser


DEFAULTS = {
    "gen": dict(out=None, seed=0, classes=",".join(SHAPES), n=50, size=32, noise=0.1, distractor=False),
    "train": dict(out=None, seed=0, data=None, loss="trustworthy", method="guided-gradcam", lam=0.9, lr=0.01,
                  epochs=50, batch=32, ablation="full", ce_norm="classcount", filters=16, backbone=None,
                  pretrain_epochs=15, tau=0.5),
    "saliency": dict(out=None, seed=0, checkpoint=None, data=None, method="guided-gradcam", tau=0.5),
    "compare": dict(out=None, seed=0, a=None, b=None, data=None, method="guided-gradcam", tau=0.5),
    "reproduce": dict(out=None, seed=0, loss=None, method=None, lam=None, lr=None, epochs=None, batch=None,
                      ablation=None, ce_norm=None, seeds=None, n=None, tau=None),
}
PATH_KEYS = {"out", "data", "backbone", "checkpoint", "a", "b"}


def _key_map(parser: argparse.ArgumentParser, command: str) -> dict[str, str]:
    """JSON key -> argparse dest for one subcommand."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    out = {}
    for action in sub._actions:
        longs = [o for o in action.option_strings if o.startswith("--")]
        if longs and action.dest not in ("help", "config"):
            out[longs[0][2:].replace("-", "_")] = action.dest
    return out


def resolve(parser: argparse.ArgumentParser, argv: Optional[Sequence[str]]) -> argparse.Namespace:
    """Parse flags, layer them over the JSON config and defaults, resolve paths."""
    ns = parser.parse_args(argv)
    merged = dict(DEFAULTS[ns.command])
    if ns.config is not None:
        try:
            cfg = json.loads(Path(ns.config).read_text())
        except OSError as e:
            raise DataError(f"cannot read config: {e}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config {ns.config} is not valid JSON: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        keys = _key_map(parser, ns.command)
        unknown = sorted(set(cfg) - set(keys))
        if unknown:
            raise UsageError(f"unknown config keys for {ns.command}: {', '.join(unknown)}")
        for k, v in cfg.items():
            merged[keys[k]] = v
    for k, v in vars(ns).items():
        if k in ("command", "config", "verbose"):
            continue
        if v is not None:
            merged[k] = v
    for k in PATH_KEYS & set(merged):
        if merged[k] is not None:
            merged[k] = Path(merged[k]).expanduser().resolve()
    return argparse.Namespace(command=ns.command, verbose=ns.verbose, **merged)


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m for m in missing))


def _method(value, allow_guided_backprop: bool = False) -> Method:
    try:
        m = Method.parse(value)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if m is Method.GUIDED_BACKPROP and not allow_guided_backprop:
        raise UsageError("this command needs a class-discriminative method: gradcam, guided-gradcam")
    return m


# ---------------------------------------------------------------------------
# helpers


def dataset_digest(manifest: Path) -> str:
    """sha256 over the manifest and every file it lists, in manifest order."""
    h = hashlib.sha256(manifest.read_bytes())
    with manifest.open(newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("image_path", "mask_path"):
                if row[key]:
                    h.update((manifest.parent / row[key]).read_bytes())
    return h.hexdigest()


def _load_data(path: Path):
    try:
        data = load_dataset(path)
    except (OSError, KeyError, ValueError) as e:
        raise DataError(f"cannot load dataset {path}: {e}") from None
    if not data:
        raise DataError(f"dataset {path} is empty")
    return data


def model_from_checkpoint(path: Path) -> Model:
    """Rebuild the default architecture (with or without a transfer head) from checkpoint shapes."""
    entries = read_entries(path)
    shapes = {name: w.shape for name, w, _ in entries}
    if "conv1" not in shapes:
        raise ArchitectureMismatchError(f"{path}: not a default-architecture checkpoint (layers {list(shapes)})")
    channels = shapes["conv1"][1]
    if "transfer" in shapes:
        classes = shapes["head_dense"][0]
        model = append_transfer_head(default_model(classes, channels=channels), shapes["transfer"][0])
    else:
        model = default_model(shapes["dense"][0], channels=channels)
    return load_checkpoint(path, model)


def _maps(model: Model, images: np.ndarray, classes, method: Method) -> np.ndarray:
    return np.concatenate([
        batch_maps(model, images[s:s + 128], classes[s:s + 128], method) for s in range(0, len(images), 128)
    ])


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    _require(args, "out")
    classes = [c.strip() for c in str(args.classes).split(",") if c.strip()]
    try:
        cfg = ShapesConfig(classes, args.size, args.n, args.noise, bool(args.distractor), args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    data = gen_shapes(cfg)
    manifest = save_dataset(data, args.out, config_dict(cfg))
    print(f"{manifest} {len(data)} examples sha256 {dataset_digest(manifest)}")
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "data", "out")
    try:
        cfg = TrainConfig(args.loss, _method(args.method), args.lam, args.lr, args.epochs, args.batch,
                          args.ablation, args.seed, args.ce_norm)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.filters < 1:
        raise UsageError("--filters must be >= 1")
    data = _load_data(args.data)
    n_classes = max(e.label for e in data) + 1
    if args.backbone is not None:
        backbone = model_from_checkpoint(args.backbone)
        if "transfer" in [l.name for l in backbone.layers]:
            raise UsageError("--backbone must be a checkpoint without a transfer head")
    else:
        backbone = default_model(n_classes, data[0].image.shape[1], data[0].image.shape[0], seed=args.seed)
        backbone, _ = pretrain(backbone, data, args.pretrain_epochs, 0.01, args.batch, args.seed)
    model = append_transfer_head(backbone, args.filters, seed=args.seed)
    model, history = train(model, data, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out / "model.ckpt")
    write_log(history, args.out / "loss.csv")
    ev = evaluate(model, data, cfg.method, args.tau)
    print(f"final_accuracy {ev.report.accuracy:.4f} mean_s_hat {float(np.mean(ev.s_hat)):.4f} "
          f"checkpoint {args.out / 'model.ckpt'}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    _require(args, "checkpoint", "data", "out")
    method = _method(args.method, allow_guided_backprop=True)
    model = model_from_checkpoint(args.checkpoint)
    data = _load_data(args.data)
    b = stack(data)
    preds = predict(model, b.images)
    maps = _maps(model, b.images, preds, method)
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "saliency.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "file", "pred", "true", "s_hat", "case"])
        for ex, pred, m in zip(data, preds, maps):
            name = map_filename(ex.id, method, int(pred))
            write_pgm(args.out / name, m)
            case = ""
            if ex.mask is not None:
                case = int(case_of(int(pred), ex.label, energy_in_mask(m, ex.mask) >= args.tau))
            w.writerow([ex.id, name, int(pred), ex.label, f"{float(m.mean()):.6f}", case])
    print(f"wrote {len(data)} maps to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    _require(args, "a", "b", "data")
    method = _method(args.method)
    shapes_a = [(n, w.shape, b.shape) for n, w, b in read_entries(args.a)]
    shapes_b = [(n, w.shape, b.shape) for n, w, b in read_entries(args.b)]
    if shapes_a != shapes_b:
        raise ArchitectureMismatchError(f"{args.a} and {args.b} have different architectures")
    data = _load_data(args.data)
    if any(e.mask is None for e in data):
        raise DataError("compare needs object masks for every example")
    evals = []
    for path in (args.a, args.b):
        evals.append(evaluate(model_from_checkpoint(path), data, method, args.tau,
                              baseline=evals[0] if evals else None))
    mean_ssim = evals[1].report.mean_ssim_vs_baseline
    names = [f"A {args.a.parent.name}/{args.a.name}", f"B {args.b.parent.name}/{args.b.name}"]
    reports = [e.report for e in evals]
    cases = [CaseBreakdown(r.n, r.case_fractions, r.case_intervals) for r in reports]
    text = (f"mean SSIM ({method.value}) {mean_ssim:.6f}\n\n"
            + performance_table(list(zip(names, reports))) + "\n"
            + case_table(list(zip(names, cases))))
    print(text, end="")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "compare.txt").write_text(text)
        (args.out / "compare.csv").write_text(report_csv(list(zip(names, reports))))
    return EXIT_OK


def reproduce_config(args) -> experiment.ExperimentConfig:
    cfg = experiment.ExperimentConfig()
    over = {}
    if args.lam is not None:
        over["lam"] = args.lam
    for key in ("lr", "epochs", "tau"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    if args.batch is not None:
        over["batch_size"] = args.batch
    if args.n is not None:
        over["train_per_class"] = args.n
    if args.seeds is not None:
        if args.seeds < 1:
            raise UsageError("--seeds must be >= 1")
        over["seeds"] = tuple(range(args.seed, args.seed + args.seeds))
    elif args.seed:
        over["seeds"] = tuple(range(args.seed, args.seed + len(cfg.seeds)))
    for key in ("loss", "method", "ablation", "ce_norm"):
        if getattr(args, key) is not None:
            raise UsageError(f"reproduce runs every arm; --{key.replace('_', '-')} does not apply")
    try:
        return replace(cfg, **over)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_reproduce(args) -> int:
    _require(args, "out")
    cfg = reproduce_config(args)
    results = experiment.run_experiment(cfg)
    paths = experiment.write_outputs(results, cfg, args.out)
    print(paths["table"].read_text(), end="")
    print(f"results {paths['results']}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "saliency": cmd_saliency, "compare": cmd_compare,
            "reproduce": cmd_reproduce}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = resolve(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NAN
    except (DataError, CheckpointError, IdxError, GenerationError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
