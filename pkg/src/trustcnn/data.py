"""Synthetic shapes with object masks, IDX loading, batching and dataset I/O."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .pgm import read_pgm, write_pgm

SHAPES = ("square", "circle", "triangle", "cross")
MAX_ATTEMPTS = 100


@dataclass
class LabeledExample:
    image: np.ndarray  # (C, H, W) in [0, 1]
    label: int
    mask: Optional[np.ndarray] = None  # (H, W) in {0, 1}
    id: int = 0

    def __post_init__(self):
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"example {self.id}: mask {self.mask.shape} vs image {self.image.shape}")


@dataclass
class ShapesConfig:
    classes: Sequence[str] = SHAPES
    image_size: int = 32
    samples_per_class: int = 50
    noise_level: float = 0.1
    distractor: bool = False
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if len(self.classes) < 2:
            raise ValueError("need at least two classes")
        unknown = set(self.classes) - set(SHAPES)
        if unknown or len(set(self.classes)) != len(self.classes):
            raise ValueError(f"classes must be distinct members of {SHAPES}, got {self.classes}")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 0.0 <= self.noise_level <= 0.5:
            raise ValueError("noise_level must lie in [0, 0.5]")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")


class GenerationError(RuntimeError):
    pass


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One random instance of `kind`; may touch the border (caller rejects those)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    half = rng.uniform(2.5, size / 5)
    cy, cx = rng.uniform(0, size, 2)
    if kind == "square":
        m = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif kind == "circle":
        m = (yy - cy) ** 2 + (xx - cx) ** 2 <= half ** 2
    elif kind == "triangle":
        # apex up; width grows linearly from apex to base
        top, bottom = cy - half, cy + half
        frac = (yy - top) / (bottom - top)
        m = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * half)
    elif kind == "cross":
        arm = max(1.0, half / 3)
        m = ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= half)) | (
            (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= half)
        )
    else:
        raise ValueError(kind)
    return m


def _inside(mask: np.ndarray) -> bool:
    return not (mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any())


def _quantize(x: np.ndarray) -> np.ndarray:
    # 8-bit grid so PGM serialization is lossless
    return (np.rint(np.clip(x, 0, 1) * 255) / 255).astype(np.float32)


def _make_example(kind: str, label: int, cfg: ShapesConfig, rng: np.random.Generator, ident: int) -> LabeledExample:
    n = cfg.image_size
    for _ in range(MAX_ATTEMPTS):
        mask = _shape_mask(kind, n, rng)
        if mask.sum() >= 9 and _inside(mask):
            break
    else:
        raise GenerationError(f"could not place a {kind} after {MAX_ATTEMPTS} attempts")
    img = rng.uniform(0.0, cfg.noise_level, (n, n)) if cfg.noise_level > 0 else np.zeros((n, n))
    img[mask] = rng.uniform(0.7, 1.0)
    if cfg.distractor:
        # 3x3 patch, kept one pixel clear of the object
        grown = mask.copy()
        grown[1:] |= mask[:-1]
        grown[:-1] |= mask[1:]
        grown[:, 1:] |= grown[:, :-1].copy()
        grown[:, :-1] |= grown[:, 1:].copy()
        for _ in range(MAX_ATTEMPTS):
            r, c = rng.integers(0, n - 2, 2)
            if not grown[r:r + 3, c:c + 3].any():
                img[r:r + 3, c:c + 3] = rng.uniform(0.7, 1.0)
                break
        else:
            raise GenerationError(f"could not place a distractor after {MAX_ATTEMPTS} attempts")
    return LabeledExample(_quantize(img)[None], label, mask.astype(np.float32), ident)


def gen_shapes(cfg: ShapesConfig) -> list[LabeledExample]:
    """Deterministic dataset, classes interleaved, `samples_per_class` of each."""
    rng = np.random.default_rng(cfg.seed)
    out = []
    for i in range(cfg.samples_per_class):
        for label, kind in enumerate(cfg.classes):
            out.append(_make_example(kind, label, cfg, rng, len(out)))
    return out


def train_test_split(dataset: Sequence[LabeledExample], test_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    test = sorted(order[:n_test])
    train = sorted(order[n_test:])
    return [dataset[i] for i in train], [dataset[i] for i in test]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None
    ids: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def stack(examples: Sequence[LabeledExample]) -> Batch:
    images = np.stack([e.image for e in examples]).astype(np.float32)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    masks = None
    if all(e.mask is not None for e in examples):
        masks = np.stack([e.mask for e in examples]).astype(np.float32)
    return Batch(images, labels, masks, [e.id for e in examples])


def batches(dataset: Sequence[LabeledExample], batch_size: int = 32, shuffle_seed: Optional[int] = 0) -> list[Batch]:
    """One epoch of batches in a seeded shuffled order; the short last batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if shuffle_seed is None:
        order = np.arange(len(dataset))
    else:
        order = np.random.default_rng(shuffle_seed).permutation(len(dataset))
    return [stack([dataset[i] for i in order[s:s + batch_size]]) for s in range(0, len(dataset), batch_size)]


# ---------------------------------------------------------------------------
# IDX


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, magic: int, dims: int) -> tuple[tuple[int, ...], bytes]:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise TruncatedError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise BadMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    head = 4 + 4 * dims
    if len(buf) < head:
        raise TruncatedError(f"{path}: truncated header")
    shape = struct.unpack(f">{dims}I", buf[4:head])
    need = int(np.prod(shape))
    if len(buf) - head < need:
        raise TruncatedError(f"{path}: expected {need} data bytes, found {len(buf) - head}")
    return shape, buf[head:head + need]


def load_idx(images_path, labels_path) -> list[LabeledExample]:
    (n, rows, cols), pix = _read_idx(images_path, IDX_IMAGES, 3)
    (m,), lab = _read_idx(labels_path, IDX_LABELS, 1)
    if n != m:
        raise CountMismatchError(f"{n} images but {m} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / np.float32(255)
    labels = np.frombuffer(lab, dtype=np.uint8)
    return [LabeledExample(images[i], int(labels[i]), None, i) for i in range(n)]


def write_idx(images_path, labels_path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Write (N, rows, cols) uint8 images and their labels as big-endian IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


# ---------------------------------------------------------------------------
# directory serialization


def save_dataset(dataset: Sequence[LabeledExample], out_dir, meta: Optional[dict] = None) -> Path:
    """PGM images and masks plus manifest.csv (id, label, image_path, mask_path)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    manifest = out / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "image_path", "mask_path"])
        for ex in dataset:
            if ex.image.shape[0] != 1:
                raise ValueError("only single-channel datasets serialize to PGM")
            img = f"images/{ex.id:06d}.pgm"
            write_pgm(out / img, ex.image[0])
            msk = ""
            if ex.mask is not None:
                msk = f"masks/{ex.id:06d}.pgm"
                write_pgm(out / msk, ex.mask)
            w.writerow([ex.id, ex.label, img, msk])
    if meta is not None:
        (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path) -> list[LabeledExample]:
    root = Path(path)
    manifest = root / "manifest.csv" if root.is_dir() else root
    root = manifest.parent
    out = []
    with manifest.open(newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_pgm(root / row["image_path"])[None]
            mask = read_pgm(root / row["mask_path"]).round() if row["mask_path"] else None
            out.append(LabeledExample(img, int(row["label"]), mask, int(row["id"])))
    return out


def config_dict(cfg: ShapesConfig) -> dict:
    d = asdict(cfg)
    d["classes"] = list(cfg.classes)
    return d
