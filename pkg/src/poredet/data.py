"""Images, pore annotations, dataset splits and patch sampling.

Images are float32 arrays of shape ``(rows, cols)`` with values in [0, 1].
Pore annotations are int64 arrays of shape ``(n, 2)`` holding 0-indexed
``(row, col)`` coordinates. On disk, annotations are one ``row col`` pair
per line, 1-indexed.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import pgm
from .model import BORDER, PATCH_SIZE

LABEL_RADIUS = 3  # 7x7 label box
IMAGE_SUFFIXES = (".pgm", ".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")
BENCHMARK_SPLIT = (15, 5, 10)


class DataFormatError(ValueError):
    """An image or annotation file cannot be parsed."""


class AnnotationValidationError(ValueError):
    """Annotations parse but violate the coordinate invariants."""


class PairingError(ValueError):
    """Images and annotation files do not pair up."""


# -- files -----------------------------------------------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit grayscale raster as float32 in [0, 1] (pixel / 255)."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".pgm":
            pixels = pgm.read_pgm(path)
        else:
            from PIL import Image

            with Image.open(path) as im:
                if im.mode != "L":
                    raise DataFormatError(f"{path}: expected 8-bit grayscale, got PIL mode {im.mode!r}")
                pixels = np.asarray(im, dtype=np.uint8)
    except DataFormatError:
        raise
    except OSError as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise DataFormatError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return pixels.astype(np.float32) / np.float32(255.0)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [0, 1] image as an 8-bit binary PGM."""
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    pgm.write_pgm(path, pixels)


def parse_annotations(text: str, image_dims: tuple[int, int] | None = None,
                      swap_axes: bool = False, source: str = "<annotations>") -> np.ndarray:
    """Parse 1-indexed ``row col`` lines into 0-indexed coordinates.

    ``swap_axes`` reads each line as ``col row`` (``x y``) instead.
    Blank lines are skipped.
    """
    coords = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2:
            raise DataFormatError(f"{source}:{lineno}: expected two integers, got {line.strip()!r}")
        try:
            a, b = int(fields[0]), int(fields[1])
        except ValueError:
            raise DataFormatError(f"{source}:{lineno}: expected two integers, got {line.strip()!r}") from None
        row, col = (b, a) if swap_axes else (a, b)
        if row < 1 or col < 1:
            raise AnnotationValidationError(f"{source}:{lineno}: coordinates are 1-indexed, got {row} {col}")
        if image_dims is not None and (row > image_dims[0] or col > image_dims[1]):
            raise AnnotationValidationError(
                f"{source}:{lineno}: pore ({row}, {col}) outside {image_dims[0]}x{image_dims[1]} image")
        coords.append((row - 1, col - 1))
    pores = np.array(coords, dtype=np.int64).reshape(-1, 2)
    if len(np.unique(pores, axis=0)) != len(pores):
        raise AnnotationValidationError(f"{source}: duplicate pore coordinates")
    return pores


def load_annotations(path: str | Path, image_dims: tuple[int, int] | None = None,
                     swap_axes: bool = False) -> np.ndarray:
    path = Path(path)
    return parse_annotations(path.read_text(encoding="utf-8"), image_dims, swap_axes, source=str(path))


def format_annotations(pores: np.ndarray) -> str:
    return "".join(f"{r + 1} {c + 1}\n" for r, c in np.asarray(pores, dtype=np.int64).reshape(-1, 2))


def save_annotations(path: str | Path, pores: np.ndarray) -> None:
    Path(path).write_text(format_annotations(pores), encoding="utf-8")


# -- dataset ---------------------------------------------------------------


@dataclass
class Sample:
    name: str
    image: np.ndarray
    pores: np.ndarray


@dataclass
class DatasetSplit:
    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]


def natural_key(name: str):
    """Sort key comparing digit runs numerically, so ``2`` < ``10`` and ``002`` < ``010``."""
    return [(0, int(t), t) if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", name)]


def find_pairs(image_dir: str | Path, annotation_dir: str | Path | None = None) -> list[tuple[Path, Path]]:
    image_dir = Path(image_dir)
    annotation_dir = Path(annotation_dir) if annotation_dir is not None else image_dir
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    images = [p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()]
    images.sort(key=lambda p: natural_key(p.name))
    pairs = []
    for img in images:
        ann = annotation_dir / (img.stem + ".txt")
        if not ann.is_file():
            raise PairingError(f"no annotation file {ann.name} for image {img.name}")
        pairs.append((img, ann))
    return pairs


def load_sample(image_path: Path, annotation_path: Path, swap_axes: bool = False) -> Sample:
    image = load_image(image_path)
    pores = load_annotations(annotation_path, image.shape, swap_axes)
    return Sample(image_path.stem, image, pores)


def split_sizes(n: int, mode: str = "proportional") -> tuple[int, int, int]:
    """Train/validation/test sizes: 15/5/10 for the benchmark, else the same 1/2, 1/6, 1/3 proportions."""
    if mode == "benchmark":
        if n != sum(BENCHMARK_SPLIT):
            raise PairingError(f"benchmark layout needs exactly 30 image/annotation pairs, found {n}")
        return BENCHMARK_SPLIT
    if mode != "proportional":
        raise ValueError(f"unknown split mode {mode!r}")
    if n < 3:
        raise PairingError(f"need at least 3 image/annotation pairs to split, found {n}")
    n_train = max(1, n * 15 // 30)
    n_val = max(1, n * 5 // 30)
    return n_train, n_val, n - n_train - n_val


def split_dataset(directory: str | Path, mode: str = "proportional", annotation_dir: str | Path | None = None,
                  swap_axes: bool = False) -> DatasetSplit:
    """Pair images with annotations, sort by file name, split positionally."""
    pairs = find_pairs(directory, annotation_dir)
    n_train, n_val, _ = split_sizes(len(pairs), mode)
    samples = [load_sample(img, ann, swap_axes) for img, ann in pairs]
    return DatasetSplit(samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:])


# -- labels and patches ----------------------------------------------------


def label_patch(center: tuple[int, int], pores: np.ndarray) -> int:
    """1 if some pore lies inside the 7x7 box centred on ``center``."""
    pores = np.asarray(pores).reshape(-1, 2)
    d = np.abs(pores - np.asarray(center))
    return int(np.any((d[:, 0] <= LABEL_RADIUS) & (d[:, 1] <= LABEL_RADIUS)))


def label_map(shape: tuple[int, int], pores: np.ndarray) -> np.ndarray:
    """Boolean map of :func:`label_patch` evaluated at every pixel."""
    marks = np.zeros(shape, dtype=bool)
    pores = np.asarray(pores).reshape(-1, 2)
    marks[pores[:, 0], pores[:, 1]] = True
    return ndimage.maximum_filter(marks, size=2 * LABEL_RADIUS + 1, mode="constant", cval=False)


def extract_patches(image: np.ndarray, centers: np.ndarray) -> np.ndarray:
    centers = np.asarray(centers).reshape(-1, 2)
    out = np.empty((len(centers), PATCH_SIZE, PATCH_SIZE), dtype=image.dtype)
    for k, (r, c) in enumerate(centers):
        out[k] = image[r - BORDER:r + BORDER + 1, c - BORDER:c + BORDER + 1]
    return out


@dataclass
class PatchBatch:
    patches: np.ndarray  # (n, 17, 17)
    labels: np.ndarray  # (n,) float32 in {0, 1}
    image_index: np.ndarray  # (n,)
    centers: np.ndarray  # (n, 2)


class PatchSampler:
    """Draws stratified random patch batches across a list of training samples."""

    def __init__(self, samples: list[Sample], pos_fraction: float = 0.5):
        if not samples:
            raise ValueError("no training samples")
        if not 0.0 <= pos_fraction <= 1.0:
            raise ValueError(f"pos_fraction must lie in [0, 1], got {pos_fraction}")
        self.samples = samples
        self.pos_fraction = pos_fraction
        self.labels = []
        self.valid_counts = []
        pores = []
        for k, s in enumerate(samples):
            h, w = s.image.shape
            if h < PATCH_SIZE or w < PATCH_SIZE:
                raise ValueError(f"image {s.name} is smaller than {PATCH_SIZE}x{PATCH_SIZE}")
            self.labels.append(label_map((h, w), s.pores))
            self.valid_counts.append((h - 2 * BORDER) * (w - 2 * BORDER))
            for r, c in s.pores:
                # a pore can be labelled positive only if a valid centre lies within 3 px
                if BORDER - LABEL_RADIUS <= r <= h - 1 - BORDER + LABEL_RADIUS and \
                        BORDER - LABEL_RADIUS <= c <= w - 1 - BORDER + LABEL_RADIUS:
                    pores.append((k, r, c))
        self.eligible_pores = np.array(pores, dtype=np.int64).reshape(-1, 3)
        counts = np.array(self.valid_counts, dtype=np.float64)
        self.image_weights = counts / counts.sum()

    def sample(self, batch_size: int, rng: np.random.Generator) -> PatchBatch:
        n_pos = int(round(batch_size * self.pos_fraction))
        n_neg = batch_size - n_pos
        idx_p, ctr_p = self._positives(n_pos, rng)
        idx_n, ctr_n = self._negatives(n_neg, rng)
        image_index = np.concatenate([idx_p, idx_n])
        centers = np.concatenate([ctr_p, ctr_n])
        labels = np.concatenate([np.ones(n_pos), np.zeros(n_neg)]).astype(np.float32)
        order = rng.permutation(batch_size)
        image_index, centers, labels = image_index[order], centers[order], labels[order]
        patches = np.empty((batch_size, PATCH_SIZE, PATCH_SIZE), dtype=np.float32)
        for k in range(batch_size):
            r, c = centers[k]
            img = self.samples[image_index[k]].image
            patches[k] = img[r - BORDER:r + BORDER + 1, c - BORDER:c + BORDER + 1]
        return PatchBatch(patches, labels, image_index, centers)

    def _positives(self, n: int, rng: np.random.Generator):
        if n == 0:
            return np.zeros(0, np.int64), np.zeros((0, 2), np.int64)
        if len(self.eligible_pores) == 0:
            raise ValueError("no annotated pore has a valid patch centre; cannot draw positives")
        pick = self.eligible_pores[rng.integers(len(self.eligible_pores), size=n)]
        k, r, c = pick[:, 0], pick[:, 1], pick[:, 2]
        h = np.array([self.samples[i].image.shape[0] for i in k])
        w = np.array([self.samples[i].image.shape[1] for i in k])
        # jitter uniformly within the part of the 7x7 box that keeps the patch inside the image
        r_lo = np.maximum(r - LABEL_RADIUS, BORDER)
        r_hi = np.minimum(r + LABEL_RADIUS, h - 1 - BORDER)
        c_lo = np.maximum(c - LABEL_RADIUS, BORDER)
        c_hi = np.minimum(c + LABEL_RADIUS, w - 1 - BORDER)
        rows = rng.integers(r_lo, r_hi + 1)
        cols = rng.integers(c_lo, c_hi + 1)
        return k, np.stack([rows, cols], axis=1)

    def _negatives(self, n: int, rng: np.random.Generator, max_rounds: int = 100):
        idx, ctrs = [], []
        need = n
        for _ in range(max_rounds):
            if need == 0:
                break
            m = max(2 * need, 16)
            k = rng.choice(len(self.samples), size=m, p=self.image_weights)
            u = rng.random((m, 2))
            for j in range(m):
                h, w = self.samples[k[j]].image.shape
                r = BORDER + int(u[j, 0] * (h - 2 * BORDER))
                c = BORDER + int(u[j, 1] * (w - 2 * BORDER))
                if not self.labels[k[j]][r, c]:
                    idx.append(k[j])
                    ctrs.append((r, c))
                    need -= 1
                    if need == 0:
                        break
        if need:
            raise ValueError("could not find negative patch centres (every valid centre is labelled positive)")
        return np.array(idx, dtype=np.int64), np.array(ctrs, dtype=np.int64).reshape(-1, 2)


def sample_batch(samples: list[Sample], batch_size: int = 256, pos_fraction: float = 0.5,
                 rng: np.random.Generator | None = None) -> PatchBatch:
    """One stratified batch; build a :class:`PatchSampler` directly to draw many."""
    rng = rng if rng is not None else np.random.default_rng()
    return PatchSampler(samples, pos_fraction).sample(batch_size, rng)


def validation_centers(samples: list[Sample], seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Fixed patch set per image: every positive centre plus as many seeded negatives.

    Returns one ``(centers, labels)`` pair per sample.
    """
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        h, w = s.image.shape
        valid = np.zeros((h, w), dtype=bool)
        valid[BORDER:h - BORDER, BORDER:w - BORDER] = True
        lab = label_map((h, w), s.pores)
        pos = np.argwhere(lab & valid)
        neg = np.argwhere(~lab & valid)
        n_neg = min(len(pos), len(neg)) if len(pos) else min(len(neg), 1)
        neg = neg[np.sort(rng.choice(len(neg), size=n_neg, replace=False))] if n_neg else neg[:0]
        centers = np.concatenate([pos, neg]).astype(np.int64)
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))]).astype(np.float32)
        out.append((centers, labels))
    return out
