"""Turning FCN probability maps into pore detections.

Two post-processing routes are provided:

* ``proposed``: threshold the map at ``p_t``, put a 7x7 box on every
  surviving pixel and merge overlapping boxes with greedy NMS;
* ``traditional``: binarise at 0.5 and collapse every 8-connected component
  to its centroid.

All coordinates are 0-indexed ``(row, col)`` in image space.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import BORDER, PoreModel

BOX_HALF = 3
BOX_SIZE = 2 * BOX_HALF + 1
DEFAULT_PROB_THRESHOLD = 0.6
DEFAULT_NMS_THRESHOLD = 0.0


@dataclass
class ProbabilityMap:
    """FCN output; ``values[i, j]`` is the pore probability of image pixel ``(i + 8, j + 8)``."""

    values: np.ndarray
    offset: int = BORDER

    @property
    def image_shape(self) -> tuple[int, int]:
        h, w = self.values.shape
        return h + 2 * self.offset, w + 2 * self.offset

    def padded(self) -> np.ndarray:
        """The map zero-padded back to image size."""
        return np.pad(self.values, self.offset)


@dataclass
class Detections:
    """Scored pore centres (also used for 7x7 boxes, which are fully described by their centre)."""

    rows: np.ndarray
    cols: np.ndarray
    scores: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.int64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.int64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not len(self.rows) == len(self.cols) == len(self.scores):
            raise ValueError("rows, cols and scores must have equal length")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def coords(self) -> np.ndarray:
        return np.stack([self.rows, self.cols], axis=1)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    def take(self, index) -> "Detections":
        return Detections(self.rows[index], self.cols[index], self.scores[index])


def infer_probability_map(model: PoreModel, image: np.ndarray) -> ProbabilityMap:
    probs = model.forward(np.asarray(image)[None], mode="infer")
    return ProbabilityMap(probs[0, :, :, 0])


def threshold_to_boxes(prob_map: ProbabilityMap, p_t: float) -> Detections:
    """One 7x7 box per map cell with probability strictly above ``p_t``."""
    if not 0.0 < p_t < 1.0:
        raise ValueError(f"p_t must lie in (0, 1), got {p_t}")
    r, c = np.nonzero(prob_map.values > p_t)
    return Detections(r + prob_map.offset, c + prob_map.offset, prob_map.values[r, c])


def box_iou(r1, c1, r2, c2) -> np.ndarray:
    """Intersection over union of 7x7 boxes centred at the given pixels."""
    ih = np.maximum(0, BOX_SIZE - np.abs(np.asarray(r1) - np.asarray(r2)))
    iw = np.maximum(0, BOX_SIZE - np.abs(np.asarray(c1) - np.asarray(c2)))
    inter = ih * iw
    return inter / (2 * BOX_SIZE * BOX_SIZE - inter)


def score_order(dets: Detections) -> np.ndarray:
    """Descending score; ties broken by (row, col) ascending."""
    return np.lexsort((dets.cols, dets.rows, -dets.scores))


def nms(boxes: Detections, i_t: float = DEFAULT_NMS_THRESHOLD) -> Detections:
    """Greedy non-maximum suppression over 7x7 boxes.

    Boxes are visited by descending score and kept when their IoU with every
    already kept box is at most ``i_t``; ``i_t = 0`` therefore discards any
    box that touches a kept one.
    """
    if not 0.0 <= i_t < 1.0:
        raise ValueError(f"i_t must lie in [0, 1), got {i_t}")
    if len(boxes) == 0:
        return Detections.empty()
    order = score_order(boxes)
    reach = BOX_SIZE - 1  # boxes further apart than this on either axis cannot intersect
    r0, c0 = boxes.rows.min() - reach, boxes.cols.min() - reach
    grid = np.zeros((boxes.rows.max() - r0 + reach + 1, boxes.cols.max() - c0 + reach + 1), dtype=bool)
    kept = []
    for k in order:
        r, c = boxes.rows[k] - r0, boxes.cols[k] - c0
        window = grid[r - reach:r + reach + 1, c - reach:c + reach + 1]
        if window.any():
            if i_t == 0.0:
                continue
            dr, dc = np.nonzero(window)
            if np.any(box_iou(dr, dc, reach, reach) > i_t):
                continue
        grid[r, c] = True
        kept.append(k)
    return boxes.take(np.array(kept, dtype=np.int64))


def detect_pores(model: PoreModel, image: np.ndarray, p_t: float = DEFAULT_PROB_THRESHOLD,
                 i_t: float = DEFAULT_NMS_THRESHOLD) -> Detections:
    return postprocess(infer_probability_map(model, image), p_t, i_t)


def postprocess(prob_map: ProbabilityMap, p_t: float = DEFAULT_PROB_THRESHOLD,
                i_t: float = DEFAULT_NMS_THRESHOLD) -> Detections:
    return nms(threshold_to_boxes(prob_map, p_t), i_t)


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def round_half_down(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """Nearest integer to num/den (positive den), ties toward the smaller value, in exact integer arithmetic."""
    num = np.asarray(num, dtype=np.int64)
    den = np.asarray(den, dtype=np.int64)
    return (2 * num + den - 1) // (2 * den)


def traditional_postprocess(prob_map: ProbabilityMap, threshold: float = 0.5) -> Detections:
    """Binarise at ``threshold`` and keep one detection per 8-connected component.

    The detection sits at the component centroid (rounded, ties toward the
    smaller index) and is scored by the component's maximum probability.
    """
    values = prob_map.values
    labels, n = ndimage.label(values > threshold, structure=_EIGHT_CONNECTED)
    if n == 0:
        return Detections.empty()
    index = np.arange(1, n + 1)
    rr, cc = np.indices(values.shape)
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    sum_r = np.bincount(labels.ravel(), weights=rr.ravel(), minlength=n + 1)[1:].astype(np.int64)
    sum_c = np.bincount(labels.ravel(), weights=cc.ravel(), minlength=n + 1)[1:].astype(np.int64)
    scores = ndimage.maximum(values, labels, index)
    rows = round_half_down(sum_r, counts) + prob_map.offset
    cols = round_half_down(sum_c, counts) + prob_map.offset
    return Detections(rows, cols, np.asarray(scores))


POSTPROCESSING = ("proposed", "traditional")


def run_postprocessing(prob_map: ProbabilityMap, mode: str = "proposed", p_t: float = DEFAULT_PROB_THRESHOLD,
                       i_t: float = DEFAULT_NMS_THRESHOLD) -> Detections:
    if mode == "proposed":
        return postprocess(prob_map, p_t, i_t)
    if mode == "traditional":
        return traditional_postprocess(prob_map)
    raise ValueError(f"unknown post-processing {mode!r}; choose from {POSTPROCESSING}")


# -- detection files: one "row col score" line per detection, 1-indexed ----


def format_detections(dets: Detections) -> str:
    return "".join(f"{r + 1} {c + 1} {s:.6f}\n" for r, c, s in zip(dets.rows, dets.cols, dets.scores))


def parse_detections(text: str, source: str = "<detections>") -> Detections:
    """Read "row col [score]" lines (1-indexed). A missing score reads as 1."""
    rows, cols, scores = [], [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) not in (2, 3):
            raise ValueError(f"{source}:{lineno}: expected 'row col [score]', got {line.strip()!r}")
        try:
            r, c = int(fields[0]), int(fields[1])
            s = float(fields[2]) if len(fields) == 3 else 1.0
        except ValueError:
            raise ValueError(f"{source}:{lineno}: expected 'row col [score]', got {line.strip()!r}") from None
        if r < 1 or c < 1:
            raise ValueError(f"{source}:{lineno}: coordinates are 1-indexed, got {r} {c}")
        rows.append(r - 1)
        cols.append(c - 1)
        scores.append(s)
    return Detections(rows, cols, scores)


def save_detections(path: str | Path, dets: Detections) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(format_detections(dets), encoding="utf-8")
    tmp.replace(path)


def load_detections(path: str | Path) -> Detections:
    path = Path(path)
    return parse_detections(path.read_text(encoding="utf-8"), source=str(path))
