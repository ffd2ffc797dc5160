"""Pore detection evaluation protocol.

A detection ``d`` is a true detection iff its nearest ground-truth pore ``g``
also has ``d`` as its nearest detection (mutual nearest neighbours under the
Euclidean distance, no distance cap). Everything else is a false detection.
Points within 8 px of the image border are dropped from both sets first.
Counts are pooled over all images before rates are computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Sample
from .detect import Detections, ProbabilityMap, infer_probability_map, postprocess, run_postprocessing
from .model import BORDER, PoreModel

PROB_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
NMS_GRID = tuple(round(0.1 * k, 1) for k in range(0, 8))


def exclude_border(points: np.ndarray, image_dims: tuple[int, int], margin: int = BORDER) -> np.ndarray:
    """Boolean mask of points with ``margin <= row < M - margin`` and ``margin <= col < N - margin``."""
    pts = np.asarray(points).reshape(-1, 2)
    m, n = image_dims
    return (pts[:, 0] >= margin) & (pts[:, 0] < m - margin) & (pts[:, 1] >= margin) & (pts[:, 1] < n - margin)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (detection index, ground-truth index)
    n_detections: int
    n_ground_truth: int

    @property
    def true_detections(self) -> int:
        return len(self.pairs)

    @property
    def false_detections(self) -> int:
        return self.n_detections - len(self.pairs)

    @property
    def undetected(self) -> int:
        return self.n_ground_truth - len(self.pairs)


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of each ``src`` point's nearest neighbour; ties go to the smallest (row, col)."""
    order = np.lexsort((dst[:, 1], dst[:, 0]))
    d = dst[order]
    diff = src[:, None, :] - d[None, :, :]
    dist2 = (diff * diff).sum(axis=2)  # exact integer distances, so ties are exact
    return order[dist2.argmin(axis=1)]


def match_detections(detections: np.ndarray, ground_truth: np.ndarray) -> MatchResult:
    """Mutual nearest-neighbour matching of detection and ground-truth coordinates."""
    d = np.asarray(detections, dtype=np.int64).reshape(-1, 2)
    g = np.asarray(ground_truth, dtype=np.int64).reshape(-1, 2)
    if len(d) == 0 or len(g) == 0:
        return MatchResult([], len(d), len(g))
    nearest_g = _nearest(d, g)
    nearest_d = _nearest(g, d)
    pairs = [(i, int(j)) for i, j in enumerate(nearest_g) if nearest_d[j] == i]
    return MatchResult(pairs, len(d), len(g))


@dataclass(frozen=True)
class Metrics:
    tdr: float
    fdr: float
    f_score: float


def f_score(tdr: float, fdr: float) -> float:
    precision = 1.0 - fdr
    if precision + tdr == 0:
        return 0.0
    return 2.0 * precision * tdr / (precision + tdr)


@dataclass
class Counts:
    true_detections: int = 0
    detections: int = 0
    ground_truth: int = 0

    def add(self, match: MatchResult) -> "Counts":
        return Counts(self.true_detections + match.true_detections,
                      self.detections + match.n_detections,
                      self.ground_truth + match.n_ground_truth)

    @property
    def false_detections(self) -> int:
        return self.detections - self.true_detections


class UndefinedRecallError(ValueError):
    """TDR is undefined when there is no ground truth to detect."""


def compute_metrics(true_detections: int, n_detections: int, n_ground_truth: int) -> Metrics:
    if n_ground_truth <= 0:
        raise UndefinedRecallError("no ground-truth pores: TDR is undefined")
    tdr = true_detections / n_ground_truth
    fdr = (n_detections - true_detections) / n_detections if n_detections else 0.0
    return Metrics(tdr, fdr, f_score(tdr, fdr))


def metrics_from_match(match: MatchResult) -> Metrics:
    return compute_metrics(match.true_detections, match.n_detections, match.n_ground_truth)


@dataclass
class ImageResult:
    name: str
    match: MatchResult

    @property
    def metrics(self) -> Metrics | None:
        if self.match.n_ground_truth == 0:
            return None
        return metrics_from_match(self.match)


@dataclass
class Evaluation:
    images: list[ImageResult] = field(default_factory=list)

    @property
    def counts(self) -> Counts:
        total = Counts()
        for r in self.images:
            total = total.add(r.match)
        return total

    def pooled(self) -> Metrics:
        """Micro-average: pool counts over images, then divide."""
        c = self.counts
        return compute_metrics(c.true_detections, c.detections, c.ground_truth)

    def macro(self) -> Metrics:
        """Mean of per-image TDR and FDR (images without ground truth skipped); F from the means."""
        per = [m for m in (r.metrics for r in self.images) if m is not None]
        if not per:
            raise UndefinedRecallError("no image has ground-truth pores")
        tdr = float(np.mean([m.tdr for m in per]))
        fdr = float(np.mean([m.fdr for m in per]))
        return Metrics(tdr, fdr, f_score(tdr, fdr))


def evaluate_image(detections: Detections | np.ndarray, ground_truth: np.ndarray,
                   image_dims: tuple[int, int], name: str = "", margin: int = BORDER) -> ImageResult:
    d = detections.coords if isinstance(detections, Detections) else np.asarray(detections).reshape(-1, 2)
    g = np.asarray(ground_truth).reshape(-1, 2)
    d = d[exclude_border(d, image_dims, margin)]
    g = g[exclude_border(g, image_dims, margin)]
    return ImageResult(name, match_detections(d, g))


def evaluate_detections(detections: list[Detections], samples: list[Sample]) -> Evaluation:
    if len(detections) != len(samples):
        raise ValueError(f"{len(detections)} detection sets for {len(samples)} images")
    return Evaluation([evaluate_image(d, s.pores, s.image.shape, s.name) for d, s in zip(detections, samples)])


def evaluate_model(model: PoreModel, samples: list[Sample], post: str = "proposed", p_t: float = 0.6,
                   i_t: float = 0.0, prob_maps: list[ProbabilityMap] | None = None
                   ) -> tuple[Evaluation, list[Detections]]:
    if prob_maps is None:
        prob_maps = [infer_probability_map(model, s.image) for s in samples]
    dets = [run_postprocessing(pm, post, p_t, i_t) for pm in prob_maps]
    return evaluate_detections(dets, samples), dets


@dataclass
class GridCell:
    p_t: float
    i_t: float
    metrics: Metrics


@dataclass
class GridResult:
    p_t: float
    i_t: float
    best: Metrics
    cells: list[GridCell]


def grid_search(model: PoreModel | None, samples: list[Sample], prob_grid=PROB_GRID, nms_grid=NMS_GRID,
                prob_maps: list[ProbabilityMap] | None = None) -> GridResult:
    """Pick ``(p_t, i_t)`` maximising pooled F-score on ``samples``.

    Ties prefer the larger ``p_t``, then the smaller ``i_t``. Precomputed
    ``prob_maps`` may be passed instead of a model.
    """
    if not samples:
        raise ValueError("grid search needs at least one validation image")
    if prob_maps is None:
        prob_maps = [infer_probability_map(model, s.image) for s in samples]
    cells = []
    for p_t in prob_grid:
        for i_t in nms_grid:
            dets = [postprocess(pm, p_t, i_t) for pm in prob_maps]
            cells.append(GridCell(p_t, i_t, evaluate_detections(dets, samples).pooled()))
    best = max(cells, key=lambda c: (c.metrics.f_score, c.p_t, -c.i_t))
    return GridResult(best.p_t, best.i_t, best.metrics, cells)


def format_grid(result: GridResult) -> str:
    lines = ["p_t\ti_t\ttdr\tfdr\tf_score"]
    for c in result.cells:
        m = c.metrics
        lines.append(f"{c.p_t:.1f}\t{c.i_t:.1f}\t{m.tdr:.6f}\t{m.fdr:.6f}\t{m.f_score:.6f}")
    return "\n".join(lines) + "\n"


def format_report(evaluation: Evaluation, averaging: str = "micro") -> str:
    """Per-image and pooled key=value report."""
    lines = []
    for r in evaluation.images:
        m = r.match
        line = (f"image={r.name} true={m.true_detections} false={m.false_detections} "
                f"undetected={m.undetected}")
        met = r.metrics
        if met is not None:
            line += f" tdr={met.tdr:.6f} fdr={met.fdr:.6f} f_score={met.f_score:.6f}"
        lines.append(line)
    pooled = evaluation.pooled() if averaging == "micro" else evaluation.macro()
    c = evaluation.counts
    lines.append(f"averaging={averaging}")
    lines.append(f"true_detections={c.true_detections}")
    lines.append(f"false_detections={c.false_detections}")
    lines.append(f"ground_truth={c.ground_truth}")
    lines.append(f"tdr={pooled.tdr:.6f}")
    lines.append(f"fdr={pooled.fdr:.6f}")
    lines.append(f"f_score={pooled.f_score:.6f}")
    return "\n".join(lines) + "\n"
