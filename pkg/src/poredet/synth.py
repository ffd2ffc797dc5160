"""Deterministic synthetic fingerprints with exact pore ground truth.

Ridges are dark sinusoids whose phase is bent by a smooth random field, so
their orientation drifts across the image. Pores are bright blobs centred
on ridge centre lines, at least 8 px (Chebyshev) from each other and from
the border so their 7x7 label boxes never overlap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import save_annotations, save_image
from .model import BORDER

MIN_PORE_SPACING = 8


class InfeasiblePoresError(ValueError):
    """Not enough ridge positions to place the requested pores under the spacing rule."""


@dataclass
class SynthConfig:
    height: int = 128
    width: int = 128
    ridge_period: float = 12.0
    pore_count: int = 80
    pore_radius: tuple[float, float] = (1.5, 2.5)  # drawn uniformly per pore
    noise_sigma: float = 0.06
    warp_amplitude: float = 8.0  # phase displacement of the orientation field, pixels
    warp_smoothness: float = 24.0  # gaussian sigma of the random field, pixels
    seed: int = 0

    def validate(self) -> None:
        if self.height < 64 or self.width < 64:
            raise ValueError(f"synthetic images must be at least 64x64, got {self.height}x{self.width}")
        lo, hi = self.pore_radius
        if not 1.0 <= lo <= hi <= 3.0:
            raise ValueError(f"pore radius range must lie within [1, 3], got {self.pore_radius}")
        if self.pore_count < 0:
            raise ValueError("pore_count must be nonnegative")
        if self.ridge_period <= 2 or self.noise_sigma < 0:
            raise ValueError("ridge_period must exceed 2 px and noise_sigma must be nonnegative")


def _smooth_field(shape, sigma, rng) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def ridge_pattern(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Ridge phase in periods and ridge-centre closeness in [0, 1] (1 on the centre line)."""
    h, w = cfg.height, cfg.width
    theta = rng.uniform(0, np.pi)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    warp = cfg.warp_amplitude * _smooth_field((h, w), cfg.warp_smoothness, rng)
    phase = (rows * np.sin(theta) + cols * np.cos(theta) + warp) / cfg.ridge_period
    closeness = 0.5 * (1.0 + np.cos(2 * np.pi * phase))
    return phase, closeness


def _place_pores(closeness: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    h, w = closeness.shape
    if count == 0:
        return np.zeros((0, 2), dtype=np.int64)
    inner = np.zeros_like(closeness, dtype=bool)
    inner[BORDER:h - BORDER, BORDER:w - BORDER] = True
    candidates = np.argwhere(inner & (closeness > 0.95))
    candidates = candidates[rng.permutation(len(candidates))]
    taken = np.zeros((h, w), dtype=bool)
    reach = MIN_PORE_SPACING - 1
    chosen = []
    for r, c in candidates:
        if taken[max(r - reach, 0):r + reach + 1, max(c - reach, 0):c + reach + 1].any():
            continue
        taken[r, c] = True
        chosen.append((r, c))
        if len(chosen) == count:
            return np.array(chosen, dtype=np.int64)
    raise InfeasiblePoresError(
        f"placed only {len(chosen)} of {count} pores after trying all {len(candidates)} ridge positions")


def generate(cfg: SynthConfig | None = None, rng: np.random.Generator | None = None
             ) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic fingerprint: ``(image, pores)`` with image quantised to 8 bits in [0, 1]."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    _, closeness = ridge_pattern(cfg, rng)
    valley = rng.uniform(0.65, 0.85)
    ridge = rng.uniform(0.15, 0.35)
    clean = valley - (valley - ridge) * closeness

    pores = _place_pores(closeness, cfg.pore_count, rng)
    rows, cols = np.mgrid[0:cfg.height, 0:cfg.width]
    peak = valley + 0.1
    for r, c in pores:
        radius = rng.uniform(*cfg.pore_radius) + 0.5
        r0, r1 = max(r - 4, 0), min(r + 5, cfg.height)
        c0, c1 = max(c - 4, 0), min(c + 5, cfg.width)
        dist2 = (rows[r0:r1, c0:c1] - r) ** 2 + (cols[r0:r1, c0:c1] - c) ** 2
        profile = np.clip(1.0 - dist2 / radius ** 2, 0.0, None)
        base = clean[r, c]
        clean[r0:r1, c0:c1] = np.maximum(clean[r0:r1, c0:c1], base + (peak - base) * profile)

    for r, c in pores:
        win = clean[max(r - 2, 0):r + 3, max(c - 2, 0):c + 3]
        if np.count_nonzero(win >= clean[r, c]) != 1:
            raise AssertionError(f"pore ({r}, {c}) is not the unique 5x5 intensity maximum")

    noisy = clean + cfg.noise_sigma * rng.standard_normal(clean.shape)
    image = np.rint(np.clip(noisy, 0.0, 1.0) * 255.0) / 255.0
    return image.astype(np.float32), pores


def generate_dataset(out_dir: str | Path, n_images: int = 30, cfg: SynthConfig | None = None,
                     seed: int | None = None) -> list[Path]:
    """Write ``n_images`` PGM + annotation pairs with zero-padded names; returns the image paths."""
    if n_images < 3:
        raise ValueError(f"a dataset needs at least 3 images, got {n_images}")
    cfg = cfg or SynthConfig()
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(n_images - 1)))
    paths = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(n_images)):
        image, pores = generate(cfg, np.random.default_rng(child))
        stem = f"{i:0{width}d}"
        save_image(out_dir / f"{stem}.pgm", image)
        save_annotations(out_dir / f"{stem}.txt", pores)
        paths.append(out_dir / f"{stem}.pgm")
    return paths
