"""Clothing masks: the pixel mask, the clothing-masked image and the
feature-resolution mask used to gate clothing features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import RegionVocabulary, Sample
from .errors import ValidationError

DEFAULT_FILL = 0.0


@dataclass(frozen=True, eq=False)
class ClothingMask:
    pixel: np.ndarray
    feature: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.feature.shape


def clothing_region_mask(parsing: np.ndarray, vocab: RegionVocabulary) -> np.ndarray:
    """1 where the region label is a clothing category, else 0."""
    parsing = np.asarray(parsing)
    unknown = np.setdiff1d(np.unique(parsing), np.fromiter(vocab.codes, dtype=np.int64))
    if unknown.size:
        raise ValidationError(f"unknown region codes in parsing: {unknown.tolist()}")
    clothing = np.fromiter(sorted(vocab.clothing_set), dtype=np.int64)
    return np.isin(parsing, clothing).astype(np.uint8)


def clothing_masked_image(sample: Sample, vocab: RegionVocabulary, fill: float = DEFAULT_FILL) -> np.ndarray:
    mask = clothing_region_mask(sample.parsing, vocab).astype(bool)
    out = sample.image.copy()
    out[mask] = fill
    return out


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-average a binary mask onto a coarser HxW grid.

    Output cell (i, j) covers source rows [i*H/h, (i+1)*H/h) and likewise for
    columns; partially covered source pixels count by their overlap fraction,
    so the result is exact for any pair of sizes.
    """
    h, w = target
    if h < 1 or w < 1:
        raise ValueError(f"target dimensions must be >= 1, got {target}")
    mask = np.asarray(mask, dtype=np.float64)
    rows = _overlap_matrix(mask.shape[0], h)
    cols = _overlap_matrix(mask.shape[1], w)
    return np.clip(rows @ mask @ cols.T, 0.0, 1.0)


def _overlap_matrix(src: int, dst: int) -> np.ndarray:
    # weights[i, k]: fraction of output cell i covered by source pixel k
    edges = np.arange(dst + 1) * (src / dst)
    k = np.arange(src)
    lo = np.maximum(edges[:-1, None], k[None, :])
    hi = np.minimum(edges[1:, None], k[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) * (dst / src)


def build_clothing_mask(parsing: np.ndarray, vocab: RegionVocabulary, target: tuple[int, int]) -> ClothingMask:
    pixel = clothing_region_mask(parsing, vocab)
    return ClothingMask(pixel, downsample_mask(pixel, target))
