"""Similarity metrics and losses: normalized mutual information, Dice, InfoNCE.

NMI follows Studholme's bounded form (H(A)+H(B))/H(A,B) over a joint histogram
with equal-width bins on [0, 1]; it is the registration objective. Dice is the
segmentation overlap score. InfoNCE (NT-Xent) is provided as a standalone
numerical primitive so trained-model exports can be checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_image import Image2D, Image3D, SegmentationMask2D

DEFAULT_BINS = 64


def _as_array(img) -> np.ndarray:
    if isinstance(img, Image2D):
        return img.pixels
    if isinstance(img, Image3D):
        return img.voxels
    return np.asarray(img, dtype=np.float64)


def joint_histogram(a, b, bins: int = DEFAULT_BINS, mask=None) -> np.ndarray:
    """Joint count histogram over equal-width bins on [0, 1]; counts are exact ints."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ValueError(f"image dims differ: {av.shape} vs {bv.shape}")
    av, bv = av.ravel(), bv.ravel()
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        av, bv = av[m], bv[m]
    ai = np.minimum((av * bins).astype(np.int64), bins - 1)
    bi = np.minimum((bv * bins).astype(np.int64), bins - 1)
    counts = np.bincount(ai * bins + bi, minlength=bins * bins)
    return counts.reshape(bins, bins)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(a, b, bins: int = DEFAULT_BINS, mask=None) -> float:
    """Normalized mutual information (H(A)+H(B))/H(A,B), in (1, 2].

    ``mask`` restricts the histogram to a pixel subset (registration passes the
    warped moving image's support). Constant inputs have zero marginal entropy
    and raise.
    """
    counts = joint_histogram(a, b, bins, mask)
    total = counts.sum()
    if total == 0:
        raise ValueError("degenerate entropy: no samples in histogram")
    p = counts / total
    ha = _entropy(p.sum(axis=1))
    hb = _entropy(p.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        raise ValueError("degenerate entropy: constant image")
    return (ha + hb) / _entropy(p.ravel())


def dice(a, b) -> float:
    """Dice overlap 2|A∩B|/(|A|+|B|); two empty masks score 1.0."""
    av = a.bits if isinstance(a, SegmentationMask2D) else np.asarray(a)
    bv = b.bits if isinstance(b, SegmentationMask2D) else np.asarray(b)
    if av.shape != bv.shape:
        raise ValueError(f"mask dims differ: {av.shape} vs {bv.shape}")
    av, bv = av.astype(bool), bv.astype(bool)
    denom = int(av.sum()) + int(bv.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((av & bv).sum()) / denom


def dice_report_row(name: str, mean: float, sd: float) -> str:
    """One text row of the Dice report, e.g. 'model vs gt*: mean 0.4948, SD 0.2512'."""
    return f"{name}: mean {mean:.4f}, SD {sd:.4f}"


@dataclass(frozen=True)
class FeatureBatch:
    """2N embedding vectors where rows 2k and 2k+1 form the positive pair."""

    vectors: np.ndarray
    temperature: float

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[0] % 2 != 0:
            raise ValueError("need an even number (>= 2) of feature vectors")
        if not np.isfinite(v).all():
            raise ValueError("feature vectors must be finite")
        if (np.linalg.norm(v, axis=1) == 0).any():
            raise ValueError("zero feature vector")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def num_pairs(self) -> int:
        return self.vectors.shape[0] // 2


def info_nce(batch: FeatureBatch) -> tuple[float, np.ndarray]:
    """NT-Xent loss over a paired feature batch.

    Per anchor i with positive j: -log exp(sim(i,j)/t) / sum_{k != i} exp(sim(i,k)/t),
    cosine similarity throughout; returns (mean over all 2N anchors, per-anchor).
    """
    v = batch.vectors
    n2 = v.shape[0]
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    logits = (u @ u.T) / batch.temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.arange(n2) ^ 1  # pair-adjacent: 2k <-> 2k+1
    row_max = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - row_max).sum(axis=1)) + row_max[:, 0]
    per_anchor = lse - logits[np.arange(n2), pos]
    return float(per_anchor.mean()), per_anchor
