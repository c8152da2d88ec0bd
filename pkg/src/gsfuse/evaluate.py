"""Geometric quality measures for a fused model against synthetic ground truth."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .model import GaussianModel
from .spatial import median_nn_spacing
from .synth import GroundTruth


def fused_sources(gt: GroundTruth, kept_a, kept_b) -> np.ndarray:
    """Scene-level source id of every fused primitive (A's kept, then B's)."""
    return np.concatenate([gt.source_a[np.asarray(kept_a, dtype=np.int64)],
                           gt.source_b[np.asarray(kept_b, dtype=np.int64)]])


def coverage(means, samples, eps: float) -> float:
    """Share of ground-truth structure samples with a fused mean within ``eps``."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if len(samples) == 0:
        return 1.0
    if len(means) == 0:
        return 0.0
    d, _ = cKDTree(np.asarray(means, dtype=np.float64)).query(samples)
    return float(np.mean(d <= eps))


def redundancy(means, sources, eps: float) -> float:
    """Share of fused primitives that have a same-source copy within ``eps``."""
    means = np.asarray(means, dtype=np.float64)
    sources = np.asarray(sources)
    if len(means) < 2:
        return 0.0
    pairs = cKDTree(means).query_pairs(eps, output_type="ndarray")
    same = pairs[sources[pairs[:, 0]] == sources[pairs[:, 1]]]
    flagged = np.zeros(len(means), dtype=bool)
    flagged[same.ravel()] = True
    return float(flagged.mean())


def detail_retention(gt: GroundTruth, kept_a, kept_b) -> float:
    """Share of detail-labelled primitives (from either map) that survive."""
    total = int(gt.detail_a.sum() + gt.detail_b.sum())
    if total == 0:
        return 1.0
    kept = int(gt.detail_a[np.asarray(kept_a, dtype=np.int64)].sum()
               + gt.detail_b[np.asarray(kept_b, dtype=np.int64)].sum())
    return kept / total


def evaluate_fusion(fused: GaussianModel, gt: GroundTruth, kept_a, kept_b,
                    eps_coverage: float | None = None, eps_overlap: float | None = None) -> dict:
    """Coverage, redundancy and detail retention in one report.

    ``eps_coverage`` defaults to twice the ground-truth sample spacing and
    ``eps_overlap`` to the median nearest-neighbour spacing of the fused means.
    """
    kept_a = np.asarray(kept_a, dtype=np.int64)
    kept_b = np.asarray(kept_b, dtype=np.int64)
    if len(kept_a) + len(kept_b) != len(fused):
        raise ValidationError("provenance lists do not match the fused model size")
    eps_cov = eps_coverage if eps_coverage is not None else 2.0 * gt.sample_spacing
    eps_ov = eps_overlap if eps_overlap is not None else median_nn_spacing(fused.means)
    src = fused_sources(gt, kept_a, kept_b)
    return {
        "coverage": coverage(fused.means, gt.structure_samples, eps_cov),
        "redundancy": redundancy(fused.means, src, eps_ov),
        "detail_retention": detail_retention(gt, kept_a, kept_b),
        "num_primitives": len(fused),
        "eps_coverage": float(eps_cov),
        "eps_overlap": float(eps_ov),
    }
