"""3D-GS primitives and sub-maps.

A :class:`GaussianModel` stores its primitives column-wise (one array per
attribute) so that every pipeline stage can work vectorized. Individual
:class:`GaussianPrimitive` records are materialized on demand by indexing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, ValidationError
from .transform import SimilarityTransform, matrix_to_quat, quat_multiply, quat_to_matrix

#: Lower bound on covariance eigenvalues, in m^2.
SPD_FLOOR = 1e-8


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def sh_coeff_count(degree: int) -> int:
    """Number of non-DC SH coefficient triples for a given degree."""
    return (degree + 1) ** 2 - 1


def sh_degree_for(count: int) -> int:
    for degree in range(0, 8):
        if sh_coeff_count(degree) == count:
            return degree
    raise ValueError(f"{count} SH triples does not match any degree")


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_dc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_rest: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def covariance(p: GaussianPrimitive) -> np.ndarray:
    """Covariance ``R diag(exp(log_scale))^2 R^T`` with eigenvalues floored at SPD_FLOOR."""
    return _covariances(np.asarray(p.rotation)[None], np.asarray(p.log_scale)[None])[0]


def _variances(log_scales: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(2.0 * np.asarray(log_scales, dtype=np.float64)), SPD_FLOOR)


def _covariances(rotations, log_scales) -> np.ndarray:
    R = quat_to_matrix(rotations)
    var = _variances(log_scales)
    return np.einsum("nij,nj,nkj->nik", R, var, R)


def _inverse_covariances(rotations, log_scales) -> np.ndarray:
    R = quat_to_matrix(rotations)
    var = _variances(log_scales)
    return np.einsum("nij,nj,nkj->nik", R, 1.0 / var, R)


def _as_array(x, shape_tail, name, n=-1):
    arr = np.array(x, dtype=np.float64)
    try:
        arr = arr.reshape((n,) + tuple(shape_tail))
    except ValueError as exc:
        raise ValidationError(f"{name}: expected trailing shape {shape_tail}, got {arr.shape}") from exc
    arr.flags.writeable = False
    return arr


class GaussianModel:
    """An ordered, immutable collection of 3D-GS primitives.

    Parameters
    ----------
    means, log_scales : (N, 3) arrays
    rotations : (N, 4) wxyz quaternions
    opacity_logits : (N,) array
    sh_dc : (N, 3) array, optional
    sh_rest : (N, K, 3) array, optional, ``K = (d+1)^2 - 1``
    """

    def __init__(self, means, log_scales, rotations, opacity_logits, sh_dc=None, sh_rest=None):
        self.means = _as_array(means, (3,), "means")
        n = len(self.means)
        self.log_scales = _as_array(log_scales, (3,), "log_scales")
        self.rotations = _as_array(rotations, (4,), "rotations")
        self.opacity_logits = _as_array(opacity_logits, (), "opacity_logits")
        self.sh_dc = _as_array(np.zeros((n, 3)) if sh_dc is None else sh_dc, (3,), "sh_dc")
        if sh_rest is None:
            sh_rest = np.zeros((n, 0, 3))
        sh_rest = np.asarray(sh_rest, dtype=np.float64)
        if sh_rest.ndim != 3 or sh_rest.shape[2] != 3 or sh_rest.shape[0] != n:
            raise ValidationError(f"sh_rest must have shape (N, K, 3), got {sh_rest.shape}")
        self.sh_degree = sh_degree_for(sh_rest.shape[1])
        self.sh_rest = _as_array(sh_rest, sh_rest.shape[1:], "sh_rest", n)
        for name in ("log_scales", "rotations", "opacity_logits", "sh_dc"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    @classmethod
    def from_primitives(cls, prims: Sequence[GaussianPrimitive]) -> "GaussianModel":
        if not prims:
            return cls.empty()
        return cls(
            [p.mean for p in prims],
            [p.log_scale for p in prims],
            [p.rotation for p in prims],
            [p.opacity_logit for p in prims],
            [p.sh_dc for p in prims],
            np.stack([np.asarray(p.sh_rest, dtype=np.float64).reshape(-1, 3) for p in prims]),
        )

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianModel":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, 3)), np.zeros((0, sh_coeff_count(sh_degree), 3)),
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.means[i].copy(),
            self.log_scales[i].copy(),
            self.rotations[i].copy(),
            float(self.opacity_logits[i]),
            self.sh_dc[i].copy(),
            self.sh_rest[i].copy(),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, GaussianModel):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, a), getattr(other, a))
            for a in ("means", "log_scales", "rotations", "opacity_logits", "sh_dc", "sh_rest")
        )

    __hash__ = None

    def __repr__(self) -> str:
        return f"GaussianModel(n={len(self)}, sh_degree={self.sh_degree})"

    @cached_property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @cached_property
    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(3)
        w = self.opacities
        if w.sum() <= 0:
            return self.means.mean(axis=0)
        return (w[:, None] * self.means).sum(axis=0) / w.sum()

    @cached_property
    def radius(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.means - self.centroid, axis=1).max())

    @cached_property
    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations)

    @cached_property
    def covariances(self) -> np.ndarray:
        return _covariances(self.rotations, self.log_scales)

    @cached_property
    def inverse_covariances(self) -> np.ndarray:
        return _inverse_covariances(self.rotations, self.log_scales)

    @cached_property
    def variances(self) -> np.ndarray:
        """Floored principal variances, one row per primitive (unsorted)."""
        return _variances(self.log_scales)

    def require_nonempty(self, what: str = "operation") -> None:
        if len(self) == 0:
            raise DegenerateInputError(f"{what} needs a non-empty Gaussian model")

    def subset(self, index) -> "GaussianModel":
        index = np.asarray(index)
        return GaussianModel(
            self.means[index], self.log_scales[index], self.rotations[index],
            self.opacity_logits[index], self.sh_dc[index], self.sh_rest[index],
        )

    def with_sh_degree(self, degree: int) -> "GaussianModel":
        """Zero-pad (or truncate) higher-order SH to ``degree``."""
        k = sh_coeff_count(degree)
        rest = np.zeros((len(self), k, 3))
        m = min(k, self.sh_rest.shape[1])
        rest[:, :m] = self.sh_rest[:, :m]
        return GaussianModel(self.means, self.log_scales, self.rotations,
                             self.opacity_logits, self.sh_dc, rest)

    def validate(self) -> None:
        """Raise :class:`ValidationError` naming the first offending primitive."""
        for name in ("means", "log_scales", "rotations", "opacity_logits", "sh_dc", "sh_rest"):
            arr = getattr(self, name).reshape(len(self), -1)
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                raise ValidationError(f"primitive {int(np.argmax(bad))}: non-finite {name}")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms == 0):
            raise ValidationError(f"primitive {int(np.argmin(norms))}: zero rotation quaternion")
        scales = np.exp(self.log_scales)
        bad = ~np.all(np.isfinite(scales) & (scales > 0), axis=1)
        if bad.any():
            raise ValidationError(f"primitive {int(np.argmax(bad))}: scale overflows")
        var = np.exp(2.0 * self.log_scales)
        bad = ~np.all(np.isfinite(var), axis=1)
        if bad.any():
            raise ValidationError(f"primitive {int(np.argmax(bad))}: covariance not finite after flooring")


def concatenate(models: Sequence[GaussianModel]) -> GaussianModel:
    """Stack models; SH is zero-padded to the highest degree present."""
    degree = max(m.sh_degree for m in models)
    models = [m if m.sh_degree == degree else m.with_sh_degree(degree) for m in models]
    return GaussianModel(
        np.concatenate([m.means for m in models]),
        np.concatenate([m.log_scales for m in models]),
        np.concatenate([m.rotations for m in models]),
        np.concatenate([m.opacity_logits for m in models]),
        np.concatenate([m.sh_dc for m in models]),
        np.concatenate([m.sh_rest for m in models]),
    )


def apply_transform(model: GaussianModel, T: SimilarityTransform) -> GaussianModel:
    """Map a sub-map through ``x -> s R x + t``.

    Orientations are left-composed with ``R`` and every log-scale is shifted
    by ``ln s``. Opacity and SH coefficients are carried over unchanged.
    """
    if len(model) == 0:
        return model
    q = matrix_to_quat(T.rotation)
    rotations = quat_multiply(q, model.rotations)
    # keep the stored norm of each quaternion
    rotations *= (np.linalg.norm(model.rotations, axis=1) / np.linalg.norm(rotations, axis=1))[:, None]
    return GaussianModel(
        T.apply(model.means),
        model.log_scales + math.log(T.scale),
        rotations,
        model.opacity_logits,
        model.sh_dc,
        model.sh_rest,
    )
