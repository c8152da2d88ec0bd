"""Ellipsoid-aware kernel point convolution over Gaussian primitives.

Each primitive gathers its ``k`` nearest neighbours under its own
Mahalanobis metric, weights them against a fixed set of kernel points with
``exp(-0.5 d^T inv(Sigma_i) d)``, and mixes the weighted features with one
matrix per kernel point. The weights are seeded random matrices, not trained.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import ConfigError, FormatError
from .model import GaussianModel, GaussianPrimitive, covariance
from .spatial import median_nn_spacing, radius_graph

KERNEL_FRAMES = ("gaussian", "world")
RADIUS_MODES = ("spacing", "extent")
_DUMP_MAGIC = b"GSFF"


@dataclass
class ConvConfig:
    """Convolution hyperparameters.

    ``kernel_radius=None`` resolves to twice the median nearest-neighbour
    spacing of the model being convolved (``radius_mode="spacing"``) or to
    twice the median largest Gaussian standard deviation
    (``radius_mode="extent"``, insensitive to noise on the means).
    ``kernel_frame`` selects whether kernel points are laid out in each
    Gaussian's own rotation frame or in world axes.
    ``covariance_inflation`` adds ``(c * kernel_radius)^2 I`` to every
    covariance before convolving, which keeps thin Gaussians from turning
    small position noise into large weight changes.
    """

    num_neighbors: int = 16
    mahalanobis_radius: float = 3.0
    kernel_count: int = 15
    kernel_radius: float | None = None
    layer_dims: tuple = (16, 16)
    weight_seed: int = 0
    kernel_frame: str = "gaussian"
    detail_concat: bool = False
    covariance_inflation: float = 0.0
    radius_mode: str = "spacing"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.num_neighbors < 1:
            raise ConfigError("num_neighbors must be >= 1")
        if self.kernel_count < 1:
            raise ConfigError("kernel_count must be >= 1")
        if self.mahalanobis_radius <= 0:
            raise ConfigError("mahalanobis_radius must be positive")
        if self.kernel_radius is not None and not self.kernel_radius > 0:
            raise ConfigError("kernel_radius must be positive")
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ConfigError("need at least two layers with positive widths")
        if self.kernel_frame not in KERNEL_FRAMES:
            raise ConfigError(f"kernel_frame must be one of {KERNEL_FRAMES}")
        if self.radius_mode not in RADIUS_MODES:
            raise ConfigError(f"radius_mode must be one of {RADIUS_MODES}")
        if self.covariance_inflation < 0:
            raise ConfigError("covariance_inflation must be >= 0")

    def resolved_kernel_radius(self, model: GaussianModel) -> float:
        if self.kernel_radius is not None:
            return float(self.kernel_radius)
        if self.radius_mode == "extent":
            s = 2.0 * float(np.median(np.sqrt(model.variances.max(axis=1))))
        else:
            s = 2.0 * median_nn_spacing(model.means)
        return s if s > 0 else 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        return d


@dataclass(frozen=True)
class KernelLayout:
    points: np.ndarray
    radius: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ConfigError("kernel layout needs at least one point")
        if np.linalg.norm(pts, axis=1).max() > self.radius * (1 + 1e-12):
            raise ConfigError("kernel points must lie inside the kernel sphere")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def rotated(self, R) -> "KernelLayout":
        return KernelLayout(self.points @ np.asarray(R, dtype=np.float64).T, self.radius)


def fibonacci_layout(count: int, radius: float) -> KernelLayout:
    """Origin plus ``count - 1`` points on a Fibonacci sphere of radius ``0.75 * radius``."""
    n = count - 1
    pts = [np.zeros(3)]
    if n > 0:
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        r = np.sqrt(1.0 - z * z)
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        pts.append(0.75 * radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))
    return KernelLayout(np.concatenate([p.reshape(-1, 3) for p in pts]), radius)


# ---------------------------------------------------------------- scalar forms

def mahalanobis_dist(center: GaussianPrimitive, other_mean) -> float:
    d = np.asarray(other_mean, dtype=np.float64) - center.mean
    return float(np.sqrt(d @ np.linalg.solve(covariance(center), d)))


def kernel_weight(center: GaussianPrimitive, neighbor_mean, kernel_point) -> float:
    d = np.asarray(neighbor_mean, dtype=np.float64) - center.mean - np.asarray(kernel_point, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(covariance(center), d)))


# ---------------------------------------------------------------- batched

def neighborhoods(model: GaussianModel, cfg: ConvConfig, centers=None, workers: int = 1):
    """Mahalanobis k-NN for ``centers`` (default: all primitives).

    Returns ``(nbr, d2)`` with shape ``(C, k)``, padded with ``-1`` and
    ``inf`` where fewer than ``k`` neighbours lie within the radius.
    """
    n = len(model)
    centers = np.arange(n) if centers is None else np.asarray(centers, dtype=np.int64)
    means = np.ascontiguousarray(model.means)
    inv = np.ascontiguousarray(model.inverse_covariances)
    # the Mahalanobis ball of radius r sits inside the Euclidean ball r * sqrt(lambda_max)
    reach = cfg.mahalanobis_radius * np.sqrt(model.variances.max(axis=1))[centers]
    tree = cKDTree(means)
    nbr = np.empty((len(centers), cfg.num_neighbors), dtype=np.int64)
    d2 = np.empty((len(centers), cfg.num_neighbors))
    step = 8192
    for lo in range(0, len(centers), step):
        c = centers[lo:lo + step]
        indptr, indices = radius_graph(tree, means[c], reach[lo:lo + step] * (1 + 1e-9), workers)
        nbr[lo:lo + step], d2[lo:lo + step] = kernels.mahalanobis_knn(
            indptr, indices, np.ascontiguousarray(c), means, inv,
            cfg.num_neighbors, cfg.mahalanobis_radius ** 2)
    return nbr, d2


def neighborhood(model: GaussianModel, i: int, cfg: ConvConfig) -> list:
    nbr, _ = neighborhoods(model, cfg, centers=[i])
    return [int(j) for j in nbr[0] if j >= 0]


def kernel_points_for(model: GaussianModel, layout: KernelLayout, frame: str) -> np.ndarray:
    """Per-primitive kernel offsets, shape ``(N, M, 3)``."""
    if frame == "world":
        return np.ascontiguousarray(np.broadcast_to(layout.points, (len(model), len(layout), 3)))
    return np.ascontiguousarray(np.einsum("nij,mj->nmi", model.rotation_matrices, layout.points))


def make_weights(layer_dims, d_in: int, kernel_count: int, seed: int) -> list:
    """Seeded mixing matrices ``(M, D_in, D_out)``, entries ``U(-1, 1) / sqrt(M * D_in)``."""
    rng = np.random.default_rng(seed)
    out = []
    for d_out in layer_dims:
        out.append(rng.uniform(-1.0, 1.0, size=(kernel_count, d_in, d_out)) / np.sqrt(kernel_count * d_in))
        d_in = d_out
    return out


def input_features(model: GaussianModel, kernel_radius: float) -> np.ndarray:
    """``[1, opacity, anisotropy ratio, trace / kernel_radius^2]`` per primitive."""
    var = model.variances
    return np.stack([
        np.ones(len(model)),
        model.opacities,
        var.max(axis=1) / var.min(axis=1),
        var.sum(axis=1) / kernel_radius**2,
    ], axis=1)


def conv_layer(model: GaussianModel, features_in, layout: KernelLayout, weights, cfg: ConvConfig,
               nbr=None, kernel_pts=None, workers: int = 1) -> np.ndarray:
    """One convolution pass.

    ``out[i] = sum_j sum_m w_m(j; i) * weights[m].T @ f_j`` over the
    Mahalanobis neighbourhood of ``i``. ``nbr`` and ``kernel_pts`` may be
    precomputed to share them across layers.
    """
    f = np.ascontiguousarray(features_in, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    if f.ndim != 2 or len(f) != len(model):
        raise ConfigError(f"features must have shape (N, D) with N={len(model)}, got {f.shape}")
    if W.ndim != 3 or W.shape[0] != len(layout) or W.shape[1] != f.shape[1]:
        raise ConfigError(f"weights shape {W.shape} does not fit {len(layout)} kernel points "
                          f"and input width {f.shape[1]}")
    if nbr is None:
        nbr, _ = neighborhoods(model, cfg, workers=workers)
    if kernel_pts is None:
        kernel_pts = kernel_points_for(model, layout, cfg.kernel_frame)
    agg = kernels.kernel_aggregate(np.ascontiguousarray(nbr, dtype=np.int64),
                                   np.ascontiguousarray(model.means),
                                   np.ascontiguousarray(model.inverse_covariances),
                                   np.ascontiguousarray(kernel_pts, dtype=np.float64), f)
    return np.einsum("nmd,mde->ne", agg, W)


@dataclass
class FeatureField:
    layer_outputs: list
    detail_score: np.ndarray
    layer_dims: tuple
    kernel_radius: float = 0.0
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.detail_score)

    def layer(self, i: int) -> np.ndarray:
        """Output of layer ``i`` (1-based)."""
        return self.layer_outputs[i - 1]

    def to_dict(self) -> dict:
        return {"detail_scores": self.detail_score.tolist(), "layer_dims": list(self.layer_dims)}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    def dump_layers(self, path) -> None:
        """Binary dump: magic, layer count, then per layer ``N, D`` and row-major float32 data."""
        with open(path, "wb") as fh:
            fh.write(_DUMP_MAGIC + struct.pack("<I", len(self.layer_outputs)))
            for out in self.layer_outputs:
                fh.write(struct.pack("<II", *out.shape))
                fh.write(np.ascontiguousarray(out, dtype="<f4").tobytes())


def load_layer_dump(path) -> list:
    data = Path(path).read_bytes()
    if data[:4] != _DUMP_MAGIC:
        raise FormatError(f"{path}: not a feature dump")
    (count,) = struct.unpack_from("<I", data, 4)
    pos, out = 8, []
    for _ in range(count):
        n, d = struct.unpack_from("<II", data, pos)
        pos += 8
        out.append(np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float64))
        pos += 4 * n * d
    return out


def pipeline_conv_config(**overrides) -> ConvConfig:
    """Settings used by the end-to-end pipeline: robust to noise on the means."""
    return ConvConfig(**{"radius_mode": "extent", "covariance_inflation": 0.4, **overrides})


def inflated(model: GaussianModel, rho: float) -> GaussianModel:
    """Same model with ``rho^2 I`` added to every covariance (a pure log-scale change)."""
    if rho <= 0:
        return model
    return GaussianModel(model.means, 0.5 * np.log(model.variances + rho * rho), model.rotations,
                         model.opacity_logits, model.sh_dc, model.sh_rest)


def extract_features(model: GaussianModel, cfg: ConvConfig | None = None, layout: KernelLayout | None = None,
                     workers: int = 1) -> FeatureField:
    """Run the full stack and derive per-primitive detail scores.

    Layers are separated by a ramp nonlinearity; stored layer outputs are the
    raw (pre-ramp) values and ``detail_score`` is the norm of layer 2 (or of
    layers 1-2 concatenated with ``cfg.detail_concat``).
    """
    cfg = cfg or ConvConfig()
    model.require_nonempty("feature extraction")
    sigma = cfg.resolved_kernel_radius(model)
    f = input_features(model, sigma)
    model = inflated(model, cfg.covariance_inflation * sigma)
    if layout is None:
        layout = fibonacci_layout(cfg.kernel_count, sigma)
    elif len(layout) != cfg.kernel_count:
        raise ConfigError("layout size differs from kernel_count")
    nbr, _ = neighborhoods(model, cfg, workers=workers)
    kpts = kernel_points_for(model, layout, cfg.kernel_frame)
    weights = make_weights(cfg.layer_dims, f.shape[1], len(layout), cfg.weight_seed)
    outputs = []
    for li, W in enumerate(weights):
        raw = conv_layer(model, f, layout, W, cfg, nbr=nbr, kernel_pts=kpts)
        outputs.append(raw)
        f = np.maximum(raw, 0.0)
    head = np.concatenate(outputs[:2], axis=1) if cfg.detail_concat else outputs[1]
    return FeatureField(outputs, np.linalg.norm(head, axis=1), cfg.layer_dims, sigma)
