"""Similarity registration of sub-map B onto sub-map A.

Correspondences come from ratio-tested mutual nearest neighbours in
convolution-feature space; a 3-point RANSAC over closed-form similarity fits
rejects outliers. :func:`match_features` is the only place features are
consulted, so a different matcher can be swapped in by producing an
``(P, 2)`` index array directly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DegenerateInputError, InsufficientCorrespondences, RegistrationFailure
from .gafeat import ConvConfig, FeatureField, extract_features, pipeline_conv_config
from .model import GaussianModel
from .transform import SimilarityTransform

__all__ = [
    "RegistrationConfig", "RegistrationResult", "SimilarityTransform", "match_features",
    "umeyama_similarity", "ransac_register", "registration_errors", "register",
]


@dataclass
class RegistrationConfig:
    match_ratio_test: float = 0.9
    ransac_iters: int = 2000
    inlier_tol: float = 0.05
    min_inliers: int = 10
    seed: int = 0
    refit_rounds: int = 20

    def __post_init__(self):
        if not 0 < self.match_ratio_test <= 1:
            raise ConfigError("match_ratio_test must be in (0, 1]")
        if self.ransac_iters < 1 or self.min_inliers < 1 or self.refit_rounds < 0:
            raise ConfigError("ransac_iters and min_inliers must be >= 1")
        if not self.inlier_tol > 0:
            raise ConfigError("inlier_tol must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    matches: np.ndarray
    inliers: np.ndarray
    level: str = "primitives"

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())


def _features(field, layer):
    if isinstance(field, FeatureField):
        return field.layer(layer)
    return np.asarray(field, dtype=np.float64)


def match_features(fa, fb, cfg: RegistrationConfig | None = None, layer: int = 2) -> np.ndarray:
    """Mutual nearest neighbours in feature space that pass the ratio test.

    ``fa`` and ``fb`` are :class:`FeatureField` objects (layer ``layer`` is
    used) or plain ``(N, D)`` arrays. Returns an ``(P, 2)`` array of
    ``(index_a, index_b)`` rows sorted by ``index_a``.

    Raises
    ------
    InsufficientCorrespondences
        Fewer than three matches survive.
    """
    cfg = cfg or RegistrationConfig()
    xa, xb = _features(fa, layer), _features(fb, layer)
    if xa.shape[1] != xb.shape[1]:
        raise ConfigError("feature widths differ; extract both sides with the same config")
    if len(xa) == 0 or len(xb) == 0:
        raise InsufficientCorrespondences("no features to match")
    k = min(2, len(xb))
    d_ab, i_ab = cKDTree(xb).query(xa, k=k)
    if k == 1:
        d_ab, i_ab = d_ab[:, None], i_ab[:, None]
        second = np.full(len(xa), np.inf)
    else:
        second = d_ab[:, 1]
    _, i_ba = cKDTree(xa).query(xb, k=1)
    ia = np.arange(len(xa))
    best = i_ab[:, 0]
    mutual = i_ba[best] == ia
    ratio_ok = d_ab[:, 0] < cfg.match_ratio_test * second
    keep = mutual & ratio_ok
    out = np.stack([ia[keep], best[keep]], axis=1).astype(np.int64)
    if len(out) < 3:
        raise InsufficientCorrespondences(f"only {len(out)} feature matches (need 3)")
    return out


def umeyama_similarity(src, dst, weights=None) -> SimilarityTransform:
    """Least-squares ``s, R, t`` with ``dst ~ s R src + t``.

    Raises
    ------
    DegenerateInputError
        Fewer than three pairs, or the source points are collinear.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise ConfigError("src and dst need the same number of points")
    if len(src) < 3:
        raise DegenerateInputError("similarity fit needs at least 3 point pairs")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s, mu_d = w @ src, w @ dst
    cs, cd = src - mu_s, dst - mu_d
    var_s = float(w @ (cs * cs).sum(axis=1))
    sv = np.linalg.svd(cs * np.sqrt(w)[:, None], compute_uv=False)
    if var_s <= 0 or sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateInputError("source points are collinear or coincident")
    cov = (cd * w[:, None]).T @ cs
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = U @ np.diag(S) @ Vt
    scale = float((D * S).sum() / var_s)
    if not scale > 0:
        raise DegenerateInputError("fitted scale is not positive")
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(R, t, scale)


def _points(x):
    return x.means if isinstance(x, GaussianModel) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def ransac_register(matches, model_a, model_b, cfg: RegistrationConfig | None = None):
    """Robust similarity from B to A.

    ``matches`` rows are ``(index_a, index_b)``; the models may also be plain
    point arrays. Matches are sorted canonically before sampling so the
    result does not depend on their input order. Returns
    ``(transform, inlier_mask)`` with the mask aligned to the input rows.

    Raises
    ------
    RegistrationFailure
        Fewer than ``cfg.min_inliers`` inliers for the best hypothesis.
    """
    cfg = cfg or RegistrationConfig()
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) < 3:
        raise InsufficientCorrespondences(f"only {len(matches)} matches (need 3)")
    order = np.lexsort((matches[:, 1], matches[:, 0]))
    m = matches[order]
    dst = _points(model_a)[m[:, 0]]
    src = _points(model_b)[m[:, 1]]
    n = len(m)
    tol2 = cfg.inlier_tol ** 2
    rng = np.random.default_rng(cfg.seed)
    samples = np.stack([rng.choice(n, size=3, replace=False) for _ in range(cfg.ransac_iters)])

    best_count, best_T = -1, None
    for idx in samples:
        try:
            T = umeyama_similarity(src[idx], dst[idx])
        except DegenerateInputError:
            continue
        r = T.apply(src) - dst
        count = int(np.count_nonzero((r * r).sum(axis=1) <= tol2))
        if count > best_count:
            best_count, best_T = count, T
    if best_T is None or best_count < cfg.min_inliers:
        raise RegistrationFailure(f"best hypothesis has {max(best_count, 0)} inliers "
                                  f"(need {cfg.min_inliers})")

    # re-fit on the consensus set until it stops changing
    T = best_T
    inl = ((T.apply(src) - dst) ** 2).sum(axis=1) <= tol2
    for _ in range(cfg.refit_rounds):
        try:
            T_new = umeyama_similarity(src[inl], dst[inl])
        except DegenerateInputError:
            break
        new_inl = ((T_new.apply(src) - dst) ** 2).sum(axis=1) <= tol2
        if new_inl.sum() < cfg.min_inliers:
            break
        T = T_new
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    if inl.sum() < cfg.min_inliers:
        raise RegistrationFailure(f"{int(inl.sum())} inliers after refit (need {cfg.min_inliers})")
    mask = np.empty(n, dtype=bool)
    mask[order] = inl
    return T, mask


def registration_errors(est: SimilarityTransform, gt: SimilarityTransform) -> dict:
    """Rotation error in degrees, translation error in metres, relative scale error."""
    M = gt.rotation.T @ est.rotation
    c = np.clip((np.trace(M) - 1.0) / 2.0, -1.0, 1.0)
    # same angle as arccos(c), but atan2 keeps full precision near zero
    s = 0.5 * np.linalg.norm([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])
    return {
        "rre_deg": float(np.degrees(np.arctan2(s, c))),
        "rte_m": float(np.linalg.norm(est.translation - gt.translation)),
        "rse": float(abs(est.scale / gt.scale - 1.0)),
    }


def node_features(field: FeatureField, assignment, num_nodes: int, layer: int = 2) -> np.ndarray:
    """Average of member-primitive features per skeleton node."""
    x = field.layer(layer)
    out = np.zeros((num_nodes, x.shape[1]))
    np.add.at(out, np.asarray(assignment), x)
    counts = np.bincount(assignment, minlength=num_nodes).astype(np.float64)
    return out / np.maximum(counts, 1)[:, None]


def register(model_a: GaussianModel, model_b: GaussianModel, conv_cfg: ConvConfig | None = None,
             cfg: RegistrationConfig | None = None, features=None, skeletons=None,
             workers: int = 1) -> RegistrationResult:
    """Features, matching and RANSAC in one call.

    ``features`` may hold precomputed ``(field_a, field_b)``. When
    ``skeletons=(skel_a, skel_b)`` is given and primitive-level registration
    fails, the same matching and RANSAC run on skeleton nodes with
    node-averaged features.
    """
    conv_cfg = conv_cfg or pipeline_conv_config()
    cfg = cfg or RegistrationConfig()
    if features is None:
        features = (extract_features(model_a, conv_cfg, workers=workers),
                    extract_features(model_b, conv_cfg, workers=workers))
    fa, fb = features
    try:
        matches = match_features(fa, fb, cfg)
        T, inl = ransac_register(matches, model_a, model_b, cfg)
        return RegistrationResult(T, matches, inl)
    except RegistrationFailure:
        if skeletons is None:
            raise
    sa, sb = skeletons
    na = node_features(fa, sa.assignment, len(sa))
    nb = node_features(fb, sb.assignment, len(sb))
    matches = match_features(na, nb, cfg)
    node_cfg = RegistrationConfig(**{**cfg.to_dict(), "min_inliers": min(cfg.min_inliers, 3)})
    T, inl = ransac_register(matches, sa.nodes, sb.nodes, node_cfg)
    return RegistrationResult(T, matches, inl, level="skeleton")
