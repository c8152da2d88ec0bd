"""Skeleton-aware selection between two registered sub-maps.

Primitives that have no counterpart in the other map are kept as they are.
Counterpart pairs (mutual nearest neighbours within ``eps_overlap``) keep
exactly one member, chosen by a weighted score of skeleton proximity, local
detail and closeness to the owner's centre. Attributes are never blended.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError
from .gafeat import FeatureField
from .model import GaussianModel, concatenate
from .skeleton import Skeleton
from .spatial import median_nn_spacing, nearest_with_ties


@dataclass
class FusionConfig:
    """Selection parameters.

    ``eps_skel=None`` falls back to the skeleton merge distance and
    ``eps_overlap=None`` to the median nearest-neighbour spacing of A.
    ``tau=None`` disables the absolute-threshold clause of the rule.
    ``gamma_on_skeleton`` applies ``gamma`` to the skeleton score instead of
    the centre score (a compatibility switch, off by default).
    """

    eps_skel: float | None = None
    eps_overlap: float | None = None
    delta: float = 1.0
    alpha: float = 0.4
    beta: float = 0.4
    gamma: float = 0.2
    tau: float | None = 0.9
    gamma_on_skeleton: bool = False

    def __post_init__(self):
        for name in ("eps_skel", "eps_overlap"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if min(self.alpha, self.beta, self.gamma) < 0 or not self.alpha + self.beta + self.gamma > 0:
            raise ConfigError("alpha, beta, gamma must be >= 0 with a positive sum")
        if self.tau is not None and not 0 < self.tau <= 1:
            raise ConfigError("tau must be in (0, 1] (or None to disable)")

    @classmethod
    def center_proximity(cls, **overrides) -> "FusionConfig":
        """Baseline that selects purely by closeness to each map's centre."""
        return cls(**{"alpha": 0.0, "beta": 0.0, "gamma": 1.0, "tau": None, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusionReport:
    merged_skeleton: Skeleton
    pairs: np.ndarray
    kept_a: np.ndarray
    kept_b: np.ndarray
    scores_a: dict
    scores_b: dict
    keep_a_in_pair: np.ndarray
    size_a: int
    size_b: int
    config: dict = field(default_factory=dict)

    @property
    def kept_from_a(self) -> int:
        return len(self.kept_a)

    @property
    def kept_from_b(self) -> int:
        return len(self.kept_b)

    @property
    def dropped(self) -> int:
        return self.size_a + self.size_b - self.kept_from_a - self.kept_from_b

    def to_dict(self, verbose: bool = False) -> dict:
        d = {
            "size_a": self.size_a,
            "size_b": self.size_b,
            "pairs": int(len(self.pairs)),
            "kept_from_a": self.kept_from_a,
            "kept_from_b": self.kept_from_b,
            "dropped": self.dropped,
            "fused_size": self.kept_from_a + self.kept_from_b,
            "merged_skeleton_nodes": len(self.merged_skeleton),
            "kept_a": self.kept_a.tolist(),
            "kept_b": self.kept_b.tolist(),
            "config": self.config,
        }
        if verbose:
            d["pair_records"] = [
                {
                    "a": int(i), "b": int(j), "keep": "a" if ka else "b",
                    **{f"{k}_a": float(v[p]) for k, v in self.scores_a.items()},
                    **{f"{k}_b": float(v[p]) for k, v in self.scores_b.items()},
                }
                for p, ((i, j), ka) in enumerate(zip(self.pairs, self.keep_a_in_pair))
            ]
        return d

    def save(self, path, verbose: bool = False) -> None:
        Path(path).write_text(json.dumps(self.to_dict(verbose), indent=1) + "\n")


def merge_skeletons(sa: Skeleton, sb: Skeleton, eps_skel: float) -> Skeleton:
    """Merge B's nodes into A's, one partner at most per node.

    Each A node, in order, consumes the first still-unused B node closer than
    ``eps_skel`` and is replaced by the midpoint; unmatched A nodes stay put
    and unused B nodes are appended. The assignment of the result covers A's
    primitives followed by B's.
    """
    na, nb = len(sa), len(sb)
    a_new = np.empty(na, dtype=np.int64)
    b_new = np.full(nb, -1, dtype=np.int64)
    used = np.zeros(nb, dtype=bool)
    nodes, clusters = [], []
    cand = cKDTree(sb.nodes).query_ball_point(sa.nodes, eps_skel) if nb and na else [[] for _ in range(na)]
    for i in range(na):
        partner = -1
        for j in sorted(cand[i]):
            if not used[j] and np.linalg.norm(sa.nodes[i] - sb.nodes[j]) < eps_skel:
                partner = j
                break
        a_new[i] = len(nodes)
        if partner >= 0:
            used[partner] = True
            b_new[partner] = len(nodes)
            nodes.append(0.5 * (sa.nodes[i] + sb.nodes[partner]))
        else:
            nodes.append(sa.nodes[i])
        clusters.append(sa.cluster_of_node[i])
    offset = int(sa.cluster_of_node.max()) + 1 if na else 0
    for j in np.flatnonzero(~used):
        b_new[j] = len(nodes)
        nodes.append(sb.nodes[j])
        clusters.append(sb.cluster_of_node[j] + offset)
    assignment = np.concatenate([a_new[sa.assignment], b_new[sb.assignment]])
    return Skeleton(np.array(nodes).reshape(-1, 3), assignment, np.array(clusters, dtype=np.int64))


def overlap_pairs(model_a: GaussianModel, model_b: GaussianModel, eps_overlap: float) -> np.ndarray:
    """Mutual nearest-neighbour pairs ``(i, j)`` no farther apart than ``eps_overlap``.

    Exact distance ties resolve to the lower index. Rows are sorted by ``i``.
    """
    if len(model_a) == 0 or len(model_b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    ta, tb = cKDTree(model_a.means), cKDTree(model_b.means)
    d_ab, j_of_i = nearest_with_ties(tb, model_a.means)
    _, i_of_j = nearest_with_ties(ta, model_b.means)
    i = np.arange(len(model_a))
    ok = (i_of_j[j_of_i] == i) & (d_ab <= eps_overlap)
    return np.stack([i[ok], j_of_i[ok]], axis=1).astype(np.int64)


def score(points, detail, center, radius, skeleton_nodes, f_min, f_max, cfg: FusionConfig) -> dict:
    """Per-primitive scores ``s_ske, s_deta, s_cen, s_tot`` for one owner model."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d_skel = cKDTree(skeleton_nodes).query(points)[0] if len(skeleton_nodes) else np.full(len(points), np.inf)
    s_ske = 1.0 / (1.0 + cfg.delta * d_skel)
    if f_max > f_min:
        s_deta = (np.asarray(detail, dtype=np.float64) - f_min) / (f_max - f_min)
    else:
        s_deta = np.zeros(len(points))
    if radius > 0:
        s_cen = np.clip(1.0 - np.linalg.norm(points - center, axis=1) / radius, 0.0, 1.0)
    else:
        s_cen = np.ones(len(points))
    third = s_ske if cfg.gamma_on_skeleton else s_cen
    s_tot = cfg.alpha * s_ske + cfg.beta * s_deta + cfg.gamma * third
    return {"s_ske": s_ske, "s_deta": s_deta, "s_cen": s_cen, "s_tot": s_tot}


def _detail(field):
    return field.detail_score if isinstance(field, FeatureField) else np.asarray(field, dtype=np.float64)


def fuse(model_a: GaussianModel, model_b: GaussianModel, skel_a: Skeleton, skel_b: Skeleton,
         feat_a, feat_b, cfg: FusionConfig | None = None, merge_dist: float | None = None):
    """Select one primitive per overlap pair and keep everything else.

    ``model_b`` and ``skel_b`` must already be in A's frame. ``feat_a`` and
    ``feat_b`` are feature fields or plain detail-score arrays.

    Returns
    -------
    (GaussianModel, FusionReport)
        Kept A primitives in A order, then kept B primitives in B order.
    """
    cfg = cfg or FusionConfig()
    eps_skel = cfg.eps_skel or merge_dist
    if eps_skel is None:
        raise ConfigError("eps_skel is unset and no skeleton merge distance was given")
    eps_overlap = cfg.eps_overlap or median_nn_spacing(model_a.means)
    merged = merge_skeletons(skel_a, skel_b, eps_skel)
    pairs = overlap_pairs(model_a, model_b, eps_overlap) if eps_overlap > 0 else np.zeros((0, 2), np.int64)
    da, db = _detail(feat_a)[pairs[:, 0]], _detail(feat_b)[pairs[:, 1]]
    pool = np.concatenate([da, db])
    f_min, f_max = (float(pool.min()), float(pool.max())) if len(pool) else (0.0, 0.0)
    sa = score(model_a.means[pairs[:, 0]], da, model_a.centroid, model_a.radius, merged.nodes, f_min, f_max, cfg)
    sb = score(model_b.means[pairs[:, 1]], db, model_b.centroid, model_b.radius, merged.nodes, f_min, f_max, cfg)
    keep_a = sa["s_tot"] >= sb["s_tot"]
    if cfg.tau is not None:
        keep_a |= np.maximum(sa["s_ske"], sa["s_deta"]) >= cfg.tau
    drop_a = np.zeros(len(model_a), dtype=bool)
    drop_b = np.zeros(len(model_b), dtype=bool)
    drop_a[pairs[~keep_a, 0]] = True
    drop_b[pairs[keep_a, 1]] = True
    kept_a, kept_b = np.flatnonzero(~drop_a), np.flatnonzero(~drop_b)
    fused = concatenate([model_a.subset(kept_a), model_b.subset(kept_b)])
    report = FusionReport(
        merged, pairs, kept_a, kept_b, sa, sb, keep_a, len(model_a), len(model_b),
        config={**cfg.to_dict(), "eps_skel": float(eps_skel), "eps_overlap": float(eps_overlap)},
    )
    return fused, report
