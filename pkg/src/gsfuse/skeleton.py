"""Gaussian-aware L1 skeletons.

Nodes start at DBSCAN cluster centres and are refined by alternating a greedy
Gaussian-to-node assignment, a descent step on the joint energy

    E(S) = -sum_i exp(-1/2 (q_a(i) - mu_i)^T P_i (q_a(i) - mu_i)) + lam * sum_j |Lap(q_j)|^2

and merging of nodes closer than ``merge_dist``. ``P_i`` is the inverse
covariance of Gaussian ``i`` for the covariance-aware variant and ``I / h^2``
(one global bandwidth) for the plain L1 baseline.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix, identity
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist, squareform

from . import kernels
from .errors import ConfigError, DegenerateInputError, FormatError
from .model import GaussianModel, GaussianPrimitive, covariance
from .spatial import nearest_with_ties, radius_graph, symmetric_hausdorff

METRICS = ("gaussian", "euclidean")


@dataclass(frozen=True)
class SkeletonConfig:
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 4
    lam: float = 0.1
    step_size: float = 0.05
    conv_tol: float = 1e-4
    merge_dist: float | None = None  # defaults to dbscan_eps / 2
    max_iters: int = 500
    laplacian_k: int = 2
    connectivity_eta: float = 3.0

    def __post_init__(self):
        checks = {
            "dbscan_eps": self.dbscan_eps > 0,
            "dbscan_min_pts": self.dbscan_min_pts >= 1,
            "lam": self.lam >= 0,
            "step_size": self.step_size > 0,
            "conv_tol": self.conv_tol > 0,
            "merge_dist": self.merge_dist is None or self.merge_dist > 0,
            "max_iters": self.max_iters >= 1,
            "laplacian_k": self.laplacian_k >= 2,
            "connectivity_eta": self.connectivity_eta > 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError(f"invalid skeleton config values: {', '.join(bad)}")

    @property
    def resolved_merge_dist(self) -> float:
        return self.dbscan_eps / 2 if self.merge_dist is None else self.merge_dist

    def to_dict(self) -> dict:
        d = asdict(self)
        d["merge_dist"] = self.resolved_merge_dist
        return d


@dataclass(frozen=True)
class Skeleton:
    nodes: np.ndarray
    assignment: np.ndarray
    cluster_of_node: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "assignment", np.asarray(self.assignment, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "cluster_of_node", np.asarray(self.cluster_of_node, dtype=np.int64).reshape(-1))
        if len(self.cluster_of_node) != len(self.nodes):
            raise FormatError("cluster_of_node must have one entry per node")
        if len(self.assignment) and (self.assignment.min() < 0 or self.assignment.max() >= len(self.nodes)):
            raise FormatError("assignment refers to a node that does not exist")

    def __len__(self) -> int:
        return len(self.nodes)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def transformed(self, transform) -> "Skeleton":
        """Nodes mapped through a similarity transform; assignment unchanged."""
        return Skeleton(transform.apply(self.nodes), self.assignment, self.cluster_of_node)

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "assignment": self.assignment.tolist(),
            "clusters": self.cluster_of_node.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Skeleton":
        try:
            return cls(data["nodes"], data["assignment"], data["clusters"])
        except KeyError as exc:
            raise FormatError(f"skeleton document lacks {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "Skeleton":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class RefineTrace:
    energies: list = field(default_factory=list)
    displacements: list = field(default_factory=list)
    merge_iterations: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- DBSCAN

def dbscan(points: np.ndarray, eps: float, min_pts: int, workers: int = 1) -> np.ndarray:
    """Cluster labels (``-1`` = noise) in sequential-scan order.

    A point is core when at least ``min_pts`` *other* points lie within
    ``eps`` (Euclidean, inclusive).
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(points)
    indptr, indices = radius_graph(tree, points, eps, workers=workers)
    return kernels.dbscan_labels(indptr, indices, int(min_pts))


def dbscan_init(model: GaussianModel, cfg: SkeletonConfig, workers: int = 1) -> Skeleton:
    """One node per DBSCAN cluster at its opacity-weighted centre.

    Noise Gaussians are attached to the nearest node so that every Gaussian
    takes part in later stages.
    """
    model.require_nonempty("skeleton initialization")
    labels = dbscan(model.means, cfg.dbscan_eps, cfg.dbscan_min_pts, workers=workers)
    k = int(labels.max()) + 1
    if k <= 0:
        raise DegenerateInputError(
            f"DBSCAN(eps={cfg.dbscan_eps}, minPts={cfg.dbscan_min_pts}) labelled every Gaussian "
            "as noise; increase --dbscan-eps or lower --dbscan-min-pts"
        )
    clustered = labels >= 0
    w = model.opacities[clustered]
    lab = labels[clustered]
    pts = model.means[clustered]
    wsum = np.bincount(lab, weights=w, minlength=k)
    cnt = np.bincount(lab, minlength=k)
    nodes = np.empty((k, 3))
    for c in range(3):
        num = np.bincount(lab, weights=w * pts[:, c], minlength=k)
        plain = np.bincount(lab, weights=pts[:, c], minlength=k) / cnt
        nodes[:, c] = np.where(wsum > 0, num / np.where(wsum > 0, wsum, 1), plain)
    assignment = labels.copy()
    if (~clustered).any():
        _, nearest = nearest_with_ties(cKDTree(nodes), model.means[~clustered])
        assignment[~clustered] = nearest
    return Skeleton(nodes, assignment, np.arange(k))


# ---------------------------------------------------------------- energy

def euclidean_bandwidth(model: GaussianModel) -> float:
    """Global kernel width for the covariance-blind baseline.

    The median geometric-mean standard deviation, so that a scene of identical
    isotropic Gaussians ``sigma^2 I`` gets ``h = sigma``.
    """
    return float(np.median(np.exp(0.5 * np.log(model.variances).mean(axis=1))))


class _Fit:
    """Per-Gaussian precision matrices for one data-term flavour."""

    def __init__(self, model: GaussianModel, metric: str):
        if metric not in METRICS:
            raise ConfigError(f"unknown skeleton metric {metric!r}")
        self.model = model
        self.means = np.ascontiguousarray(model.means)
        n = len(model)
        if metric == "gaussian":
            self.prec = np.ascontiguousarray(model.inverse_covariances)
            var = model.variances
            self.cond = var.max(axis=1) / var.min(axis=1)
        else:
            h = euclidean_bandwidth(model)
            self.prec = np.ascontiguousarray(np.broadcast_to(np.eye(3) / h**2, (n, 3, 3)))
            self.cond = np.ones(n)

    def mahal_sq(self, nodes, assign):
        d = nodes[assign] - self.means
        return np.einsum("ni,nij,nj->n", d, self.prec, d)

    def reassign(self, nodes: np.ndarray, workers: int = 1) -> np.ndarray:
        """Greedy assignment: each Gaussian to its highest-density node."""
        tree = cKDTree(nodes)
        e, _ = tree.query(self.means, k=1, workers=workers)
        # any node beating the Euclidean-nearest one lies inside this ball
        radii = e * np.sqrt(self.cond) * (1 + 1e-9) + 1e-12
        indptr, indices = radius_graph(tree, self.means, radii, workers=workers)
        assign, _ = kernels.assign_nearest(indptr, indices, self.means, self.prec,
                                           np.ascontiguousarray(nodes))
        return assign


def _neighbour_weights(nodes: np.ndarray, k: int):
    """Row-stochastic sparse matrix averaging each node's k nearest other nodes."""
    n = len(nodes)
    kk = min(k, n - 1)
    if kk <= 0:
        return csr_matrix((n, n))
    _, idx = cKDTree(nodes).query(nodes, k=kk + 1)
    idx = idx.reshape(n, kk + 1)
    # drop self (not always column 0 when nodes coincide), keep the first kk others
    other = idx != np.arange(n)[:, None]
    keep = other & (np.cumsum(other, axis=1) <= kk)
    rows = np.broadcast_to(np.arange(n)[:, None], idx.shape)[keep]
    return csr_matrix((np.full(len(rows), 1.0 / kk), (rows, idx[keep])), shape=(n, n))


def laplacian_vectors(nodes: np.ndarray, k: int = 2) -> np.ndarray:
    """``q_j - mean(k nearest other nodes)`` for each node (zeros if K == 1)."""
    nodes = np.asarray(nodes, dtype=np.float64)
    W = _neighbour_weights(nodes, k)
    return nodes - W @ nodes


def _regularizer(nodes, k):
    lap = laplacian_vectors(nodes, k)
    return float((lap * lap).sum())


def _energy(fit: _Fit, nodes, assign, lam, k) -> float:
    data = -np.exp(-0.5 * fit.mahal_sq(nodes, assign)).sum()
    reg = _regularizer(nodes, k) if lam else 0.0
    return float(data + lam * reg)


def gaussian_density(p: GaussianPrimitive, q) -> float:
    """``exp(-1/2 (q - mu)^T Sigma^-1 (q - mu))`` for a single primitive."""
    d = np.asarray(q, dtype=np.float64) - np.asarray(p.mean, dtype=np.float64)
    return float(np.exp(-0.5 * d @ np.linalg.solve(covariance(p), d)))


def g2d_distance(model: GaussianModel, skel: Skeleton, i: int) -> float:
    """Gaussian-to-skeleton density term of primitive ``i``.

    Each Gaussian belongs to exactly one node's member set, so the sum over
    members collapses to the Gaussian's own density evaluated at its node.
    """
    fit = _Fit(model.subset([i]), "gaussian")
    return float(np.exp(-0.5 * fit.mahal_sq(skel.nodes, skel.assignment[i:i + 1]))[0])


def node_density_sums(model: GaussianModel, skel: Skeleton, metric: str = "gaussian") -> np.ndarray:
    """Per node, summed densities of its member Gaussians at the node."""
    dens = np.exp(-0.5 * _Fit(model, metric).mahal_sq(skel.nodes, skel.assignment))
    return np.bincount(skel.assignment, weights=dens, minlength=len(skel))


def energy(skel: Skeleton, model: GaussianModel, cfg: SkeletonConfig, metric: str = "gaussian") -> float:
    """Joint energy: negated density fit plus ``lam`` times the Laplacian penalty."""
    return _energy(_Fit(model, metric), skel.nodes, skel.assignment, cfg.lam, cfg.laplacian_k)


# ---------------------------------------------------------------- refinement

def _merge_close(nodes, assign, clusters, dist):
    """Replace node pairs closer than ``dist`` by their midpoint until none remain."""
    merged_any = False
    while len(nodes) > 1:
        pairs = cKDTree(nodes).query_pairs(dist, output_type="ndarray")
        if len(pairs):
            d = np.linalg.norm(nodes[pairs[:, 0]] - nodes[pairs[:, 1]], axis=1)
            keep = d < dist
            pairs, d = pairs[keep], d[keep]
        if not len(pairs):
            break
        order = np.lexsort((pairs[:, 1], pairs[:, 0], d))
        used = np.zeros(len(nodes), dtype=bool)
        remap = np.arange(len(nodes))
        nodes = nodes.copy()
        clusters = clusters.copy()
        for a, b in pairs[order]:
            if used[a] or used[b]:
                continue
            used[a] = used[b] = True
            nodes[a] = 0.5 * (nodes[a] + nodes[b])
            clusters[a] = min(clusters[a], clusters[b])
            remap[b] = a
        alive = remap == np.arange(len(nodes))
        new_index = np.cumsum(alive) - 1
        assign = new_index[remap[assign]]
        nodes, clusters = nodes[alive], clusters[alive]
        merged_any = True
    return nodes, assign, clusters, merged_any


def _descent_direction(fit: _Fit, nodes, assign, lam, k):
    n_nodes = len(nodes)
    d = nodes[assign] - fit.means
    pd = np.einsum("nij,nj->ni", fit.prec, d)
    dens = np.exp(-0.5 * np.einsum("ni,ni->n", d, pd))
    grad = np.stack([np.bincount(assign, weights=dens * pd[:, c], minlength=n_nodes) for c in range(3)], axis=1)
    H = np.stack(
        [np.bincount(assign, weights=dens * fit.prec[:, a, b], minlength=n_nodes)
         for a in range(3) for b in range(3)], axis=1,
    ).reshape(n_nodes, 3, 3)
    if lam and n_nodes > 1:
        W = _neighbour_weights(nodes, k)
        L = identity(n_nodes, format="csr") - W
        lap = L @ nodes
        grad += 2 * lam * (L.T @ lap)
        curv = np.asarray(L.multiply(L).sum(axis=0)).ravel()
        H += (2 * lam * curv)[:, None, None] * np.eye(3)
    ridge = 1e-9 * (np.trace(H, axis1=1, axis2=2) / 3 + 1.0)
    H += ridge[:, None, None] * np.eye(3)
    return -np.linalg.solve(H, grad[..., None])[..., 0]


def refine(skel: Skeleton, model: GaussianModel, cfg: SkeletonConfig,
           metric: str = "gaussian", workers: int = 1):
    """Refine a skeleton in place of a copy; returns ``(skeleton, trace)``.

    Each iteration reassigns Gaussians greedily, then takes one preconditioned
    gradient step with per-node moves capped at ``step_size``. Nodes that the
    step brings closer than ``merge_dist`` are merged, and the step is halved
    until the energy after those merges does not exceed the energy before it,
    so the recorded trace never rises. Nodes closer than ``merge_dist`` at the
    start are merged unconditionally. Stops once the accepted displacement is below ``conv_tol`` with no
    assignment change and no merge.
    """
    model.require_nonempty("skeleton refinement")
    fit = _Fit(model, metric)
    lam, k = cfg.lam, cfg.laplacian_k
    merge_dist = cfg.resolved_merge_dist
    nodes = skel.nodes.copy()
    clusters = skel.cluster_of_node.copy()
    assign = skel.assignment.copy()
    nodes, assign, clusters, _ = _merge_close(nodes, assign, clusters, merge_dist)

    trace = RefineTrace()
    trace.energies.append(_energy(fit, nodes, assign, lam, k))
    for it in range(1, cfg.max_iters + 1):
        new_assign = fit.reassign(nodes, workers=workers)
        changed = bool(np.any(new_assign != assign))
        assign = new_assign

        e0 = _energy(fit, nodes, assign, lam, k)
        step = _descent_direction(fit, nodes, assign, lam, k)
        norms = np.linalg.norm(step, axis=1)
        step *= np.minimum(1.0, cfg.step_size / np.maximum(norms, 1e-300))[:, None]
        longest = float(np.linalg.norm(step, axis=1).max())
        t, moved, merged = 1.0, 0.0, False
        while t * longest >= cfg.conv_tol:
            # a merge is part of the move: a step whose merges would cost energy is halved too
            trial = _merge_close(nodes + t * step, assign, clusters, merge_dist)
            if _energy(fit, trial[0], trial[1], lam, k) <= e0:
                nodes, assign, clusters, merged = trial
                moved = t * longest
                break
            t *= 0.5

        if merged:
            trace.merge_iterations.append(it)
        trace.energies.append(_energy(fit, nodes, assign, lam, k))
        trace.displacements.append(moved)
        trace.iterations = it
        if moved < cfg.conv_tol and not changed and not merged:
            trace.converged = True
            break

    # nodes that lost every Gaussian carry no data; drop them
    used = np.bincount(assign, minlength=len(nodes)) > 0
    if not used.all():
        new_index = np.cumsum(used) - 1
        assign = new_index[assign]
        nodes, clusters = nodes[used], clusters[used]
    return Skeleton(nodes, assign, clusters), trace


def extract_skeleton(model: GaussianModel, cfg: SkeletonConfig, method: str = "ga-l1", workers: int = 1):
    """DBSCAN initialization followed by refinement. ``method`` is ``"ga-l1"`` or ``"l1"``."""
    metric = {"ga-l1": "gaussian", "l1": "euclidean"}.get(method)
    if metric is None:
        raise ConfigError(f"unknown skeleton method {method!r}")
    init = dbscan_init(model, cfg, workers=workers)
    return refine(init, model, cfg, metric=metric, workers=workers)


def l1_baseline(model: GaussianModel, cfg: SkeletonConfig, workers: int = 1) -> Skeleton:
    """Same pipeline with a covariance-blind Euclidean data term."""
    return extract_skeleton(model, cfg, method="l1", workers=workers)[0]


# ---------------------------------------------------------------- metrics

def curvature_deviation_pct(nodes: np.ndarray, k: int = 2) -> float:
    """Mean normal part of the k-NN Laplacian, in percent of local node spacing.

    The tangential part only reflects uneven spacing along the curve, so it
    is projected out using the principal direction of each node together
    with its neighbours. Straight skeletons therefore score 0 whatever their
    spacing, endpoints included.
    """
    nodes = np.asarray(nodes, dtype=np.float64)
    n = len(nodes)
    if n < 3:
        return 0.0
    kk = min(k, n - 1)
    W = _neighbour_weights(nodes, kk)
    lap = nodes - W @ nodes
    rows, cols = W.nonzero()
    nbrs = cols[np.argsort(rows, kind="stable")].reshape(n, kk)
    patch = nodes[np.concatenate([np.arange(n)[:, None], nbrs], axis=1)]
    patch = patch - patch.mean(axis=1, keepdims=True)
    tangent = np.linalg.svd(patch)[2][:, 0, :]
    normal = lap - np.einsum("ni,ni->n", lap, tangent)[:, None] * tangent
    spacing = np.linalg.norm(nodes[:, None, :] - nodes[nbrs], axis=2).mean(axis=1)
    ok = spacing > 0
    if not ok.any():
        return 0.0
    return float(100.0 * np.mean(np.linalg.norm(normal[ok], axis=1) / spacing[ok]))


def connectivity(nodes: np.ndarray, groups: np.ndarray, eta: float = 3.0) -> float:
    """Share of per-group MST edges no longer than ``eta`` times the median MST edge."""
    nodes = np.asarray(nodes, dtype=np.float64)
    groups = np.asarray(groups)
    lengths = []
    for g in np.unique(groups):
        pts = nodes[groups == g]
        if len(pts) < 2:
            continue
        mst = minimum_spanning_tree(csr_matrix(squareform(pdist(pts))))
        e = mst.data
        # coincident nodes give zero-length edges that the sparse MST drops
        lengths.extend(e.tolist() + [0.0] * (len(pts) - 1 - len(e)))
    if not lengths:
        return 1.0
    lengths = np.asarray(lengths)
    med = float(np.median(lengths))
    return float(np.mean(lengths <= eta * med))


def skeleton_metrics(skel: Skeleton, reference=None, cfg: SkeletonConfig | None = None) -> dict:
    """Curvature deviation (%), connectivity, and optional Hausdorff distance.

    ``reference`` is a polyline sample array or a list of them. Connectivity
    is reported per DBSCAN cluster (``connectivity``) and over all nodes
    (``connectivity_global``).
    """
    cfg = cfg or SkeletonConfig()
    out = {
        "num_nodes": len(skel),
        "curv_dev_pct": curvature_deviation_pct(skel.nodes, cfg.laplacian_k),
        "connectivity": connectivity(skel.nodes, skel.cluster_of_node, cfg.connectivity_eta),
        "connectivity_global": connectivity(skel.nodes, np.zeros(len(skel)), cfg.connectivity_eta),
    }
    if reference is not None:
        if isinstance(reference, (list, tuple)):
            ref = np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1, 3) for r in reference])
        else:
            ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
        out["hausdorff"] = symmetric_hausdorff(skel.nodes, ref)
    return out


def with_config(cfg: SkeletonConfig, **overrides) -> SkeletonConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
