import math

import numpy as np
import pytest

from conftest import isotropic_model, random_model
from gsfuse.errors import ConfigError, DegenerateInputError
from gsfuse.model import GaussianModel
from gsfuse.skeleton import (Skeleton, SkeletonConfig, _Fit, connectivity, curvature_deviation_pct, dbscan,
                             dbscan_init, energy, extract_skeleton, g2d_distance, l1_baseline,
                             node_density_sums, refine, skeleton_metrics)
from gsfuse.spatial import symmetric_hausdorff
from gsfuse.synth import SceneSpec, Structure, generate


# ---------------------------------------------------------------- oracles

def naive_dbscan(points, eps, min_pts):
    """Textbook sequential-scan DBSCAN on a dense distance matrix."""
    n = len(points)
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    nbrs = [[j for j in range(n) if j != i and d[i, j] <= eps] for i in range(n)]
    core = [len(nb) >= min_pts for nb in nbrs]
    labels = [None] * n
    cluster = -1
    for i in range(n):
        if labels[i] is not None:
            continue
        if not core[i]:
            labels[i] = -1
            continue
        cluster += 1
        labels[i] = cluster
        queue = list(nbrs[i])
        while queue:
            j = queue.pop(0)
            if labels[j] == -1:
                labels[j] = cluster
            if labels[j] is not None:
                continue
            labels[j] = cluster
            if core[j]:
                queue.extend(nbrs[j])
    return np.array(labels)


def dense_inv(S):
    return np.linalg.inv(S)


def brute_density(model, node, i):
    d = node - model.means[i]
    return math.exp(-0.5 * d @ dense_inv(model.covariances[i]) @ d)


def brute_energy(model, skel, lam, k):
    fit = 0.0
    for j in range(len(skel)):
        for i in range(len(model)):
            if skel.assignment[i] == j:
                fit -= brute_density(model, skel.nodes[j], i)
    reg = 0.0
    q = skel.nodes
    for j in range(len(q)):
        others = sorted((float(np.linalg.norm(q[j] - q[o])), o) for o in range(len(q)) if o != j)
        take = [o for _, o in others[:min(k, len(q) - 1)]]
        if take:
            lap = q[j] - q[take].mean(axis=0)
            reg += float(lap @ lap)
    return fit + lam * reg


def bead_ring(seed, beads=16, radius=2.0):
    """Compact clumps on a circle plus faint off-curve floaters."""
    L = 0.01
    gap = (2 * math.pi * radius - beads * L) / beads
    st = Structure("arc", {"center": [0, 0, 0], "radius": radius, "start_deg": 0,
                           "end_deg": 360 - math.degrees(gap / radius)},
                   density=3000, scale=0.05, clumps=beads, clump_gap=gap,
                   floater_fraction=0.25, floater_offset=0.15, floater_scale=0.1)
    return generate(SceneSpec([st], seed=seed))


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        SkeletonConfig(dbscan_eps=0)
    with pytest.raises(ConfigError):
        SkeletonConfig(laplacian_k=1)
    with pytest.raises(ConfigError):
        SkeletonConfig(max_iters=0)
    assert SkeletonConfig(dbscan_eps=0.8).resolved_merge_dist == 0.4


# ---------------------------------------------------------------- DBSCAN

@pytest.mark.parametrize("seed", range(6))
def test_dbscan_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    centres = rng.uniform(-3, 3, size=(6, 3))
    pts = np.concatenate([centres[rng.integers(0, 6, 400)] + rng.normal(scale=0.3, size=(400, 3)),
                          rng.uniform(-4, 4, size=(100, 3))])
    for eps, mp in ((0.3, 4), (0.5, 6), (0.7, 8)):
        assert np.array_equal(dbscan(pts, eps, mp), naive_dbscan(pts, eps, mp))


def test_dbscan_matches_oracle_at_2000(rng):
    pts = rng.uniform(0, 10, size=(2000, 3))
    assert np.array_equal(dbscan(pts, 0.8, 5), naive_dbscan(pts, 0.8, 5))


def test_two_blobs_two_nodes(rng):
    a = rng.normal(scale=0.05, size=(50, 3))
    b = rng.normal(scale=0.05, size=(50, 3)) + [5, 0, 0]
    m = isotropic_model(np.concatenate([a, b]), 0.05)
    sk = dbscan_init(m, SkeletonConfig(dbscan_eps=0.5))
    assert len(sk) == 2
    assert np.allclose(sk.nodes, [a.mean(0), b.mean(0)], atol=1e-12)
    assert np.array_equal(sk.assignment, [0] * 50 + [1] * 50)


def test_identical_positions_one_node():
    m = isotropic_model(np.ones((20, 3)), 0.1)
    sk = dbscan_init(m, SkeletonConfig())
    assert len(sk) == 1 and np.allclose(sk.nodes[0], 1.0)


def test_all_noise_is_degenerate():
    m = isotropic_model(np.arange(30)[:, None] * np.array([[10.0, 0, 0]]), 0.1)
    with pytest.raises(DegenerateInputError, match="dbscan"):
        dbscan_init(m, SkeletonConfig())


def test_noise_goes_to_nearest_node(rng):
    blob = rng.normal(scale=0.05, size=(30, 3))
    m = isotropic_model(np.concatenate([blob, [[2.0, 0, 0]]]), 0.05)
    sk = dbscan_init(m, SkeletonConfig())
    assert len(sk) == 1 and sk.assignment[-1] == 0


def test_empty_model_rejected():
    with pytest.raises(DegenerateInputError):
        dbscan_init(GaussianModel.empty(), SkeletonConfig())


# ---------------------------------------------------------------- G2D and energy

def one(mean=(0, 0, 0), log_scale=(0, 0, 0)):
    return GaussianModel(np.array([mean], float), np.array([log_scale], float), np.array([[1.0, 0, 0, 0]]),
                         np.zeros(1), np.zeros((1, 3)), np.zeros((1, 0, 3)))


def test_g2d_at_mean_is_one():
    m = one()
    assert g2d_distance(m, Skeleton([[0, 0, 0]], [0], [0]), 0) == 1.0


def test_g2d_at_mahalanobis_sqrt2():
    m = one(log_scale=(math.log(2), 0, 0))
    sk = Skeleton([[2 * math.sqrt(2), 0, 0]], [0], [0])
    assert g2d_distance(m, sk, 0) == pytest.approx(math.exp(-1), abs=1e-12)


def test_g2d_and_node_sums_match_brute_force(rng):
    m = random_model(rng, 100, log_scale=(-1.0, 0.5))
    nodes = rng.uniform(-2, 2, size=(10, 3))
    sk = Skeleton(nodes, rng.integers(0, 10, size=100), np.arange(10))
    sums = node_density_sums(m, sk)
    for j in range(10):
        oracle = sum(brute_density(m, nodes[j], i) for i in range(100) if sk.assignment[i] == j)
        assert sums[j] == pytest.approx(oracle, abs=1e-12)
    for i in range(100):
        oracle = sum(brute_density(m, nodes[j], i) for j in range(10) if sk.assignment[i] == j)
        assert g2d_distance(m, sk, i) == pytest.approx(oracle, abs=1e-12)


def test_energy_single_node():
    assert energy(Skeleton([[0, 0, 0]], [0], [0]), one(), SkeletonConfig(lam=0.0)) == -1.0


def test_energy_straight_line_has_no_penalty():
    nodes = np.arange(6)[:, None] * np.array([[0.5, 0.2, 0.0]])
    m = isotropic_model(nodes, 0.1)
    sk = Skeleton(nodes, np.arange(6), np.zeros(6))
    e0 = energy(sk, m, SkeletonConfig(lam=0.0))
    # endpoints' two nearest neighbours lie on one side, so use the interior
    e1 = energy(sk, m, SkeletonConfig(lam=1.0))
    lap_end = nodes[0] - nodes[1:3].mean(0)
    assert e1 - e0 == pytest.approx(2 * float(lap_end @ lap_end), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_energy_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, 80, log_scale=(-1.0, 0.5))
    k_nodes = int(rng.integers(1, 9))
    sk = Skeleton(rng.uniform(-2, 2, size=(k_nodes, 3)), rng.integers(0, k_nodes, 80), np.arange(k_nodes))
    for lam, k in ((0.0, 2), (0.1, 2), (0.7, 3)):
        cfg = SkeletonConfig(lam=lam, laplacian_k=k)
        assert energy(sk, m, cfg) == pytest.approx(brute_energy(m, sk, lam, k), abs=1e-10)


def test_reassign_is_greedy_optimal(rng):
    m = random_model(rng, 300, log_scale=(-2.0, 0.0))
    nodes = rng.uniform(-2, 2, size=(12, 3))
    fit = _Fit(m, "gaussian")
    new = fit.reassign(nodes)
    for i in range(len(m)):
        dens = [brute_density(m, nodes[j], i) for j in range(12)]
        assert dens[new[i]] == pytest.approx(max(dens), abs=1e-12)
    old = rng.integers(0, 12, 300)
    data = lambda a: -np.exp(-0.5 * fit.mahal_sq(nodes, a)).sum()
    assert data(new) <= data(old)


# ---------------------------------------------------------------- refine

def test_refine_stays_at_minimum(rng):
    # point-symmetric blob: the mean is a stationary point of the summed density
    half = rng.normal(scale=0.1, size=(100, 3))
    pts = np.concatenate([half, -half]) + [0.5, -0.2, 0.1]
    m = isotropic_model(pts, 0.1)
    start = Skeleton([pts.mean(0)], np.zeros(200), [0])
    cfg = SkeletonConfig(lam=0.0)
    sk, tr = refine(start, m, cfg)
    assert tr.converged
    assert np.linalg.norm(sk.nodes[0] - pts.mean(0)) < cfg.conv_tol
    assert max(tr.displacements) < cfg.conv_tol


def test_refine_merges_close_nodes(rng):
    pts = rng.normal(scale=0.05, size=(100, 3))
    m = isotropic_model(pts, 0.05)
    start = Skeleton([[0.0, 0, 0], [0.1, 0, 0]], np.repeat([0, 1], 50), [0, 1])
    sk, _ = refine(start, m, SkeletonConfig(merge_dist=0.25))
    assert len(sk) == 1


def test_refine_invariants_and_trace(rng):
    m, _ = bead_ring(3)
    cfg = SkeletonConfig(dbscan_eps=0.3)
    sk, tr = extract_skeleton(m, cfg)
    assert np.all(np.diff(tr.energies) <= 1e-12)
    assert np.bincount(sk.assignment, minlength=len(sk)).min() >= 1
    d = np.linalg.norm(sk.nodes[:, None] - sk.nodes[None], axis=-1) + np.eye(len(sk)) * 1e9
    assert d.min() >= cfg.resolved_merge_dist


@pytest.mark.parametrize("seed", range(5))
def test_refine_improves_hausdorff(seed):
    m, truth = bead_ring(seed)
    cfg = SkeletonConfig(dbscan_eps=0.3)
    init = dbscan_init(m, cfg)
    sk, _ = refine(init, m, cfg)
    ref = truth.skeleton_polylines[0]
    assert symmetric_hausdorff(sk.nodes, ref) < symmetric_hausdorff(init.nodes, ref)


def test_isotropic_ga_equals_l1(rng):
    centres = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [3, 3, 1.0]])
    pts = np.concatenate([c + rng.normal(scale=0.08, size=(60, 3)) for c in centres])
    m = isotropic_model(pts, 0.08)
    cfg = SkeletonConfig()
    ga, _ = extract_skeleton(m, cfg)
    l1 = l1_baseline(m, cfg)
    assert len(ga) == len(l1) >= 1
    assert symmetric_hausdorff(ga.nodes, l1.nodes) <= 10 * cfg.conv_tol


def test_unknown_method():
    with pytest.raises(ConfigError):
        extract_skeleton(one(), SkeletonConfig(), method="medial")


# ---------------------------------------------------------------- metrics

def test_metrics_straight_line():
    nodes = np.arange(10)[:, None] * np.array([[0.3, 0.1, -0.2]])
    assert curvature_deviation_pct(nodes) == pytest.approx(0.0, abs=1e-9)
    uneven = np.cumsum([0, 1, 0.2, 3, 0.5, 0.5, 2])[:, None] * np.array([[1.0, 0, 0]])
    assert curvature_deviation_pct(uneven) == pytest.approx(0.0, abs=1e-9)


def test_curvature_positive_on_circle():
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    circle = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], 1)
    # Laplacian of a regular polygon is (1 - cos(2pi/n)) r, spacing 2 r sin(pi/n)
    expected = 100 * (1 - math.cos(2 * math.pi / 12)) / (2 * math.sin(math.pi / 12))
    assert curvature_deviation_pct(circle) == pytest.approx(expected, rel=1e-9)


def test_connectivity_examples():
    line = np.arange(5)[:, None] * np.array([[1.0, 0, 0]])
    assert connectivity(line, np.zeros(5)) == 1.0
    gapped = np.concatenate([line, line[-1] + [[10.0, 0, 0]]])
    assert connectivity(gapped, np.zeros(6)) == pytest.approx(4 / 5)
    assert connectivity(gapped, np.array([0, 0, 0, 0, 0, 1])) == 1.0


def test_metrics_single_node_and_reference():
    sk = Skeleton([[1.0, 2, 3]], [0], [0])
    out = skeleton_metrics(sk, reference=[[1.0, 2, 3]])
    assert out["curv_dev_pct"] == 0 and out["connectivity"] == 1 and out["hausdorff"] == 0


def test_skeleton_json_roundtrip(tmp_path, rng):
    sk = Skeleton(rng.normal(size=(4, 3)), [0, 1, 2, 3, 3], [0, 0, 1, 1])
    sk.save(tmp_path / "s.json")
    back = Skeleton.load(tmp_path / "s.json")
    assert np.array_equal(back.nodes, sk.nodes) and np.array_equal(back.assignment, sk.assignment)
