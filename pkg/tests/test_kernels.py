import os
import subprocess
import sys

import numpy as np
import pytest
from scipy.spatial import cKDTree

from conftest import random_model
from gsfuse import kernels
from gsfuse.spatial import radius_graph

py = kernels.backend_module("python")
try:
    cy = kernels.backend_module("cython")
except ImportError:  # pragma: no cover
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def graph(rng, n=400, r=0.6):
    pts = rng.uniform(-2, 2, size=(n, 3))
    indptr, indices = radius_graph(cKDTree(pts), pts, r)
    return pts, indptr, indices


@needs_ext
def test_knn_parity(rng):
    m = random_model(rng, 500, log_scale=(-2.0, 0.0))
    means = np.ascontiguousarray(m.means)
    inv = np.ascontiguousarray(m.inverse_covariances)
    indptr, indices = radius_graph(cKDTree(means), means, 1.5)
    centers = np.arange(len(m), dtype=np.int64)
    a = py.mahalanobis_knn(indptr, indices, centers, means, inv, 8, 9.0)
    b = cy.mahalanobis_knn(indptr, indices, centers, means, inv, 8, 9.0)
    assert np.array_equal(a[0], b[0])
    assert np.allclose(a[1], b[1], rtol=1e-13, atol=0)


@needs_ext
def test_knn_tie_goes_to_lower_index():
    means = np.array([[0.0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    inv = np.tile(np.eye(3), (4, 1, 1))
    indptr = np.array([0, 4], dtype=np.int64)
    indices = np.array([3, 2, 1, 0], dtype=np.int64)
    for mod in (py, cy):
        nbr, d2 = mod.mahalanobis_knn(indptr, indices, np.array([0], dtype=np.int64), means, inv, 2, 10.0)
        assert nbr.tolist() == [[1, 2]]
        nbr, d2 = mod.mahalanobis_knn(indptr, indices, np.array([0], dtype=np.int64), means, inv, 5, 10.0)
        assert nbr.tolist() == [[1, 2, 3, -1, -1]] and np.isinf(d2[0, 3:]).all()


@needs_ext
def test_aggregate_parity(rng):
    m = random_model(rng, 300, log_scale=(-2.0, 0.0))
    means = np.ascontiguousarray(m.means)
    inv = np.ascontiguousarray(m.inverse_covariances)
    nbr = rng.integers(-1, 300, size=(300, 10)).astype(np.int64)
    kp = rng.normal(scale=0.3, size=(300, 7, 3))
    feats = rng.normal(size=(300, 5))
    a = py.kernel_aggregate(nbr, means, inv, kp, feats)
    b = cy.kernel_aggregate(nbr, means, inv, kp, feats)
    assert np.abs(a - b).max() < 1e-12


@needs_ext
def test_assign_parity(rng):
    m = random_model(rng, 400, log_scale=(-2.0, 0.0))
    nodes = rng.uniform(-2, 2, size=(30, 3))
    means = np.ascontiguousarray(m.means)
    inv = np.ascontiguousarray(m.inverse_covariances)
    indptr, indices = radius_graph(cKDTree(nodes), means, 1.0)
    a = py.assign_nearest(indptr, indices, means, inv, nodes)
    b = cy.assign_nearest(indptr, indices, means, inv, nodes)
    assert np.array_equal(a[0], b[0])
    assert np.allclose(a[1], b[1], rtol=1e-13)


@needs_ext
@pytest.mark.parametrize("min_pts", [1, 3, 6, 12])
def test_dbscan_parity(rng, min_pts):
    _, indptr, indices = graph(rng)
    assert np.array_equal(py.dbscan_labels(indptr, indices, min_pts), cy.dbscan_labels(indptr, indices, min_pts))


def test_pure_python_forced_by_env():
    env = {**os.environ, "GSFUSE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", "from gsfuse import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.backend_module("fortran")
