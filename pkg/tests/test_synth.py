import json

import numpy as np
import pytest

from gsfuse.errors import ConfigError, DegenerateInputError, FormatError
from gsfuse.model import apply_transform
from gsfuse.synth import (GroundTruth, SceneSpec, Structure, generate, planted_ridge_pair,
                          random_scene_spec, random_transform, split_pair)
from gsfuse.transform import SimilarityTransform


@pytest.mark.parametrize("density,length", [(40.0, 2.0), (55.0, 3.3), (100.0, 0.77)])
def test_line_count(density, length):
    st = Structure("line", {"p0": [0, 0, 0], "p1": [length, 0, 0]}, density)
    m, truth = generate(SceneSpec([st]))
    assert abs(len(m) - round(density * length)) <= 1
    assert np.all(truth.structure_ids == 0) and not truth.floater_labels.any()
    # tangent first: each primitive's long axis follows the line
    R = m.rotation_matrices
    assert np.allclose(np.abs(R[:, :, 0]), [1, 0, 0], atol=1e-6)


def test_plane_is_coplanar():
    st = Structure("plane", {"center": [1, 2, 3], "u": [1.0, 1.0, 0], "v": [0, 0.3, 0.7]}, 200.0)
    m, _ = generate(SceneSpec([st], seed=4))
    n = np.cross([1.0, 1.0, 0], [0, 0.3, 0.7])
    n /= np.linalg.norm(n)
    assert np.max(np.abs((m.means - [1, 2, 3]) @ n)) < 1e-12


def test_generate_deterministic():
    spec = random_scene_spec(3)
    m1, t1 = generate(spec)
    m2, t2 = generate(SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict()))))
    assert m1 == m2 and np.array_equal(t1.detail_labels, t2.detail_labels)
    m3, _ = generate(random_scene_spec(4))
    assert len(m3) != len(m1) or not np.array_equal(m3.means, m1.means)


def test_noise_and_floaters():
    st = Structure("line", {"p0": [0, 0, 0], "p1": [4, 0, 0]}, 200.0, floater_fraction=0.2)
    m, truth = generate(SceneSpec([st], noise_sigma=0.0))
    assert truth.floater_labels.sum() == round(0.2 * len(m))
    off = np.linalg.norm(m.means[:, 1:], axis=1)
    assert np.all(off[~truth.floater_labels] == 0) and np.all(off[truth.floater_labels] > 0)
    noisy, _ = generate(SceneSpec([st], noise_sigma=0.01))
    d = noisy.means - m.means
    assert 0.007 < d.std() < 0.013


def test_ridge_detail_labels():
    st = Structure("ridge", {"center": [0, 0, 0], "u": [0, 0.5, 0], "v": [0.3, 0, 0], "fold_deg": 60.0}, 300.0,
                   detail_band=0.08)
    m, truth = generate(SceneSpec([st]))
    det = truth.detail_labels
    assert det.any() and not det.all()
    # detail Gaussians sit on the fold, which runs along y through the centre
    assert np.max(np.abs(m.means[det][:, 0])) < np.median(np.abs(m.means[~det][:, 0]))
    assert np.exp(m.log_scales[det]).max(axis=1).mean() < np.exp(m.log_scales[~det]).max(axis=1).mean()


@pytest.mark.parametrize("f", [0.2, 0.5, 0.8])
def test_split_overlap_fraction(f):
    m, truth = generate(random_scene_spec(1))
    A, B, gt = split_pair(m, f, SimilarityTransform(), truth=truth)
    assert gt.overlap_a.sum() == gt.overlap_b.sum()
    assert gt.overlap_a.sum() / len(m) == pytest.approx(f, abs=0.02)
    assert len(A) == len(B) == len(gt.source_a) == len(gt.source_b)
    assert len(np.union1d(gt.source_a, gt.source_b)) == len(m)


def test_split_identity_transform_coincides():
    m, truth = generate(random_scene_spec(2))
    A, B, gt = split_pair(m, 0.5, SimilarityTransform(), truth=truth)
    both, ia, ib = np.intersect1d(gt.source_a, gt.source_b, return_indices=True)
    assert np.array_equal(A.means[ia], B.means[ib])
    assert np.array_equal(gt.overlap_a, np.isin(gt.source_a, both))


def test_split_places_b_in_its_own_frame():
    m, truth = generate(random_scene_spec(5))
    T = random_transform(np.random.default_rng(0))
    A, B, gt = split_pair(m, 0.5, T, truth=truth)
    back = apply_transform(B, T)
    assert np.allclose(back.means, m.means[gt.source_b], atol=1e-9)
    assert np.allclose(back.covariances, m.covariances[gt.source_b], atol=1e-9)


def test_planted_pair_coarsens_a_only():
    A, B, gt = planted_ridge_pair(0)
    _, truth = generate_ridge_truth(0)
    assert not gt.detail_a.any() and gt.detail_b.any()
    lost = truth.detail_labels[gt.source_a]
    assert lost.any()  # some coarse blobs survive in A
    # A keeps one detail Gaussian in four, while B keeps its full share of the band
    total = truth.detail_labels.sum()
    assert lost.sum() < 0.3 * total


def generate_ridge_truth(seed):
    from gsfuse.synth import planted_ridge_spec
    return generate(planted_ridge_spec(seed))


def test_ground_truth_roundtrip(tmp_path):
    A, B, gt = planted_ridge_pair(1)
    gt.save(tmp_path / "gt.json")
    back = GroundTruth.load(tmp_path / "gt.json")
    assert back.transform.to_dict() == gt.transform.to_dict()
    for name in ("overlap_a", "overlap_b", "detail_a", "detail_b", "source_a", "source_b"):
        assert np.array_equal(getattr(back, name), getattr(gt, name))
    assert np.allclose(back.structure_samples, gt.structure_samples)
    assert back.sample_spacing == gt.sample_spacing


def test_bad_inputs(tmp_path):
    m, _ = generate(random_scene_spec(0))
    for f in (0.0, 1.0, -0.2):
        with pytest.raises(ConfigError):
            split_pair(m, f, SimilarityTransform())
    with pytest.raises(DegenerateInputError):
        split_pair(m.subset([0]), 0.5, SimilarityTransform())
    with pytest.raises(ConfigError):
        Structure("blob", {}, 1.0)
    with pytest.raises(ConfigError):
        Structure("line", {"p0": [0, 0, 0], "p1": [1, 0, 0]}, 0.0)
    with pytest.raises(ConfigError):
        SceneSpec([])
    with pytest.raises(FormatError):
        SceneSpec.from_dict({"structures": [], "colour": 1})
    (tmp_path / "gt.json").write_text("{}")
    with pytest.raises(FormatError):
        GroundTruth.load(tmp_path / "gt.json")
