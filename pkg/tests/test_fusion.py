"""Label-fusion tests against a brute-force per-voxel oracle.

The oracle recomputes the dependency matrix with explicit zero-padded
patch loops and solves the weight system with an independent formula
(matrix inverse instead of solve), then votes with the same tie-break.
"""

import numpy as np
import pytest

from vertseg.fusion import (FusionConfig, RegisteredAtlas, dependency_matrix,
                            fuse, jlf_weights, majority_vote)
from vertseg.volume import GridGeometry, LabelVolume, ScalarVolume


def _geom(dims):
    return GridGeometry(dims, (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))


def _make_case(rng, dims, n_atlases, n_labels=3):
    geom = _geom(dims)
    target = ScalarVolume(geom, rng.normal(100, 40, dims))
    atlases = []
    for k in range(n_atlases):
        img = ScalarVolume(geom, target.data + rng.normal(0, 20, dims))
        lbl = LabelVolume(geom, rng.integers(0, n_labels + 1, dims))
        atlases.append(RegisteredAtlas(img, lbl, atlas_id=f"a{k}"))
    return target, atlases


def _oracle_fuse(target, atlases, cfg):
    """Direct per-voxel implementation of patch-error fusion."""
    dims = target.geometry.dims
    n = len(atlases)
    r = cfg.patch_radius
    size = 2 * r + 1

    pad = [np.pad(np.abs(target.data - a.warped_image.data), r)
           for a in atlases]

    out = np.zeros(dims, dtype=np.int32)
    weights_map = {}
    labels = np.stack([a.warped_labels.data for a in atlases], axis=-1)
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                if not np.any(labels[i, j, k] != 0):
                    continue
                patches = [p[i:i + size, j:j + size, k:k + size].ravel()
                           for p in pad]
                m = np.empty((n, n))
                for a in range(n):
                    for b in range(n):
                        m[a, b] = np.mean(patches[a] * patches[b])
                m = m ** cfg.beta + cfg.epsilon * np.eye(n)
                x = np.linalg.inv(m) @ np.ones(n)
                w = x / x.sum()
                weights_map[(i, j, k)] = w
                scores = {}
                for a in range(n):
                    lv = int(labels[i, j, k, a])
                    scores[lv] = scores.get(lv, 0.0) + w[a]
                best = max(sorted(scores), key=lambda lv: (scores[lv], -lv))
                # explicit tie-break: highest score, then lowest label
                best_score = max(scores.values())
                cands = [lv for lv, s in scores.items()
                         if s == best_score]
                out[i, j, k] = min(cands)
                assert out[i, j, k] == best
    return out, weights_map


def test_dependency_matrix_known_values():
    # one-voxel patches: M(i, j) = (|t - pi| * |t - pj|)^beta + eps * I
    m = dependency_matrix([5.0], [[3.0], [8.0]], beta=1.0, epsilon=0.1)
    assert m[0, 0] == pytest.approx(4.0 + 0.1)
    assert m[0, 1] == pytest.approx(6.0)
    assert m[1, 1] == pytest.approx(9.0 + 0.1)


def test_dependency_matrix_validation():
    with pytest.raises(ValueError):
        dependency_matrix([1.0], [])
    with pytest.raises(ValueError):
        dependency_matrix([1.0, 2.0], [[1.0, 2.0, 3.0]])


def test_jlf_weights_sum_to_one_and_match_inverse():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(4, 4))
        m = a @ a.T + 0.5 * np.eye(4)
        w = jlf_weights(m)
        assert abs(w.sum() - 1.0) <= 1e-12
        x = np.linalg.inv(m) @ np.ones(4)
        assert np.allclose(w, x / x.sum(), atol=1e-10)


def test_jlf_weights_identical_atlases_share_weight():
    m = dependency_matrix([1.0, 2.0], [[0.5, 1.5]] * 3, beta=2.0, epsilon=0.1)
    w = jlf_weights(m)
    assert np.allclose(w, 1.0 / 3.0, atol=1e-12)


def test_jlf_weights_rejects_nonfinite():
    with pytest.raises(ValueError):
        jlf_weights(np.array([[np.inf, 0.0], [0.0, 1.0]]))


def test_fuse_matches_oracle_randomized():
    rng = np.random.default_rng(1)
    cfg = FusionConfig(patch_radius=1, beta=2.0, epsilon=0.1)
    for trial in range(10):
        dims = tuple(rng.integers(4, 9, 3))
        n = int(rng.integers(1, 5))
        target, atlases = _make_case(rng, dims, n)
        got = fuse(target, atlases, cfg)
        want, _ = _oracle_fuse(target, atlases, cfg)
        assert np.array_equal(got.consensus.data, want)


def test_fuse_single_atlas_returns_its_labels():
    rng = np.random.default_rng(2)
    target, atlases = _make_case(rng, (5, 5, 5), 1)
    out = fuse(target, atlases)
    assert np.array_equal(out.consensus.data, atlases[0].warped_labels.data)


def test_fuse_background_unanimity_stays_background():
    rng = np.random.default_rng(3)
    target, atlases = _make_case(rng, (6, 6, 6), 3)
    for a in atlases:
        a.warped_labels.data[:3] = 0
    out = fuse(target, atlases)
    assert np.all(out.consensus.data[:3] == 0)


def test_fuse_tie_breaks_to_lowest_label():
    geom = _geom((3, 3, 3))
    target = ScalarVolume(geom, np.zeros((3, 3, 3)))
    # two atlases with identical images -> equal weights -> tied scores
    a1 = RegisteredAtlas(ScalarVolume(geom, np.zeros((3, 3, 3))),
                         LabelVolume(geom, np.full((3, 3, 3), 2)))
    a2 = RegisteredAtlas(ScalarVolume(geom, np.zeros((3, 3, 3))),
                         LabelVolume(geom, np.full((3, 3, 3), 1)))
    out = fuse(target, [a1, a2])
    assert np.all(out.consensus.data == 1)


def test_fuse_probability_range():
    rng = np.random.default_rng(4)
    target, atlases = _make_case(rng, (6, 6, 6), 3)
    out = fuse(target, atlases)
    assert np.all(out.probability >= 0.0)
    assert np.all(out.probability <= 1.0)


def test_fuse_geometry_checks():
    rng = np.random.default_rng(5)
    target, atlases = _make_case(rng, (5, 5, 5), 2)
    with pytest.raises(ValueError):
        fuse(target, [])
    bad = ScalarVolume(_geom((6, 6, 6)), np.zeros((6, 6, 6)))
    with pytest.raises(ValueError):
        fuse(bad, atlases)


def test_fuse_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(patch_radius=-1)
    with pytest.raises(ValueError):
        FusionConfig(beta=0.0)
    with pytest.raises(ValueError):
        FusionConfig(epsilon=0.0)


def test_majority_vote_counts_and_ties():
    geom = _geom((2, 2, 2))
    img = ScalarVolume(geom, np.zeros((2, 2, 2)))

    def atlas(lv):
        return RegisteredAtlas(img, LabelVolume(geom, np.full((2, 2, 2), lv)))

    out = majority_vote([atlas(2), atlas(2), atlas(3)])
    assert np.all(out.consensus.data == 2)
    out = majority_vote([atlas(3), atlas(1)])  # tie -> lower label
    assert np.all(out.consensus.data == 1)
