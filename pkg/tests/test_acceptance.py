"""End-to-end acceptance suite.

Each test pins one system-level property with its tolerance and a wall
clock budget: similarity analytics, penalty nullspace and gradients,
fusion-oracle equivalence, registration recovery on phantoms with known
ground truth, metric oracles, the full pipeline, regularization
monotonicity, and post-processing invariants.
"""

import json
import time

import numpy as np
import pytest

from vertseg import nifti
from vertseg.fusion import (FusionConfig, RegisteredAtlas, dependency_matrix,
                            fuse, jlf_weights)
from vertseg.metrics import asd, dice
from vertseg.phantom import PhantomSpec, deform_phantom, make_phantom
from vertseg.pipeline import load_manifest, run_pipeline
from vertseg.postprocess import levelset_refine, morph_cleanup
from vertseg.registration import (RegistrationConfig, register_affine,
                                  register_ffd)
from vertseg.similarity import IntensityWindow, NmiObjective, nmi
from vertseg.transform import (AffineTransform, ComposedTransform,
                               FFDTransform, affine_apply, bending_energy,
                               compose_apply, lattice_covering)
from vertseg.volume import (GridGeometry, LabelVolume, ScalarVolume,
                            resample)


def _geom(dims, spacing=(1.0, 1.0, 1.0)):
    return GridGeometry(dims, spacing, (0.0, 0.0, 0.0))


# ---------------------------------------------------------------- 1: NMI

def test_nmi_analytic_values():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    g = _geom((32, 32, 32))
    data = rng.normal(150.0, 200.0, (32, 32, 32))
    a = ScalarVolume(g, data)
    b = ScalarVolume(g, data.copy())
    assert nmi(a, b) == pytest.approx(2.0, abs=1e-3)

    # independently constructed images: no shared structure
    c = ScalarVolume(g, rng.uniform(-400.0, 900.0, (32, 32, 32)))
    d = ScalarVolume(g, rng.uniform(-400.0, 900.0, (32, 32, 32)))
    assert nmi(c, d) == pytest.approx(1.0, abs=0.02)
    assert time.perf_counter() - t0 < 1.0


# --------------------------------------------- 2: bending-energy penalty

def test_bending_energy_nullspace_and_gradient():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)

    # any affine displacement field has zero curvature, hence P ~ 0
    lattice = _geom((7, 7, 7), spacing=(4.0, 4.0, 4.0))
    nodes = lattice.grid_world_points()
    # lattice domain [0, 24] with full support on [4, 16]
    sample = GridGeometry((8, 8, 8), (1.5, 1.5, 1.5), (4.5, 4.5, 4.5))
    for _ in range(5):
        m = rng.normal(0.0, 0.3, (3, 3))
        t = rng.normal(0.0, 5.0, 3)
        coef = nodes @ m.T + t  # displacement u(x) = m x + t at the nodes
        p, _ = bending_energy(FFDTransform(lattice, coef), sample,
                              with_gradient=False)
        assert p <= 1e-9

    # analytic gradient vs central finite differences, random lattices
    for k in range(10):
        lat = _geom((6, 6, 6), spacing=(3.0, 3.0, 3.0))
        coef = rng.normal(0.0, 2.0, (6, 6, 6, 3))
        # lattice domain [0, 15] with full support on [3, 9]
        samp = GridGeometry((5, 5, 5), (1.2, 1.2, 1.2), (3.2, 3.2, 3.2))
        _, grad = bending_energy(FFDTransform(lat, coef), samp)
        d = rng.normal(size=coef.shape)
        eps = 1e-5

        def val(c):
            return bending_energy(FFDTransform(lat, c), samp,
                                  with_gradient=False)[0]

        fd = (val(coef + eps * d) - val(coef - eps * d)) / (2 * eps)
        an = float(np.sum(grad * d))
        assert abs(fd - an) / max(abs(fd), 1e-12) <= 1e-6
    assert time.perf_counter() - t0 < 5.0


# --------------------------------------------------- 3: NMI gradient FD

def test_nmi_gradient_finite_difference_sweep():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    window = IntensityWindow(lo=-400.0, hi=900.0, bins=32)
    for k in range(20):
        dims = (16, 16, 16)
        base = rng.normal(200.0, 120.0, dims)
        target = ScalarVolume(_geom(dims), base + rng.normal(0, 8, dims))
        floating = ScalarVolume(_geom(dims), base)
        obj = NmiObjective(target, floating, window)

        geom = lattice_covering((-4.0,) * 3, (19.0,) * 3, 5.0)
        ffd = FFDTransform(geom, rng.normal(0, 0.25, geom.dims + (3,)))
        comp = ComposedTransform(AffineTransform.identity(), ffd)
        _, grad = obj.value_and_ffd_gradient(comp)

        d = rng.normal(size=ffd.coefficients.shape)
        eps = 1e-4

        def at(c):
            return obj.value(ComposedTransform(
                AffineTransform.identity(), FFDTransform(geom, c)))

        fd = (at(ffd.coefficients + eps * d)
              - at(ffd.coefficients - eps * d)) / (2 * eps)
        an = float(np.sum(grad * d))
        assert abs(fd - an) / max(abs(fd), 1e-12) <= 1e-4
    assert time.perf_counter() - t0 < 30.0


# ------------------------------------------------- 4: fusion oracle sweep

def _extract_patch(padded, center, size):
    i, j, k = center
    return padded[i:i + size, j:j + size, k:k + size].ravel()


def test_fusion_matches_brute_force_oracle_sweep():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cfg = FusionConfig(patch_radius=1, beta=2.0, epsilon=0.1)
    size = 2 * cfg.patch_radius + 1

    for trial in range(50):
        dims = tuple(rng.integers(4, 9, 3))
        n = int(rng.integers(1, 5))
        g = _geom(dims)
        tdata = rng.normal(100.0, 40.0, dims)
        target = ScalarVolume(g, tdata)
        atlases = []
        for _ in range(n):
            atlases.append(RegisteredAtlas(
                ScalarVolume(g, tdata + rng.normal(0, 20, dims)),
                LabelVolume(g, rng.integers(0, 4, dims))))

        got = fuse(target, atlases, cfg)

        padded = [np.pad(np.abs(tdata - a.warped_image.data),
                         cfg.patch_radius) for a in atlases]
        labels = np.stack([a.warped_labels.data for a in atlases], axis=-1)
        oracle = np.zeros(dims, dtype=np.int32)
        for idx in np.ndindex(dims):
            if not np.any(labels[idx] != 0):
                continue
            patches = [_extract_patch(p, idx, size) for p in padded]
            # implementation-path weights through the public helpers
            m = np.empty((n, n))
            for a in range(n):
                for b in range(n):
                    m[a, b] = np.mean(patches[a] * patches[b])
            m = m ** cfg.beta + cfg.epsilon * np.eye(n)
            w_impl = jlf_weights(m)
            # independent oracle: explicit inverse
            x = np.linalg.inv(m) @ np.ones(n)
            w_oracle = x / x.sum()
            assert abs(w_impl.sum() - 1.0) <= 1e-12
            assert np.max(np.abs(w_impl - w_oracle)) <= 1e-10

            scores = {}
            for a in range(n):
                lv = int(labels[idx][a])
                scores[lv] = scores.get(lv, 0.0) + w_oracle[a]
            best = max(scores.values())
            oracle[idx] = min(lv for lv, s in scores.items() if s == best)
        assert np.array_equal(got.consensus.data, oracle)
    assert time.perf_counter() - t0 < 10.0


# -------------------------------------------- 5: registration recovery

def test_registration_recovers_known_deformations():
    t0 = time.perf_counter()
    trans_cfg = RegistrationConfig(max_iters_per_level=10,
                                   max_sample_voxels=30000)
    ffd_cfg = RegistrationConfig(max_iters_per_level=15,
                                 max_sample_voxels=20000,
                                 control_spacing_mm=10.0)
    for seed in range(10):
        img, lbl, _ = make_phantom(PhantomSpec(noise_sd=20.0, seed=seed))
        fg_idx = np.argwhere(lbl.data > 0)[::97]
        fg_pts = img.geometry.voxel_to_world(fg_idx)

        if seed < 5:
            # three in-plane voxels of translation; recovered to half one
            wimg, _, truth = deform_phantom(img, lbl, kind="translation",
                                            magnitude=1.2, seed=seed)
            aff = register_affine(wimg, img, trans_cfg)
            err = np.linalg.norm(affine_apply(aff, fg_pts)
                                 - compose_apply(truth, fg_pts), axis=1)
            assert err.mean() <= 0.2  # 0.5 * 0.4 mm in-plane voxel
        else:
            wimg, _, truth = deform_phantom(img, lbl, kind="smooth_ffd",
                                            magnitude=4.0, seed=seed)
            pre = nmi(wimg, img)
            res = register_ffd(wimg, img, AffineTransform.identity(),
                               ffd_cfg)
            err = np.linalg.norm(
                compose_apply(res.transform, fg_pts)
                - compose_apply(truth, fg_pts), axis=1)
            assert err.mean() <= 1.0  # one (axial) voxel

            aligned = resample(img, img.geometry,
                               lambda p: compose_apply(res.transform, p))
            assert nmi(wimg, aligned) > pre
    assert time.perf_counter() - t0 < 300.0


# ----------------------------------------------------- 6: metric oracles

def _oracle_surface_idx(mask):
    out = []
    dims = mask.shape
    for idx in np.argwhere(mask):
        i, j, k = idx
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                  (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            ni, nj, nk = i + d[0], j + d[1], k + d[2]
            if 0 <= ni < dims[0] and 0 <= nj < dims[1] \
                    and 0 <= nk < dims[2] and not mask[ni, nj, nk]:
                out.append((i, j, k))
                break
    return np.array(out, dtype=float)


def test_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)

    # randomized fixtures against double-loop oracles
    g = _geom((8, 8, 8), spacing=(0.7, 1.0, 1.3))
    for _ in range(10):
        gt = rng.random((8, 8, 8)) < 0.45
        seg = rng.random((8, 8, 8)) < 0.45
        denom = gt.sum() + seg.sum()
        want_dice = 100.0 if denom == 0 else 200.0 * (gt & seg).sum() / denom
        assert dice(gt.astype(int), seg.astype(int)) \
            == pytest.approx(want_dice, abs=1e-9)
        if gt.any() and seg.any():
            sp = np.array(g.spacing)
            surf_gt = _oracle_surface_idx(gt) * sp
            surf_s = _oracle_surface_idx(seg) * sp
            want = np.mean([np.min(np.linalg.norm(surf_gt - p, axis=1))
                            for p in surf_s])
            assert asd(gt, seg, g) == pytest.approx(want, abs=1e-9)

    # half-overlap cube: 2*128 / (256 + 256) = 50%
    a = np.zeros((16, 16, 16), dtype=int)
    b = np.zeros((16, 16, 16), dtype=int)
    a[0:8, 0:8, 0:4] = 1
    b[4:12, 0:8, 0:4] = 1
    assert dice(a, b) == pytest.approx(50.0, abs=1e-9)

    # parallel plates exactly 3 mm apart
    gp = _geom((12, 8, 8), spacing=(1.0, 1.0, 1.0))
    gt = np.zeros((12, 8, 8), dtype=bool)
    seg = np.zeros((12, 8, 8), dtype=bool)
    gt[2] = True
    seg[5] = True
    assert asd(gt, seg, gp) == pytest.approx(3.0, abs=1e-9)
    assert time.perf_counter() - t0 < 5.0


# --------------------------------------------------- 7: full pipeline

def test_pipeline_end_to_end_phantom(tmp_path):
    t0 = time.perf_counter()

    # target: 5 vertebrae with the middle one compressed to 0.6 height
    spec = PhantomSpec(n_vertebrae=5, noise_sd=20.0, seed=0,
                       height_scale=(1.0, 1.0, 0.6, 1.0, 1.0))
    timg, tlbl, boxes = make_phantom(spec)
    nifti.write_volume(tmp_path / "target.nii", timg)
    nifti.write_volume(tmp_path / "target_labels.nii", tlbl)

    # atlases: uncompressed anatomy under five distinct smooth warps
    base_img, base_lbl, _ = make_phantom(
        PhantomSpec(n_vertebrae=5, noise_sd=20.0, seed=1))
    atlases = []
    for k in range(5):
        aimg, albl, _ = deform_phantom(base_img, base_lbl,
                                       kind="smooth_ffd", magnitude=3.0,
                                       seed=20 + k)
        nifti.write_volume(tmp_path / f"atlas{k}.nii", aimg)
        nifti.write_volume(tmp_path / f"atlas{k}_labels.nii", albl)
        atlases.append({
            "case_id": f"atlas{k}",
            "image": f"atlas{k}.nii",
            "labels": f"atlas{k}_labels.nii",
            "vertebra_labels": {f"V{i}": i for i in range(1, 6)},
            "order": [f"V{i}" for i in range(1, 6)],
        })

    doc = {
        "target": {
            "case_id": "case0",
            "image": "target.nii",
            "labels": "target_labels.nii",
            "vertebrae": [
                {"id": f"V{i + 1}", "label": i + 1,
                 "box": {"min": list(b.min_index),
                         "max": list(b.max_index)},
                 "tags": {"state": ("compressed" if i == 2 else "normal")}}
                for i, b in enumerate(boxes)
            ],
        },
        "atlases": atlases,
        "crop_margin_mm": 6.0,
        "registration": {"pyramid_levels": 2, "control_spacing_mm": 6.0,
                         "max_iters_per_level": 15,
                         "max_sample_voxels": 20000},
        "fusion": {"patch_radius": 1},
        "postprocess": {"min_island_voxels": 50, "levelset_iters": 20},
        "group_by": "state",
    }
    (tmp_path / "manifest.json").write_text(json.dumps(doc))

    run = run_pipeline(load_manifest(tmp_path / "manifest.json"))

    by_vertebra = {r.vertebra_id: r for r in run.rows}
    for r in run.rows:
        assert r.dice_pct >= 90.0, (r.vertebra_id, r.dice_pct)
        assert r.asd_mm <= 1.0, (r.vertebra_id, r.asd_mm)

    normal_mean = np.mean([by_vertebra[f"V{i}"].dice_pct
                           for i in (1, 2, 4, 5)])
    assert abs(by_vertebra["V3"].dice_pct - normal_mean) <= 5.0
    assert time.perf_counter() - t0 < 20 * 60.0


# --------------------------------------- 8: regularization monotonicity

def test_regularization_monotone_in_alpha():
    t0 = time.perf_counter()
    img, lbl, _ = make_phantom(PhantomSpec(
        n_vertebrae=3, dims=(48, 48, 72), spacing=(0.8, 0.8, 1.0),
        body_radii_mm=(7.0, 5.0, 7.0), noise_sd=15.0, seed=0))
    wimg, _, _ = deform_phantom(img, lbl, kind="smooth_ffd",
                                magnitude=3.0, seed=1)

    def final_p(alpha):
        cfg = RegistrationConfig(alpha=alpha, pyramid_levels=2,
                                 control_spacing_mm=8.0,
                                 max_iters_per_level=12,
                                 max_sample_voxels=15000)
        res = register_ffd(wimg, img, AffineTransform.identity(), cfg)
        return res.per_level_trace[-1][4]

    assert final_p(0.5) <= final_p(0.005)
    assert time.perf_counter() - t0 < 10 * 60.0


# --------------------------------------- 9: post-processing invariants

def test_postprocessing_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)

    # cleanup is idempotent on randomized label volumes
    for _ in range(20):
        data = (rng.random((12, 12, 12)) < 0.4).astype(np.int32) \
            * rng.integers(1, 4)
        vol = LabelVolume(_geom((12, 12, 12)), data)
        once = morph_cleanup(vol, min_island_voxels=5)
        twice = morph_cleanup(once, min_island_voxels=5)
        assert np.array_equal(once.data, twice.data)

    # zero-iteration level set is the identity
    g = _geom((10, 10, 10))
    intensity = ScalarVolume(g, rng.normal(size=(10, 10, 10)))
    mask = LabelVolume(g, (rng.random((10, 10, 10)) < 0.4).astype(np.int32))
    assert np.array_equal(levelset_refine(mask, intensity, iters=0).data,
                          mask.data)

    # refinement of an offset cylinder strictly increases Dice
    gc = _geom((24, 24, 24))
    zz, yy, xx = np.meshgrid(np.arange(24), np.arange(24), np.arange(24),
                             indexing="ij")
    truth = ((yy - 12.0) ** 2 + (xx - 12.0) ** 2 <= 36.0) \
        & (zz >= 4) & (zz < 20)
    cyl_img = ScalarVolume(gc, np.where(truth, 300.0, 0.0))
    init = np.roll(truth, 2, axis=1)
    refined = levelset_refine(LabelVolume(gc, init.astype(np.int32)),
                              cyl_img, iters=10)
    assert dice(truth.astype(int), refined.data) \
        > dice(truth.astype(int), init.astype(int))
    assert time.perf_counter() - t0 < 30.0
