"""Joint label fusion: per-voxel pairwise dependency matrices, weight
solves, and weighted consensus voting, plus a majority-vote baseline.

The dependency matrix at a voxel is built from local appearance error:

    M(i, j) = [ mean over the patch of |I_T - I_i| * |I_T - I_j| ]^beta

regularized by adding epsilon on the diagonal; fusion weights solve
w = M^-1 1 / (1^t M^-1 1). Negative weights are allowed; the consensus
label is the score argmax with ties broken toward the lower label value.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume


@dataclass
class RegisteredAtlas:
    warped_image: "ScalarVolume"
    warped_labels: LabelVolume
    atlas_id: str = ""


@dataclass
class FusionConfig:
    patch_radius: int = 2
    search_radius: int = 0
    beta: float = 2.0
    epsilon: float = 0.1

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValueError("patch_radius must be >= 0")
        if self.beta <= 0 or self.epsilon <= 0:
            raise ValueError("beta and epsilon must be > 0")


@dataclass
class FusionOutput:
    consensus: LabelVolume
    probability: np.ndarray  # winning-label score, clipped to [0, 1]


def dependency_matrix(target_patch, atlas_patches, beta=2.0, epsilon=0.1):
    """Pairwise error-product matrix for one voxel's patches."""
    n = len(atlas_patches)
    if n == 0:
        raise ValueError("need at least one atlas patch")
    t = np.asarray(target_patch, dtype=np.float64).ravel()
    errs = [np.abs(t - np.asarray(p, dtype=np.float64).ravel())
            for p in atlas_patches]
    for e in errs:
        if e.shape != t.shape:
            raise ValueError("patches must share shape")
    m = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            m[i, j] = m[j, i] = np.mean(errs[i] * errs[j])
    return m ** beta + epsilon * np.eye(n)


def jlf_weights(m):
    """Solve w = M^-1 1 / (1^t M^-1 1); weights sum to exactly 1."""
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise ValueError("dependency matrix has non-finite entries")
    x = np.linalg.solve(m, np.ones(m.shape[0]))
    return x / x.sum()


def _check_shared_geometry(atlases):
    if len(atlases) == 0:
        raise ValueError("need at least one atlas")
    geom = atlases[0].warped_labels.geometry
    for a in atlases:
        if a.warped_image.geometry.dims != geom.dims \
                or a.warped_labels.geometry.dims != geom.dims:
            raise ValueError("atlases must share the target geometry")
    return geom


def _searched_errors(target_data, atlas_images, cfg):
    """Per-atlas absolute error maps, optionally after a local patch
    search that re-reads each atlas at its best-matching offset.

    The search picks, per voxel, the integer shift minimizing the local
    SSD within the patch window; the error map is then taken against the
    shifted atlas values. Patch products are still accumulated with a
    single box filter afterwards, so the offset is treated as locally
    constant within a patch.
    """
    size = 2 * cfg.patch_radius + 1
    errs = []
    for img in atlas_images:
        if cfg.search_radius == 0:
            errs.append(np.abs(target_data - img))
            continue
        r = cfg.search_radius
        best_ssd = None
        best_err = None
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    shifted = np.roll(img, (dx, dy, dz), axis=(0, 1, 2))
                    diff = target_data - shifted
                    ssd = ndimage.uniform_filter(diff * diff, size=size,
                                                 mode="constant")
                    err = np.abs(diff)
                    if best_ssd is None:
                        best_ssd, best_err = ssd, err
                    else:
                        better = ssd < best_ssd
                        best_ssd = np.where(better, ssd, best_ssd)
                        best_err = np.where(better, err, best_err)
        errs.append(best_err)
    return errs


def _vote(labels_stack, weights):
    """Accumulate per-label scores and take the tie-broken argmax."""
    label_values = np.unique(labels_stack)
    best_label = np.zeros(weights.shape[0], dtype=np.int32)
    best_score = np.full(weights.shape[0], -np.inf)
    for lv in sorted(int(v) for v in label_values):
        score = np.sum(weights * (labels_stack == lv), axis=1)
        better = score > best_score  # strict: first (lowest) label wins ties
        best_score[better] = score[better]
        best_label[better] = lv
    return best_label, best_score


def fuse(target_image, atlases, cfg=None):
    """Joint label fusion of registered atlases against the target image."""
    cfg = cfg or FusionConfig()
    geom = _check_shared_geometry(atlases)
    if target_image.geometry.dims != geom.dims:
        raise ValueError("target image must share the atlas geometry")
    n = len(atlases)
    size = 2 * cfg.patch_radius + 1

    errs = _searched_errors(target_image.data,
                            [a.warped_image.data for a in atlases], cfg)

    labels_data = np.stack([a.warped_labels.data for a in atlases], axis=-1)
    active = np.any(labels_data != 0, axis=-1)
    out = np.zeros(geom.dims, dtype=np.int32)
    prob = np.ones(geom.dims)
    if not np.any(active):
        return FusionOutput(LabelVolume(geom, out), prob)

    # patch-mean error products via box filtering, gathered at active voxels
    m = np.empty((int(active.sum()), n, n))
    for i in range(n):
        for j in range(i, n):
            prod = ndimage.uniform_filter(errs[i] * errs[j], size=size,
                                          mode="constant")
            m[:, i, j] = m[:, j, i] = prod[active]
    m = np.abs(m) ** cfg.beta
    m += cfg.epsilon * np.eye(n)

    x = np.linalg.solve(m, np.ones(n))
    weights = x / x.sum(axis=1, keepdims=True)

    labels_stack = labels_data[active]
    best_label, best_score = _vote(labels_stack, weights)
    out[active] = best_label
    prob[active] = np.clip(best_score, 0.0, 1.0)
    return FusionOutput(LabelVolume(geom, out), prob)


def majority_vote(atlases):
    """Uniform-weight voting with the same tie-break as fuse."""
    geom = _check_shared_geometry(atlases)
    n = len(atlases)
    labels_data = np.stack([a.warped_labels.data for a in atlases], axis=-1)
    active = np.any(labels_data != 0, axis=-1)
    out = np.zeros(geom.dims, dtype=np.int32)
    prob = np.ones(geom.dims)
    if np.any(active):
        labels_stack = labels_data[active]
        weights = np.full((labels_stack.shape[0], n), 1.0 / n)
        best_label, best_score = _vote(labels_stack, weights)
        out[active] = best_label
        prob[active] = np.clip(best_score, 0.0, 1.0)
    return FusionOutput(LabelVolume(geom, out), prob)
