"""Morphological label correction: island removal and hole closing,
collision resolution between vertebrae by a linear score, and level-set
boundary refinement driven by the intensity Laplacian.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

_CONN26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class VertebraInstance:
    label: int
    center: np.ndarray  # world mm
    mean_intensity: float


@dataclass
class CollisionPolicy:
    w_intensity: float = 1.0
    w_distance: float = 1.0

    def __post_init__(self):
        if self.w_intensity == 0.0 and self.w_distance == 0.0:
            raise ValueError("at least one collision weight must be nonzero")


def instance_from_mask(label, mask, intensity):
    """Build a VertebraInstance (centroid + mean HU) from a binary mask."""
    idx = np.argwhere(mask)
    if idx.size == 0:
        raise ValueError(f"empty mask for label {label}")
    center_idx = idx.mean(axis=0)
    center = intensity.geometry.voxel_to_world(center_idx)
    return VertebraInstance(label=int(label), center=np.asarray(center),
                            mean_intensity=float(intensity.data[mask].mean()))


def morph_cleanup(lbl, min_island_voxels=50):
    """Remove small 26-connected islands (keeping only each label's
    largest component) and fill 6-connected cavities fully enclosed by a
    single label. Idempotent."""
    if min_island_voxels < 0:
        raise ValueError("min_island_voxels must be >= 0")
    data = lbl.data.copy()
    for lv in lbl.labels():
        mask = data == lv
        comps, ncomp = ndimage.label(mask, structure=_CONN26)
        if ncomp <= 1 and mask.sum() >= min_island_voxels:
            continue
        sizes = np.bincount(comps.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        drop = mask & (comps != keep)
        if sizes[keep - 1] < min_island_voxels:
            drop = mask
        data[drop] = 0

    # cavity fill: 6-connected background components not touching the
    # border and adjacent to exactly one label
    bg = data == 0
    comps, ncomp = ndimage.label(bg)  # default structure = 6-connectivity
    if ncomp:
        border_ids = set()
        for axis in range(3):
            for side in (0, -1):
                face = np.take(comps, side, axis=axis)
                border_ids.update(np.unique(face).tolist())
        objects = ndimage.find_objects(comps)
        for cid in range(1, ncomp + 1):
            if cid in border_ids:
                continue
            sl = objects[cid - 1]
            grown = tuple(slice(max(0, s.start - 1), s.stop + 1) for s in sl)
            comp_mask = comps[grown] == cid
            shell = ndimage.binary_dilation(comp_mask) & ~comp_mask
            neighbors = np.unique(data[grown][shell])
            neighbors = neighbors[neighbors != 0]
            if len(neighbors) == 1:
                local = data[grown]
                local[comp_mask] = neighbors[0]
    return LabelVolume(lbl.geometry, data)


def resolve_collisions(per_vertebra_masks, intensity, instances, policy=None):
    """Assign voxels claimed by multiple vertebrae to the instance with the
    best linear score over z-standardized intensity and distance features."""
    policy = policy or CollisionPolicy()
    if len(instances) == 0:
        raise ValueError("no vertebra instances given")
    if len(per_vertebra_masks) != len(instances):
        raise ValueError("one mask per instance required")
    geom = intensity.geometry
    masks = []
    for m in per_vertebra_masks:
        arr = m.data if isinstance(m, LabelVolume) else np.asarray(m)
        if arr.shape != geom.dims:
            raise ValueError("masks must share the intensity geometry")
        masks.append(arr != 0)

    claims = np.stack(masks, axis=-1)
    count = claims.sum(axis=-1)
    out = np.zeros(geom.dims, dtype=np.int32)
    for mask, inst in zip(masks, instances):
        sole = mask & (count == 1)
        out[sole] = inst.label

    contested = count >= 2
    if not np.any(contested):
        return LabelVolume(geom, out)

    idx = np.argwhere(contested)
    pts = geom.voxel_to_world(idx)
    ivals = intensity.data[contested]

    feats_int, feats_dist, pairs = [], [], []
    claim_stack = claims[contested]  # (V, n)
    for vi, inst in enumerate(instances):
        sel = claim_stack[:, vi]
        if not np.any(sel):
            continue
        feats_int.append(np.abs(ivals[sel] - inst.mean_intensity))
        feats_dist.append(np.linalg.norm(pts[sel] - inst.center, axis=1))
        pairs.append((vi, sel))

    all_int = np.concatenate(feats_int)
    all_dist = np.concatenate(feats_dist)

    def z(values, pool):
        sd = pool.std()
        return (values - pool.mean()) / (sd if sd > 1e-12 else 1.0)

    nvox = claim_stack.shape[0]
    best_score = np.full(nvox, -np.inf)
    winner = np.zeros(nvox, dtype=np.int64)
    for (vi, sel), fi, fd in zip(pairs, feats_int, feats_dist):
        score = (-policy.w_intensity * z(fi, all_int)
                 - policy.w_distance * z(fd, all_dist))
        cur = np.full(nvox, -np.inf)
        cur[sel] = score
        better = cur > best_score  # ties keep the earlier (lower) label
        best_score[better] = cur[better]
        winner[better] = instances[vi].label
    out[contested] = winner
    return LabelVolume(geom, out)


def _curvature(phi):
    gx, gy, gz = np.gradient(phi)
    gxx = np.gradient(gx, axis=0)
    gyy = np.gradient(gy, axis=1)
    gzz = np.gradient(gz, axis=2)
    gxy = np.gradient(gx, axis=1)
    gxz = np.gradient(gx, axis=2)
    gyz = np.gradient(gy, axis=2)
    num = (gx * gx * (gyy + gzz) + gy * gy * (gxx + gzz)
           + gz * gz * (gxx + gyy)
           - 2.0 * (gx * gy * gxy + gy * gz * gyz + gx * gz * gxz))
    mag = np.sqrt(gx * gx + gy * gy + gz * gz)
    return np.clip(num / (mag ** 3 + 1e-8), -1.0, 1.0), mag


def levelset_refine(mask, intensity, iters=10, step=0.25,
                    curvature_weight=0.2, smooth_sigma=1.0):
    """Evolve the mask boundary toward intensity edges.

    Speed is the normalized Laplacian of the smoothed intensity (zero at
    edges, attracting from both sides) plus a small curvature term. The
    level set lives in voxel units; voxels farther than iters*step + 1
    voxels from the initial boundary are never touched.
    """
    if iters < 0:
        raise ValueError("iters must be >= 0")
    geom = mask.geometry if isinstance(mask, LabelVolume) else None
    m = (mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)) != 0
    if iters == 0:
        out = m.astype(np.int32)
        return LabelVolume(geom, out) if geom is not None else out

    inside = ndimage.distance_transform_edt(m)
    outside = ndimage.distance_transform_edt(~m)
    phi = outside - inside  # positive outside

    smoothed = ndimage.gaussian_filter(intensity.data, smooth_sigma)
    lap = ndimage.laplace(smoothed)
    scale = np.abs(lap).max()
    g = lap / scale if scale > 0 else np.zeros_like(lap)

    band = np.abs(phi) <= iters * step + 1.0
    for _ in range(iters):
        kappa, mag = _curvature(phi)
        dphi = step * (g + curvature_weight * kappa) * mag
        phi[band] += dphi[band]

    refined = phi < 0.0
    out = np.where(band, refined, m).astype(np.int32)
    return LabelVolume(geom, out) if geom is not None else out
