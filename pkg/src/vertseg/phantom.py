"""Synthetic spine phantom: a stack of ellipsoid vertebral bodies with
posterior box processes, plus known random deformations for registration
ground truth. Shapes are deliberately crude; they exercise the pipeline
math, not anatomy.
"""

from dataclasses import dataclass, field

import numpy as np

from .transform import (AffineTransform, ComposedTransform, FFDTransform,
                        compose_apply, lattice_covering)
from .volume import (BoundingBox, GridGeometry, LabelVolume, ScalarVolume,
                     resample)


@dataclass
class PhantomSpec:
    n_vertebrae: int = 5
    body_radii_mm: tuple = (11.0, 8.0, 9.0)
    disc_gap_mm: float = 4.0
    height_scale: tuple = None  # per vertebra, defaults to all 1.0
    bone_hu: float = 300.0
    disc_hu: float = 80.0
    air_hu: float = -1000.0
    noise_sd: float = 0.0
    seed: int = 0
    dims: tuple = (96, 96, 160)
    spacing: tuple = (0.4, 0.4, 1.0)
    box_margin_voxels: int = 2

    def __post_init__(self):
        if self.height_scale is None:
            self.height_scale = tuple(1.0 for _ in range(self.n_vertebrae))
        self.height_scale = tuple(float(h) for h in self.height_scale)
        if len(self.height_scale) != self.n_vertebrae:
            raise ValueError("need one height_scale per vertebra")
        if any(not 0.0 < h <= 1.0 for h in self.height_scale):
            raise ValueError("height_scale must lie in (0, 1]")
        if any(r <= 0 for r in self.body_radii_mm) or self.disc_gap_mm < 0:
            raise ValueError("radii must be > 0 and gap >= 0")


def make_phantom(spec):
    """Build (image, labels, per-vertebra bounding boxes) from a spec."""
    geom = GridGeometry(spec.dims, spec.spacing, (0.0, 0.0, 0.0))
    pts = geom.grid_world_points()
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    extent = [(geom.dims[a] - 1) * geom.spacing[a] for a in range(3)]

    rx, ry, rz = spec.body_radii_mm
    slot = 2.0 * rz + spec.disc_gap_mm
    total = spec.n_vertebrae * slot - spec.disc_gap_mm
    if total > extent[2] - 4.0:
        raise ValueError("vertebra stack does not fit the grid")
    z0 = (extent[2] - total) / 2.0 + rz
    cx = extent[0] / 2.0
    cy = extent[1] * 0.4
    proc_cy = cy + ry  # posterior process attaches behind the body
    if proc_cy + 9.0 > extent[1] or cx - rx < 0:
        raise ValueError("vertebra cross-section does not fit the grid")

    labels = np.zeros(geom.dims, dtype=np.int32)
    image = np.full(geom.dims, spec.air_hu)
    centers = []
    for k in range(spec.n_vertebrae):
        zc = z0 + k * slot
        h = spec.height_scale[k]
        centers.append(zc)
        body = (((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2
                + ((z - zc) / (rz * h)) ** 2) <= 1.0
        proc = ((np.abs(x - cx) <= 3.0)
                & (y >= proc_cy - 2.0) & (y <= proc_cy + 8.0)
                & (np.abs(z - zc) <= 0.6 * rz * h))
        mask = (body | proc) & (labels == 0)
        labels[mask] = k + 1
        image[mask] = spec.bone_hu

    # discs between adjacent vertebral bodies (intensity only, label 0)
    disc_r = 0.8 * min(rx, ry)
    for k in range(spec.n_vertebrae - 1):
        lo = centers[k] + rz * spec.height_scale[k]
        hi = centers[k + 1] - rz * spec.height_scale[k + 1]
        disc = ((((x - cx) / disc_r) ** 2 + ((y - cy) / disc_r) ** 2) <= 1.0) \
            & (z >= lo) & (z <= hi) & (labels == 0)
        image[disc] = spec.disc_hu

    if spec.noise_sd > 0:
        rng = np.random.default_rng(spec.seed)
        image = image + rng.normal(0.0, spec.noise_sd, size=image.shape)

    boxes = []
    m = spec.box_margin_voxels
    for k in range(spec.n_vertebrae):
        idx = np.argwhere(labels == k + 1)
        lo = np.maximum(idx.min(axis=0) - m, 0)
        hi = np.minimum(idx.max(axis=0) + m, np.array(geom.dims) - 1)
        boxes.append(BoundingBox(tuple(lo), tuple(hi)))

    return ScalarVolume(geom, image), LabelVolume(geom, labels), boxes


def _random_smooth_ffd(geom, magnitude_mm, rng, control_spacing_mm=20.0):
    lo = np.array(geom.origin)
    hi = lo + (np.array(geom.dims) - 1) * np.array(geom.spacing)
    lattice = lattice_covering(lo, hi, control_spacing_mm)
    coef = rng.normal(0.0, 1.0, size=lattice.dims + (3,))
    ffd = FFDTransform(lattice, coef)
    # scale so the max displacement over the grid equals the magnitude
    disp = _dense_displacement(ffd, geom)
    peak = np.linalg.norm(disp, axis=-1).max()
    if peak > 0:
        coef *= magnitude_mm / peak
    return FFDTransform(lattice, coef)


def _dense_displacement(ffd, geom):
    from .transform import ffd_displace
    pts = geom.grid_world_points().reshape(-1, 3)
    return ffd_displace(ffd, pts).reshape(geom.dims + (3,))


def deform_phantom(image, labels, kind="smooth_ffd", magnitude=3.0, seed=0):
    """Warp a phantom by a random transform of the given family.

    Returns (warped image, warped labels, transform), where the transform
    is the pull-back map: warped(x) = original(transform(x)). Registering
    the warped pair as target against the original therefore recovers the
    returned transform directly.
    """
    rng = np.random.default_rng(seed)
    geom = image.geometry
    if magnitude == 0:
        comp = ComposedTransform.identity()
        return (ScalarVolume(geom, image.data.copy()),
                LabelVolume(geom, labels.data.copy()), comp)

    if kind == "translation":
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        comp = ComposedTransform(
            AffineTransform(np.eye(3), magnitude * direction), None)
    elif kind == "affine":
        # random small linear part, scaled so corner motion ~= magnitude
        corners = np.array(geom.dims) * np.array(geom.spacing) / 2.0
        radius = np.linalg.norm(corners)
        delta = rng.normal(0.0, 1.0, size=(3, 3))
        delta *= (0.5 * magnitude / radius) / max(np.abs(delta).max(), 1e-12)
        center = np.array(geom.origin) + corners
        matrix = np.eye(3) + delta
        translation = (center - matrix @ center
                       + rng.normal(0.0, magnitude / 4.0, size=3))
        comp = ComposedTransform(AffineTransform(matrix, translation), None)
    elif kind == "smooth_ffd":
        ffd = _random_smooth_ffd(geom, magnitude, rng)
        comp = ComposedTransform(AffineTransform.identity(), ffd)
    else:
        raise ValueError(f"unknown deformation kind {kind!r}")

    def total(pts):
        return compose_apply(comp, pts)

    warped_img = resample(image, geom, total)
    warped_lbl = resample(labels, geom, total)
    return warped_img, warped_lbl, comp
