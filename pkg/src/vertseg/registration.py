"""Two-stage registration: affine initialization, then multi-resolution
FFD optimization of the weighted objective

    C = (1 - alpha) * NMI - alpha * P

by gradient ascent with monotone step acceptance. Deterministic: no
randomness, fixed reduction order.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .similarity import IntensityWindow, NmiObjective
from .transform import (AffineTransform, ComposedTransform, FFDTransform,
                        affine_apply, bending_energy, lattice_covering,
                        refine_ffd)
from .volume import GridGeometry, downsample, resample

log = logging.getLogger(__name__)


@dataclass
class RegistrationConfig:
    alpha: float = 0.005
    pyramid_levels: int = 3
    control_spacing_mm: float = 5.0
    max_iters_per_level: int = 100
    step_tolerance: float = 1e-3  # mm
    objective_tolerance: float = 1e-6
    max_sample_voxels: int = 150_000  # 0 = use every target voxel
    window: IntensityWindow = field(default_factory=IntensityWindow)

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.pyramid_levels < 1:
            raise ValueError("need at least one pyramid level")
        if self.control_spacing_mm <= 0.0:
            raise ValueError("control_spacing_mm must be > 0")


@dataclass
class RegistrationResult:
    transform: ComposedTransform
    final_objective: float
    per_level_trace: list  # [(iteration, level, C, NMI, P), ...]


def _check_nonconstant(vol, name):
    if np.ptp(vol.data) == 0:
        raise ValueError(f"{name} image is constant; nothing to register")


def _pyramid(vol, levels):
    """Coarse-to-fine list of volumes, factor 2 per level."""
    out = []
    for i in range(levels):
        f = 2 ** (levels - 1 - i)
        out.append(downsample(vol, (f, f, f)) if f > 1 else vol)
    return out


def _domain_corners(geom):
    lo = np.array(geom.origin)
    hi = lo + (np.array(geom.dims) - 1) * np.array(geom.spacing)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    return corners


def _intensity_centroid(vol):
    """Center of mass of the above-minimum intensity mass, in mm."""
    w = vol.data - vol.data.min()
    total = w.sum()
    if total <= 0:
        raise ValueError("constant image has no centroid")
    idx = np.indices(vol.geometry.dims, dtype=np.float64)
    com = np.array([(idx[a] * w).sum() for a in range(3)]) / total
    return np.array(vol.geometry.origin) + com * np.array(vol.geometry.spacing)


def register_affine(target, floating, cfg=None):
    """Estimate the 12-parameter affine maximizing NMI, coarse to fine.

    Initialized by intensity-centroid alignment. Each level runs a
    translation-only ascent phase before the joint 12-parameter phase, so
    the (better-conditioned) shift converges before the matrix moves. The
    matrix acts about the target-domain center; step lengths are measured
    in mm of induced point motion.
    """
    cfg = cfg or RegistrationConfig()
    _check_nonconstant(target, "target")
    _check_nonconstant(floating, "floating")

    corners = _domain_corners(target.geometry)
    center = corners.mean(axis=0)
    radius = max(float(np.abs(corners - center).max()), 1.0)

    matrix = np.eye(3)
    # translation in the centered parameterization, seeded by centroids
    shift = _intensity_centroid(floating) - _intensity_centroid(target)

    tgt_pyr = _pyramid(target, cfg.pyramid_levels)
    flt_pyr = _pyramid(floating, cfg.pyramid_levels)

    cap = cfg.max_sample_voxels or None
    for level, (tgt, flt) in enumerate(zip(tgt_pyr, flt_pyr)):
        obj = NmiObjective(tgt, flt, cfg.window, max_points=cap)
        pts_c = obj.points - center

        def make_affine(m, t):
            return AffineTransform(m, center - m @ center + t)

        def value(m, t):
            return obj.value(ComposedTransform(make_affine(m, t), None))

        current = value(matrix, shift)
        for phase in ("translation", "full"):
            step = 2.0 * max(tgt.geometry.spacing)
            for it in range(cfg.max_iters_per_level):
                _, pg, _, _ = obj.value_and_point_gradient(
                    ComposedTransform(make_affine(matrix, shift), None))
                g_t = pg.sum(axis=0)
                if phase == "translation":
                    g_m = np.zeros((3, 3))
                else:
                    g_m = pg.T @ pts_c
                # scale the matrix block so the update norm is point
                # motion in mm
                g_scaled = np.concatenate([(g_m * radius).ravel(), g_t])
                norm = np.linalg.norm(g_scaled)
                if norm < 1e-15:
                    break
                d_m = g_m / norm
                d_t = g_t / norm
                improved = False
                while step >= cfg.step_tolerance:
                    cand_m = matrix + step * d_m
                    cand_t = shift + step * d_t
                    try:
                        cand_val = value(cand_m, cand_t)
                    except ValueError:
                        cand_val = -np.inf
                    if cand_val > current:
                        gain = cand_val - current
                        matrix, shift, current = cand_m, cand_t, cand_val
                        step = min(step * 1.5,
                                   4.0 * max(tgt.geometry.spacing))
                        improved = True
                        if gain < cfg.objective_tolerance:
                            improved = False
                        break
                    step *= 0.5
                if not improved:
                    break
        log.debug("affine level %d: NMI=%.5f", level, current)

    translation = center - matrix @ center + shift
    return AffineTransform(matrix, translation)


def _penalty_grid(affine, target_geom, pad_mm, min_spacing_mm=0.0):
    """Axis-aligned grid covering the affinely mapped target domain.

    min_spacing_mm coarsens the quadrature: the penalty of a smooth
    control-lattice field is resolved well below the lattice spacing, so
    sampling finer than that only costs time.
    """
    mapped = affine_apply(affine, _domain_corners(target_geom))
    lo = mapped.min(axis=0) - pad_mm
    hi = mapped.max(axis=0) + pad_mm
    spacing = np.maximum(np.array(target_geom.spacing), min_spacing_mm)
    # floor keeps every sample inside [lo, hi], and so inside the lattice
    dims = np.maximum(np.floor((hi - lo) / spacing).astype(int) + 1, 2)
    return GridGeometry(tuple(dims), tuple(spacing), tuple(lo)), lo, hi


def register_ffd(target, floating, affine, cfg=None):
    """Coarse-to-fine FFD optimization of (1-alpha)*NMI - alpha*P.

    The control lattice lives in the affinely aligned space; coefficients
    are carried between levels by exact B-spline subdivision.
    """
    cfg = cfg or RegistrationConfig()
    _check_nonconstant(target, "target")
    _check_nonconstant(floating, "floating")
    alpha = cfg.alpha

    tgt_pyr = _pyramid(target, cfg.pyramid_levels)
    flt_pyr = _pyramid(floating, cfg.pyramid_levels)

    # lattice domain: the full-resolution target domain in affine space,
    # padded so penalty samples and warped points keep full support
    pad = 2.0 * max(target.geometry.spacing)
    _, dom_lo, dom_hi = _penalty_grid(affine, target.geometry, pad)
    coarse_spacing = cfg.control_spacing_mm * 2 ** (cfg.pyramid_levels - 1)
    ffd = FFDTransform.zeros(lattice_covering(dom_lo, dom_hi, coarse_spacing))

    trace = []
    final_c = None
    for level, (tgt, flt) in enumerate(zip(tgt_pyr, flt_pyr)):
        if level > 0:
            ffd = refine_ffd(ffd)
        obj = NmiObjective(tgt, flt, cfg.window,
                           max_points=cfg.max_sample_voxels or None)
        pen_geom, _, _ = _penalty_grid(
            affine, tgt.geometry, 0.0,
            min_spacing_mm=min(ffd.control_geom.spacing) / 4.0)

        def evaluate(f, with_gradient):
            comp = ComposedTransform(affine, f)
            if with_gradient:
                nmi_val, g_nmi = obj.value_and_ffd_gradient(comp)
                p_val, g_p = bending_energy(f, pen_geom, with_gradient=True)
                c = (1.0 - alpha) * nmi_val - alpha * p_val
                return c, nmi_val, p_val, (1.0 - alpha) * g_nmi - alpha * g_p
            nmi_val = obj.value(comp)
            p_val, _ = bending_energy(f, pen_geom, with_gradient=False)
            return (1.0 - alpha) * nmi_val - alpha * p_val, nmi_val, p_val, None

        current, nmi_val, p_val, grad = evaluate(ffd, True)
        trace.append((0, level, current, nmi_val, p_val))
        step = 1.0 * max(tgt.geometry.spacing)
        for it in range(1, cfg.max_iters_per_level + 1):
            gnorm = np.abs(grad).max()
            if gnorm < 1e-15:
                break
            direction = grad / gnorm  # max control-point motion = step mm
            improved = False
            while step >= cfg.step_tolerance:
                cand = FFDTransform(ffd.control_geom,
                                    ffd.coefficients + step * direction)
                try:
                    cand_c, cand_nmi, cand_p, _ = evaluate(cand, False)
                except ValueError:
                    cand_c = -np.inf
                if cand_c > current:
                    gain = cand_c - current
                    ffd = cand
                    current, nmi_val, p_val = cand_c, cand_nmi, cand_p
                    trace.append((it, level, current, nmi_val, p_val))
                    step = min(step * 1.5, 2.0 * max(tgt.geometry.spacing))
                    improved = True
                    if gain >= cfg.objective_tolerance:
                        _, _, _, grad = evaluate(ffd, True)
                    else:
                        improved = False
                    break
                step *= 0.5
            if not improved:
                break
        final_c = current
        log.debug("ffd level %d: C=%.6f NMI=%.5f P=%.6f", level,
                  current, nmi_val, p_val)

    return RegistrationResult(ComposedTransform(affine, ffd), final_c, trace)


def warp_atlas(atlas_img, atlas_lbl, comp, target_geom):
    """Pull atlas image (trilinear) and labels (nearest) onto the target
    grid through the composed transform."""
    from .transform import compose_apply

    def total(pts):
        return compose_apply(comp, pts)

    warped_img = resample(atlas_img, target_geom, total)
    warped_lbl = resample(atlas_lbl, target_geom, total)
    return warped_img, warped_lbl
