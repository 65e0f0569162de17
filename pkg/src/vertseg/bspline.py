"""Cubic B-spline kernels shared by the deformation model and image sampling.

All evaluation is tensor-product: 1D kernel values at the fractional
coordinate are combined across axes over a 4-point support.
"""

import numpy as np


def bspline3(t):
    """Cubic B-spline kernel value at offset t (support |t| < 2)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    m1 = t < 1.0
    m2 = (t >= 1.0) & (t < 2.0)
    out[m1] = (4.0 - 6.0 * t[m1] ** 2 + 3.0 * t[m1] ** 3) / 6.0
    out[m2] = (2.0 - t[m2]) ** 3 / 6.0
    return out


def bspline3_d1(t):
    """First derivative of the cubic B-spline kernel."""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    s = np.sign(t)
    out = np.zeros_like(t)
    m1 = a < 1.0
    m2 = (a >= 1.0) & (a < 2.0)
    out[m1] = s[m1] * (-2.0 * a[m1] + 1.5 * a[m1] ** 2)
    out[m2] = s[m2] * (-0.5 * (2.0 - a[m2]) ** 2)
    return out


def bspline3_d2(t):
    """Second derivative of the cubic B-spline kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    m1 = t < 1.0
    m2 = (t >= 1.0) & (t < 2.0)
    out[m1] = -2.0 + 3.0 * t[m1]
    out[m2] = 2.0 - t[m2]
    return out


def support_weights(u, deriv=0):
    """1D weights over the 4-point support for continuous coordinates u.

    Returns (i0, w) where i0 is the first support index (floor(u) - 1) and
    w has shape u.shape + (4,), the kernel (or derivative) evaluated at the
    four integer nodes i0..i0+3.
    """
    u = np.asarray(u, dtype=np.float64)
    iu = np.floor(u)
    i0 = iu.astype(np.int64) - 1
    # closed-form weights in the fractional part (node offsets are fixed at
    # -1-f, -f, 1-f, 2-f), avoiding the masked kernel evaluation
    f = u - iu
    g = 1.0 - f
    if deriv == 0:
        w = np.stack([
            g * g * g / 6.0,
            (3.0 * f * f * f - 6.0 * f * f + 4.0) / 6.0,
            (-3.0 * f * f * f + 3.0 * f * f + 3.0 * f + 1.0) / 6.0,
            f * f * f / 6.0,
        ], axis=-1)
    elif deriv == 1:
        w = np.stack([
            0.5 * g * g,
            2.0 * f - 1.5 * f * f,
            -2.0 * g + 1.5 * g * g,
            -0.5 * f * f,
        ], axis=-1)
    elif deriv == 2:
        w = np.stack([g, 3.0 * f - 2.0, 1.0 - 3.0 * f, f], axis=-1)
    else:
        raise ValueError(f"unsupported derivative order {deriv}")
    return i0, w


# Two-scale (dyadic subdivision) mask for cubic B-splines: coefficients at
# half spacing that reproduce the coarse spline exactly.
REFINE_MASK = np.array([0.125, 0.5, 0.75, 0.5, 0.125])
REFINE_OFFSETS = np.arange(-2, 3)


def refine_coefficients_1d(coef, axis):
    """Dyadic cubic B-spline subdivision along one axis.

    Input length n maps to 2n - 1 coefficients at half spacing covering the
    same node extent; the represented spline is unchanged.
    """
    coef = np.asarray(coef, dtype=np.float64)
    n = coef.shape[axis]
    out_shape = list(coef.shape)
    out_shape[axis] = 2 * n - 1
    out = np.zeros(out_shape, dtype=np.float64)
    src = np.moveaxis(coef, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    for k, m in zip(REFINE_OFFSETS, REFINE_MASK):
        # fine index j receives coarse i where j = 2i + k
        j = 2 * np.arange(n) + k
        keep = (j >= 0) & (j < 2 * n - 1)
        dst[j[keep]] += m * src[keep]
    return out
