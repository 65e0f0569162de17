"""Dense 3D scalar and label volumes with world-space geometry.

Geometry is axis-aligned: world = origin + index * spacing. Arrays are
indexed (i, j, k) matching world axes (x, y, z).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class GridGeometry:
    """Voxel grid geometry: dims (voxels), spacing (mm), origin (mm)."""

    dims: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry fields must have length 3")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def world_to_voxel(self, p):
        """Continuous voxel coordinates of world point(s) p (..., 3)."""
        p = np.asarray(p, dtype=np.float64)
        return (p - np.array(self.origin)) / np.array(self.spacing)

    def voxel_to_world(self, idx):
        """World coordinates of voxel index/indices (..., 3)."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.array(self.origin) + idx * np.array(self.spacing)

    def grid_world_points(self):
        """World coordinates of every voxel center, shape dims + (3,)."""
        ax = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a])
              for a in range(3)]
        gx, gy, gz = np.meshgrid(*ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    @property
    def voxel_volume_mm3(self):
        return self.spacing[0] * self.spacing[1] * self.spacing[2]


@dataclass
class ScalarVolume:
    """3D intensity volume (HU) on a GridGeometry."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.geometry.dims:
            raise ValueError(
                f"data shape {self.data.shape} != dims {self.geometry.dims}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("scalar volume contains non-finite values")


@dataclass
class LabelVolume:
    """3D label volume; label 0 is background."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            if not np.array_equal(self.data, np.round(self.data)):
                raise ValueError("label data must be integral")
            self.data = self.data.astype(np.int32)
        else:
            self.data = self.data.astype(np.int32)
        if self.data.shape != self.geometry.dims:
            raise ValueError(
                f"data shape {self.data.shape} != dims {self.geometry.dims}")
        if self.data.min() < 0:
            raise ValueError("labels must be non-negative")

    def labels(self):
        """Sorted foreground label values present in the volume."""
        vals = np.unique(self.data)
        return [int(v) for v in vals if v != 0]


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel-index bounds."""

    min_index: tuple
    max_index: tuple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.min_index)
        hi = tuple(int(v) for v in self.max_index)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"bounding box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min_index", lo)
        object.__setattr__(self, "max_index", hi)


def _check_points(p):
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite sample point")
    return p


def trilinear_sample(vol, p, fill=0.0):
    """Trilinear interpolation at world point(s) p (..., 3); outside -> fill."""
    p = _check_points(p)
    u = vol.geometry.world_to_voxel(p)
    dims = np.array(vol.geometry.dims)
    inside = np.all((u >= 0.0) & (u <= dims - 1.0), axis=-1)
    uc = np.clip(u, 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(uc).astype(np.int64), dims - 2)
    i0 = np.maximum(i0, 0)
    f = uc - i0
    d = vol.data
    out = np.zeros(u.shape[:-1], dtype=np.float64)
    for dx in (0, 1):
        wx = f[..., 0] if dx else 1.0 - f[..., 0]
        for dy in (0, 1):
            wy = f[..., 1] if dy else 1.0 - f[..., 1]
            for dz in (0, 1):
                wz = f[..., 2] if dz else 1.0 - f[..., 2]
                out += wx * wy * wz * d[i0[..., 0] + dx,
                                        i0[..., 1] + dy,
                                        i0[..., 2] + dz]
    return np.where(inside, out, fill)


def nearest_sample(vol, p):
    """Nearest-voxel label at world point(s) p; outside the grid -> 0.

    Half-way ties resolve to the lower index (np.floor of u + 0.5), i.e.
    the lower linear voxel index.
    """
    p = _check_points(p)
    u = vol.geometry.world_to_voxel(p)
    dims = np.array(vol.geometry.dims)
    inside = np.all((u >= -0.5) & (u < dims - 0.5), axis=-1)
    # ceil(u - 0.5) maps x.5 down to x: lower-index tie-break
    idx = np.ceil(u - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, dims - 1)
    vals = vol.data[idx[..., 0], idx[..., 1], idx[..., 2]]
    return np.where(inside, vals, 0)


def crop(vol, box, margin_voxels=(0, 0, 0)):
    """Sub-volume over box expanded by margin, clamped to the grid.

    The origin is shifted so world coordinates of retained voxels are
    unchanged.
    """
    dims = vol.geometry.dims
    lo = [box.min_index[a] - int(margin_voxels[a]) for a in range(3)]
    hi = [box.max_index[a] + int(margin_voxels[a]) for a in range(3)]
    lo = [max(0, min(lo[a], dims[a] - 1)) for a in range(3)]
    hi = [max(0, min(hi[a], dims[a] - 1)) for a in range(3)]
    if any(box.min_index[a] >= dims[a] or box.max_index[a] < 0 for a in range(3)):
        raise ValueError("bounding box does not intersect the volume")
    sub = vol.data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1]
    geom = GridGeometry(
        dims=sub.shape,
        spacing=vol.geometry.spacing,
        origin=tuple(vol.geometry.voxel_to_world(lo)),
    )
    return type(vol)(geom, sub.copy())


def resample(src, target_geom, total_transform=None):
    """Pull-back resampling: out(x) = sample(src, T(voxel center x)).

    total_transform maps world points of the target grid into the source's
    world space; None means identity. Scalars interpolate trilinearly,
    labels by nearest neighbor.
    """
    if total_transform is None and target_geom == src.geometry:
        return type(src)(target_geom, src.data.copy())
    pts = target_geom.grid_world_points()
    if total_transform is not None:
        pts = total_transform(pts.reshape(-1, 3)).reshape(pts.shape)
    if isinstance(src, LabelVolume):
        data = nearest_sample(src, pts).astype(np.int32)
    else:
        data = trilinear_sample(src, pts)
    return type(src)(target_geom, data)


def downsample(vol, factor):
    """Decimate by integer factors; scalars are Gaussian-smoothed first.

    Anti-aliasing sigma is 0.5 * factor voxels on axes with factor > 1.
    """
    factor = tuple(int(f) for f in factor)
    if any(f < 1 for f in factor):
        raise ValueError(f"factor must be >= 1, got {factor}")
    dims = vol.geometry.dims
    new_dims = tuple((dims[a] + factor[a] - 1) // factor[a] for a in range(3))
    if any(d < 1 for d in new_dims):
        raise ValueError("downsample factor collapses the volume")
    if isinstance(vol, LabelVolume):
        data = vol.data[::factor[0], ::factor[1], ::factor[2]].copy()
    else:
        if all(f == 1 for f in factor):
            data = vol.data.copy()
        else:
            sigma = [0.5 * f if f > 1 else 0.0 for f in factor]
            smoothed = ndimage.gaussian_filter(vol.data, sigma=sigma,
                                               mode="nearest")
            data = smoothed[::factor[0], ::factor[1], ::factor[2]].copy()
    geom = GridGeometry(
        dims=new_dims,
        spacing=tuple(vol.geometry.spacing[a] * factor[a] for a in range(3)),
        origin=vol.geometry.origin,
    )
    return type(vol)(geom, data)


def bounding_box_of(mask):
    """Tight BoundingBox of the nonzero voxels of a boolean/label array."""
    nz = np.nonzero(mask)
    if len(nz[0]) == 0:
        raise ValueError("mask is empty")
    lo = tuple(int(n.min()) for n in nz)
    hi = tuple(int(n.max()) for n in nz)
    return BoundingBox(lo, hi)
