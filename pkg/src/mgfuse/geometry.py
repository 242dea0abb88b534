"""Pinhole projection of 3D points and lifting of coarse patch features.

Conventions (OpenCV-style): camera looks along +z, u grows right, v grows
down, the image origin is the top-left pixel corner. Patch (i, j) of a
feature grid is centered at pixel ((j + 0.5) * patch_size, (i + 0.5) *
patch_size); queries outside the grid of centers clamp to it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Z_MIN = 1e-3  # meters; points at or behind this plane are invalid


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "CameraIntrinsics":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]), int(a[4]), int(a[5]))


@dataclass
class RigidTransform:
    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3-vector, meters

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(self.rotation), 1.0, atol=1e-6):
            raise ValueError("rotation determinant must be +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.reshape(9), self.translation]).astype(np.float64)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "RigidTransform":
        return cls(np.asarray(a[:9], dtype=np.float64).reshape(3, 3), np.asarray(a[9:12], dtype=np.float64))


@dataclass
class PatchFeatureMap:
    grid: np.ndarray  # (H_p, W_p, C)
    patch_size: int

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3:
            raise ValueError("grid must be H_p x W_p x C")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("grid entries must be finite")


@dataclass
class ProjectionIndex:
    pixel_coords: np.ndarray  # (N, 2) continuous (u, v); undefined where invalid
    valid_mask: np.ndarray  # (N,) bool
    width: int
    height: int


def project_points(points: np.ndarray, extrinsics: RigidTransform, intrinsics: CameraIntrinsics,
                   z_min: float = Z_MIN) -> ProjectionIndex:
    """Project N x 3 points through extrinsics and a pinhole camera.

    Points with camera-frame depth <= ``z_min`` or projecting outside
    ``[0, width) x [0, height)`` get ``valid_mask`` False.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if points.size and not np.all(np.isfinite(points)):
        raise ValueError("points contain non-finite values")
    cam = extrinsics.apply(points)
    z = cam[:, 2]
    in_front = z > z_min
    safe_z = np.where(in_front, z, 1.0)
    u = intrinsics.fx * cam[:, 0] / safe_z + intrinsics.cx
    v = intrinsics.fy * cam[:, 1] / safe_z + intrinsics.cy
    valid = in_front & (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    return ProjectionIndex(np.stack([u, v], axis=1), valid, intrinsics.width, intrinsics.height)


def _grid_coords(coords: np.ndarray, patch_size: int, n_cells: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map pixel coords to (low cell, high cell, frac weight of high cell)."""
    g = np.clip(coords / patch_size - 0.5, 0.0, n_cells - 1.0)
    lo = np.clip(np.floor(g).astype(np.int64), 0, max(n_cells - 2, 0))
    hi = np.minimum(lo + 1, n_cells - 1)
    return lo, hi, g - lo


def lift_features(fmap: PatchFeatureMap, index: ProjectionIndex) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample per-point features from a patch grid.

    Returns ``(features, valid_mask)`` with shape (N, C); rows for invalid
    points are zero so per-point alignment with labels is preserved.
    """
    hp, wp, c = fmap.grid.shape
    ps = fmap.patch_size
    if hp != -(-index.height // ps) or wp != -(-index.width // ps):
        raise ValueError(
            f"feature grid {hp}x{wp} (patch {ps}) does not cover a {index.width}x{index.height} image")
    n = index.pixel_coords.shape[0]
    out = np.zeros((n, c), dtype=fmap.grid.dtype)
    valid = index.valid_mask.copy()
    if valid.any():
        uv = index.pixel_coords[valid]
        j0, j1, tu = _grid_coords(uv[:, 0], ps, wp)
        i0, i1, tv = _grid_coords(uv[:, 1], ps, hp)
        g = fmap.grid
        tu = tu[:, None]
        tv = tv[:, None]
        out[valid] = ((1 - tv) * (1 - tu) * g[i0, j0]
                      + (1 - tv) * tu * g[i0, j1]
                      + tv * (1 - tu) * g[i1, j0]
                      + tv * tu * g[i1, j1])
    return out, valid


@dataclass
class CropSpec:
    """Axis-aligned crop (pixels, in the original image) followed by uniform scaling."""
    x: float = 0.0
    y: float = 0.0
    width: float | None = None  # None: to the image border
    height: float | None = None
    scale: float = 1.0


def crop_resize_view(intrinsics: CameraIntrinsics, crop: CropSpec) -> CameraIntrinsics:
    """Intrinsics of the view obtained by cropping then uniformly rescaling.

    Projecting a 3D point with the returned intrinsics equals projecting with
    the original ones, subtracting the crop offset, and multiplying by scale.
    """
    w = intrinsics.width - crop.x if crop.width is None else crop.width
    h = intrinsics.height - crop.y if crop.height is None else crop.height
    if crop.scale <= 0:
        raise ValueError("scale must be positive")
    if crop.x < 0 or crop.y < 0 or w <= 0 or h <= 0 \
            or crop.x + w > intrinsics.width or crop.y + h > intrinsics.height:
        raise ValueError("crop must lie fully inside the image")
    s = crop.scale
    return CameraIntrinsics(
        fx=intrinsics.fx * s,
        fy=intrinsics.fy * s,
        cx=(intrinsics.cx - crop.x) * s,
        cy=(intrinsics.cy - crop.y) * s,
        width=int(round(w * s)),
        height=int(round(h * s)),
    )
