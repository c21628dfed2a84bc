"""Surface-normal machinery.

Ground-truth normals are derived from depth by averaging the four cross
products of forward/backward tangent pairs; Gaussian-implied normals come
from a soft-argmin over the three scale axes (the thinnest axis of a
disc-like splat approximates the surface normal).  Both losses measure a
sign-invariant cosine distance on valid static pixels.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .core import CameraModel, quat_to_rotmat
from .errors import EmptyValidSetError, ValidationError

DEFAULT_SOFTMIN_TEMPERATURE = 10.0
DYNAMIC_EXCLUSION_THRESHOLD = 0.5


def depth_to_normals(depth: np.ndarray, cam: CameraModel,
                     sky_mask: Optional[np.ndarray] = None,
                     dyn_mask: Optional[np.ndarray] = None,
                     ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel camera-space unit normals from a depth map.

    At each pixel the four cross products of orthogonal forward/backward
    tangent pairs are averaged, normalized, and flipped so the normal faces
    the camera (dot with the camera-space point is negative).  Pixels on the
    image border, adjacent to invalid depth, or inside the sky/dynamic masks
    are marked invalid; normals there are zero.

    Returns (normals (H, W, 3), valid (H, W) bool).
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    valid_depth = np.isfinite(depth) & (depth > 0.0)
    u, v = cam.pixel_grid()
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    points = np.stack([x, y, depth], axis=-1)

    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    if h < 3 or w < 3:
        return normals, valid

    c = np.s_[1:-1, 1:-1]
    center = points[c]
    tx_p = points[1:-1, 2:] - center
    tx_m = center - points[1:-1, :-2]
    ty_p = points[2:, 1:-1] - center
    ty_m = center - points[:-2, 1:-1]
    n_sum = (np.cross(tx_p, ty_p) + np.cross(tx_p, ty_m)
             + np.cross(tx_m, ty_p) + np.cross(tx_m, ty_m)) / 4.0

    ok = (valid_depth[c] & valid_depth[1:-1, 2:] & valid_depth[1:-1, :-2]
          & valid_depth[2:, 1:-1] & valid_depth[:-2, 1:-1])
    norms = np.linalg.norm(n_sum, axis=-1)
    ok &= norms > 1e-15
    n_unit = np.zeros_like(n_sum)
    n_unit[ok] = n_sum[ok] / norms[ok][..., None]
    # orient toward the camera
    flip = np.sum(n_unit * center, axis=-1) > 0.0
    n_unit[flip] = -n_unit[flip]

    normals[c] = n_unit
    valid[c] = ok
    if sky_mask is not None:
        valid &= np.asarray(sky_mask) == 0.0
    if dyn_mask is not None:
        valid &= np.asarray(dyn_mask) <= DYNAMIC_EXCLUSION_THRESHOLD
    normals[~valid] = 0.0
    return normals, valid


def _softmin_direction(scale: np.ndarray, eta: float) -> np.ndarray:
    """softmax(-eta * s), l2-normalized; rows sum handled stably."""
    z = -eta * np.asarray(scale, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=-1, keepdims=True)
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def gaussian_normal(scale: np.ndarray, rotation: np.ndarray,
                    eta: float = DEFAULT_SOFTMIN_TEMPERATURE) -> np.ndarray:
    """Soft-argmin surface normal of one splat: R_q applied to the
    normalized softmax of the negated, temperature-scaled scales."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0.0) or eta <= 0.0:
        raise ValidationError("scale and eta must be positive")
    direction = _softmin_direction(scale, eta)
    return quat_to_rotmat(np.asarray(rotation, dtype=np.float64)) @ direction


def gaussian_normals(scales: np.ndarray, rotations: np.ndarray,
                     eta: float = DEFAULT_SOFTMIN_TEMPERATURE) -> np.ndarray:
    """Vectorized :func:`gaussian_normal` over (N, 3) scales and (N, 4) rotations."""
    directions = _softmin_direction(np.asarray(scales, dtype=np.float64), eta)
    mats = quat_to_rotmat(np.asarray(rotations, dtype=np.float64))
    return np.einsum("nij,nj->ni", mats, directions)


def normal_pred_loss(n: np.ndarray, n_gt: np.ndarray, valid: np.ndarray) -> float:
    """Mean sign-invariant cosine distance, 1 - |<n, n_gt>|, over valid pixels."""
    valid = np.asarray(valid, dtype=bool)
    if not np.any(valid):
        raise EmptyValidSetError("no valid pixels for the normal loss")
    dots = np.sum(np.asarray(n, dtype=np.float64)[valid]
                  * np.asarray(n_gt, dtype=np.float64)[valid], axis=-1)
    return float(np.mean(1.0 - np.abs(dots)))


def normal_gs_loss(scales: np.ndarray, rotations: np.ndarray, pixels: np.ndarray,
                   rotation_to_camera: np.ndarray, n_gt: np.ndarray,
                   valid: np.ndarray,
                   eta: float = DEFAULT_SOFTMIN_TEMPERATURE) -> float:
    """Cosine distance between camera-space splat normals and ground truth.

    ``pixels`` holds the (u, v) provenance of each primitive within the
    frame; valid pixels without a primitive are skipped.
    """
    pixels = np.asarray(pixels, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise ValidationError("pixels must be (P, 2)")
    covered = valid[pixels[:, 1], pixels[:, 0]]
    if not np.any(covered):
        raise EmptyValidSetError("no primitives on valid pixels")
    tilde = gaussian_normals(np.asarray(scales)[covered],
                             np.asarray(rotations)[covered], eta)
    cam_normals = tilde @ np.asarray(rotation_to_camera, dtype=np.float64).T
    gt = np.asarray(n_gt, dtype=np.float64)[pixels[covered, 1], pixels[covered, 0]]
    dots = np.sum(cam_normals * gt, axis=-1)
    return float(np.mean(1.0 - np.abs(dots)))
