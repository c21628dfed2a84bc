"""Core domain types: Gaussian primitives, cameras, frames, fusion parameters.

All types are immutable after construction (arrays are copied and marked
read-only), so instances can be shared freely across threads.  Quaternions
use (w, x, y, z) order everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    NonFiniteError,
    NonPositiveScaleError,
    OutOfRangeOpacityError,
    OutOfRangeTimestampError,
    ValidationError,
)

DEFAULT_FEATURE_DIM = 16
DEFAULT_HIDDEN_DIM = 64
DEFAULT_BANDS = 10
DEFAULT_BETA = 1.0
DEFAULT_LAMBDA_MIX = 0.3

# Raw attribute-map channel layout: color(3), opacity(1), scale(3), rotation(4).
GAUSSIAN_MAP_CHANNELS = 11


def as_float_array(x, name: str = "array", shape: Optional[tuple] = None) -> np.ndarray:
    """Copy ``x`` to a read-only float64 array, optionally checking its shape."""
    arr = np.array(x, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise DimensionMismatchError(f"{name}: expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains NaN or infinity")


def check_unit_interval(arr: np.ndarray, name: str, exc=ValidationError) -> None:
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise exc(f"{name} outside [0, 1]")


# ---------------------------------------------------------------------------
# Quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    """Return q / ||q||, raising on near-zero norm."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-8):
        raise ValidationError("quaternion norm too small to normalize")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert unit quaternions (..., 4) in (w, x, y, z) order to (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def rotmat_to_quat(m: np.ndarray) -> np.ndarray:
    """Convert a single 3x3 rotation matrix to a unit quaternion (w, x, y, z).

    Uses the largest-pivot variant so the conversion is stable for all
    rotation angles.  The returned quaternion has w >= 0.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise DimensionMismatchError(f"rotation matrix must be 3x3, got {m.shape}")
    tr = np.trace(m)
    candidates = [tr, m[0, 0], m[1, 1], m[2, 2]]
    case = int(np.argmax(candidates))
    if case == 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([
            0.25 * s,
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    elif case == 1:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            (m[2, 1] - m[1, 2]) / s,
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
        ])
    elif case == 2:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([
            (m[0, 2] - m[2, 0]) / s,
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
        ])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([
            (m[1, 0] - m[0, 1]) / s,
            (m[0, 2] + m[2, 0]) / s,
            (m[1, 2] + m[2, 1]) / s,
            0.25 * s,
        ])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def _renormalized_rows(q: np.ndarray) -> np.ndarray:
    """Renormalize quaternion rows, skipping rows already unit within 1e-12.

    The skip makes repeated validation bitwise idempotent: a row produced by
    one renormalization is within a few ulp of unit norm and is left alone on
    the next pass.
    """
    q = np.array(q, dtype=np.float64)
    sq = np.sum(q * q, axis=-1)
    if np.any(sq < 1e-16):
        raise ValidationError("quaternion norm too small to normalize")
    needs = np.abs(sq - 1.0) > 1e-12
    if np.any(needs):
        q[needs] = q[needs] / np.sqrt(sq[needs])[..., None]
    return q


# ---------------------------------------------------------------------------
# Gaussian primitives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPrimitive:
    """One splat in canonical space.

    mu        -- center, scene units (3,)
    color     -- RGB in [0, 1] (3,)
    opacity   -- scalar in [0, 1]
    scale     -- positive axis lengths, stored linearly (3,)
    rotation  -- unit quaternion (w, x, y, z) (4,)
    timestamp -- normalized observation time in [0, 1]
    feature   -- latent attribute encoding (feature_dim,)
    source_frame -- index of the observation frame (-1 for fused primitives)
    """

    mu: np.ndarray
    color: np.ndarray
    opacity: float
    scale: np.ndarray
    rotation: np.ndarray
    timestamp: float
    feature: np.ndarray
    source_frame: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mu", as_float_array(self.mu, "mu", (3,)))
        object.__setattr__(self, "color", as_float_array(self.color, "color", (3,)))
        object.__setattr__(self, "scale", as_float_array(self.scale, "scale", (3,)))
        object.__setattr__(self, "rotation", as_float_array(self.rotation, "rotation", (4,)))
        object.__setattr__(self, "feature", as_float_array(self.feature, "feature"))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "source_frame", int(self.source_frame))


def validate_primitive(g: GaussianPrimitive) -> GaussianPrimitive:
    """Check invariants and return ``g`` with its rotation renormalized.

    Idempotent: a primitive that already passed validation is returned with
    bitwise-identical fields.
    """
    for name in ("mu", "color", "scale", "rotation", "feature"):
        check_finite(getattr(g, name), name)
    if not np.isfinite(g.opacity) or not np.isfinite(g.timestamp):
        raise NonFiniteError("opacity/timestamp must be finite")
    if np.any(g.scale <= 0.0):
        raise NonPositiveScaleError(f"scale must be positive, got {g.scale}")
    if not 0.0 <= g.opacity <= 1.0:
        raise OutOfRangeOpacityError(f"opacity {g.opacity} outside [0, 1]")
    if not 0.0 <= g.timestamp <= 1.0:
        raise OutOfRangeTimestampError(f"timestamp {g.timestamp} outside [0, 1]")
    check_unit_interval(g.color, "color")
    rotation = _renormalized_rows(g.rotation)
    return GaussianPrimitive(
        mu=g.mu,
        color=g.color,
        opacity=g.opacity,
        scale=g.scale,
        rotation=rotation,
        timestamp=g.timestamp,
        feature=g.feature,
        source_frame=g.source_frame,
    )


@dataclass(frozen=True)
class GaussianCloud:
    """Struct-of-arrays collection of N Gaussian primitives."""

    mu: np.ndarray          # (N, 3)
    color: np.ndarray       # (N, 3)
    opacity: np.ndarray     # (N,)
    scale: np.ndarray       # (N, 3)
    rotation: np.ndarray    # (N, 4), unit rows
    timestamp: np.ndarray   # (N,)
    feature: np.ndarray     # (N, feature_dim)
    source_frame: np.ndarray  # (N,) int64

    def __post_init__(self):
        n = np.asarray(self.mu).shape[0]
        object.__setattr__(self, "mu", as_float_array(self.mu, "mu", (n, 3)))
        object.__setattr__(self, "color", as_float_array(self.color, "color", (n, 3)))
        object.__setattr__(self, "opacity", as_float_array(self.opacity, "opacity", (n,)))
        object.__setattr__(self, "scale", as_float_array(self.scale, "scale", (n, 3)))
        object.__setattr__(self, "rotation", as_float_array(self.rotation, "rotation", (n, 4)))
        object.__setattr__(self, "timestamp", as_float_array(self.timestamp, "timestamp", (n,)))
        feat = np.array(self.feature, dtype=np.float64)
        if feat.ndim != 2 or feat.shape[0] != n:
            raise DimensionMismatchError(f"feature: expected (N, D), got {feat.shape}")
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)
        sf = np.array(self.source_frame, dtype=np.int64)
        if sf.shape != (n,):
            raise DimensionMismatchError(f"source_frame: expected ({n},), got {sf.shape}")
        sf.setflags(write=False)
        object.__setattr__(self, "source_frame", sf)

    @classmethod
    def create(cls, mu, color, opacity, scale, rotation, timestamp, feature,
               source_frame, validate: bool = True) -> "GaussianCloud":
        """Build a cloud, optionally enforcing the per-primitive invariants."""
        mu = np.asarray(mu, dtype=np.float64)
        n = mu.shape[0]
        opacity = np.asarray(opacity, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        timestamp = np.asarray(timestamp, dtype=np.float64)
        rotation = np.asarray(rotation, dtype=np.float64)
        color = np.asarray(color, dtype=np.float64)
        if validate and n > 0:
            for name, arr in (("mu", mu), ("color", color), ("opacity", opacity),
                              ("scale", scale), ("rotation", rotation),
                              ("timestamp", timestamp)):
                check_finite(arr, name)
            if np.any(scale <= 0.0):
                raise NonPositiveScaleError("cloud contains non-positive scales")
            if np.any(opacity < 0.0) or np.any(opacity > 1.0):
                raise OutOfRangeOpacityError("cloud opacity outside [0, 1]")
            if np.any(timestamp < 0.0) or np.any(timestamp > 1.0):
                raise OutOfRangeTimestampError("cloud timestamp outside [0, 1]")
            rotation = _renormalized_rows(rotation)
        return cls(mu, color, opacity, scale, rotation, timestamp, feature, source_frame)

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive],
                        validate: bool = True) -> "GaussianCloud":
        if len(primitives) == 0:
            return cls.empty()
        return cls.create(
            mu=np.stack([g.mu for g in primitives]),
            color=np.stack([g.color for g in primitives]),
            opacity=np.array([g.opacity for g in primitives]),
            scale=np.stack([g.scale for g in primitives]),
            rotation=np.stack([g.rotation for g in primitives]),
            timestamp=np.array([g.timestamp for g in primitives]),
            feature=np.stack([g.feature for g in primitives]),
            source_frame=np.array([g.source_frame for g in primitives]),
            validate=validate,
        )

    @classmethod
    def empty(cls, feature_dim: int = DEFAULT_FEATURE_DIM) -> "GaussianCloud":
        z = np.zeros
        return cls(z((0, 3)), z((0, 3)), z((0,)), z((0, 3)), z((0, 4)),
                   z((0,)), z((0, feature_dim)), np.zeros((0,), dtype=np.int64))

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[1]

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mu=self.mu[i], color=self.color[i], opacity=float(self.opacity[i]),
            scale=self.scale[i], rotation=self.rotation[i],
            timestamp=float(self.timestamp[i]), feature=self.feature[i],
            source_frame=int(self.source_frame[i]))

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        for i in range(len(self)):
            yield self[i]

    def take(self, indices) -> "GaussianCloud":
        idx = np.asarray(indices)
        return GaussianCloud(
            self.mu[idx], self.color[idx], self.opacity[idx], self.scale[idx],
            self.rotation[idx], self.timestamp[idx], self.feature[idx],
            self.source_frame[idx])

    @staticmethod
    def concatenate(clouds: Sequence["GaussianCloud"]) -> "GaussianCloud":
        clouds = [c for c in clouds if len(c) > 0]
        if not clouds:
            return GaussianCloud.empty()
        return GaussianCloud(
            np.concatenate([c.mu for c in clouds]),
            np.concatenate([c.color for c in clouds]),
            np.concatenate([c.opacity for c in clouds]),
            np.concatenate([c.scale for c in clouds]),
            np.concatenate([c.rotation for c in clouds]),
            np.concatenate([c.timestamp for c in clouds]),
            np.concatenate([c.feature for c in clouds]),
            np.concatenate([c.source_frame for c in clouds]))


# ---------------------------------------------------------------------------
# Cameras and frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: world-to-camera extrinsics (R, T) plus intrinsics K.

    A world point X maps to camera coordinates p = R @ X + T and to the
    image plane at (fx * px / pz + cx, fy * py / pz + cy).
    """

    R: np.ndarray
    T: np.ndarray
    K: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "R", as_float_array(self.R, "R", (3, 3)))
        object.__setattr__(self, "T", as_float_array(self.T, "T", (3,)))
        object.__setattr__(self, "K", as_float_array(self.K, "K", (3, 3)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        check_finite(self.R, "R")
        check_finite(self.T, "T")
        check_finite(self.K, "K")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6):
            raise ValidationError("R is not orthonormal")
        if np.linalg.det(self.R) < 0.0:
            raise ValidationError("R is a reflection (det < 0)")
        k = self.K
        if np.any(np.abs([k[1, 0], k[2, 0], k[2, 1], k[0, 1]]) > 1e-12) or abs(k[2, 2] - 1.0) > 1e-12:
            raise ValidationError("K must be upper-triangular with zero skew and K[2,2] = 1")
        if k[0, 0] <= 0.0 or k[1, 1] <= 0.0:
            raise ValidationError("focal lengths must be positive")
        if not (0.0 < k[0, 2] < self.width and 0.0 < k[1, 2] < self.height):
            raise ValidationError("principal point outside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("image dimensions must be positive")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.T

    def cam_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.T) @ self.R

    def project(self, points: np.ndarray):
        """World points (..., 3) -> pixel coordinates (..., 2) and z-depth (...)."""
        pc = self.world_to_cam(points)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def unproject(self, u, v, depth) -> np.ndarray:
        """Pixels plus z-depth -> world points, inverse of :meth:`project`."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (u - self.cx) / self.fx * depth
        y = (v - self.cy) / self.fy * depth
        pc = np.stack([x, y, depth], axis=-1)
        return self.cam_to_world(pc)

    def ray_directions(self, u, v) -> np.ndarray:
        """Unit world-space viewing rays through pixels (u, v)."""
        d = self.unproject(u, v, np.ones_like(np.asarray(u, dtype=np.float64))) \
            - self.cam_to_world(np.zeros(3))
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_grid(self):
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        return u, v


@dataclass(frozen=True)
class FrameObservation:
    """One context frame: image, depth, masks and raw Gaussian attributes.

    Depth value 0 marks invalid pixels.  ``gaussian_map`` holds the 11 raw
    attribute channels (color 3, opacity 1, scale 3, rotation 4) before
    activation; ``normal_gt`` rows are unit camera-space normals or zero
    where unavailable.
    """

    image: np.ndarray            # (H, W, 3) in [0, 1]
    depth: np.ndarray            # (H, W), scene units, 0 = invalid
    dyn_mask: np.ndarray         # (H, W) in [0, 1]
    sky_mask: np.ndarray         # (H, W) in {0, 1}
    timestamp: float
    camera: CameraModel
    gaussian_map: Optional[np.ndarray] = None   # (H, W, 11)
    normal_gt: Optional[np.ndarray] = None      # (H, W, 3)

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        object.__setattr__(self, "image", as_float_array(self.image, "image", (h, w, 3)))
        object.__setattr__(self, "depth", as_float_array(self.depth, "depth", (h, w)))
        object.__setattr__(self, "dyn_mask", as_float_array(self.dyn_mask, "dyn_mask", (h, w)))
        object.__setattr__(self, "sky_mask", as_float_array(self.sky_mask, "sky_mask", (h, w)))
        object.__setattr__(self, "timestamp", float(self.timestamp))
        check_unit_interval(self.image, "image")
        check_unit_interval(self.dyn_mask, "dyn_mask")
        if not np.all(np.isin(self.sky_mask, (0.0, 1.0))):
            raise ValidationError("sky_mask must be binary")
        if not 0.0 <= self.timestamp <= 1.0:
            raise OutOfRangeTimestampError(f"timestamp {self.timestamp} outside [0, 1]")
        if self.gaussian_map is not None:
            gm = as_float_array(self.gaussian_map, "gaussian_map", (h, w, GAUSSIAN_MAP_CHANNELS))
            object.__setattr__(self, "gaussian_map", gm)
        if self.normal_gt is not None:
            ng = as_float_array(self.normal_gt, "normal_gt", (h, w, 3))
            norms = np.linalg.norm(ng, axis=-1)
            valid = norms > 0.5
            if np.any(np.abs(norms[valid] - 1.0) > 1e-4):
                raise ValidationError("normal_gt has non-unit valid rows")
            object.__setattr__(self, "normal_gt", ng)

    @property
    def shape(self):
        return self.depth.shape


@dataclass(frozen=True)
class CanonicalSpace:
    """Union of all lifted per-frame Gaussians in reference-frame coordinates.

    ``source_pixels`` records the (u, v) provenance of each primitive within
    its source frame; frames occupy contiguous index blocks in frame order.
    """

    cloud: GaussianCloud
    frame_timestamps: np.ndarray     # (T,)
    source_pixels: np.ndarray        # (N, 2) int64, (u, v)

    def __post_init__(self):
        ts = np.array(self.frame_timestamps, dtype=np.float64)
        ts.setflags(write=False)
        object.__setattr__(self, "frame_timestamps", ts)
        px = np.array(self.source_pixels, dtype=np.int64)
        if px.shape != (len(self.cloud), 2):
            raise DimensionMismatchError("source_pixels must be (N, 2)")
        px.setflags(write=False)
        object.__setattr__(self, "source_pixels", px)
        n_frames = ts.shape[0]
        sf = self.cloud.source_frame
        if len(self.cloud) and (sf.min() < 0 or sf.max() >= n_frames):
            raise ValidationError("source_frame indexes a non-existent frame")

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def primitives(self) -> GaussianCloud:
        return self.cloud


@dataclass(frozen=True)
class VoxelPartition:
    """Sparse grouping of primitive indices by integer voxel coordinate."""

    rho: float
    cells: dict  # (i, j, k) -> np.ndarray of primitive indices
    n_primitives: int

    def __post_init__(self):
        object.__setattr__(self, "rho", float(self.rho))
        seen = np.concatenate([np.asarray(v) for v in self.cells.values()]) \
            if self.cells else np.zeros(0, dtype=np.int64)
        if any(len(v) == 0 for v in self.cells.values()):
            raise ValidationError("empty voxel stored in partition")
        if seen.size != self.n_primitives or \
                not np.array_equal(np.sort(seen), np.arange(self.n_primitives)):
            raise ValidationError("cells do not partition the primitive index range")

    def __len__(self) -> int:
        return len(self.cells)


# ---------------------------------------------------------------------------
# Fusion parameters
# ---------------------------------------------------------------------------

# Trainable tensors in serialization order.
FUSION_TENSOR_FIELDS = (
    "w_feat", "b_feat",
    "w_time1", "b_time1",
    "w_time2", "b_time2",
    "w_attn1", "b_attn1",
    "w_attn2", "b_attn2",
    "beta",
)


@dataclass(frozen=True)
class FusionParams:
    """Learnable weights of the temporal fusion module.

    Layers (hidden size H, feature size D, time encoding size 2L):
      feature encoder   linear D -> H
      time MLP          2L -> H -> H with tanh between layers
      attention MLP     2H -> H -> 1 with tanh between layers
    ``beta`` is the softmax temperature (> 0); ``lambda_mix`` the fixed
    opacity mixing coefficient in [0, 1]; ``bands`` the time-encoding band
    count L.
    """

    w_feat: np.ndarray
    b_feat: np.ndarray
    w_time1: np.ndarray
    b_time1: np.ndarray
    w_time2: np.ndarray
    b_time2: np.ndarray
    w_attn1: np.ndarray
    b_attn1: np.ndarray
    w_attn2: np.ndarray
    b_attn2: float
    beta: float = DEFAULT_BETA
    lambda_mix: float = DEFAULT_LAMBDA_MIX
    bands: int = DEFAULT_BANDS

    def __post_init__(self):
        hidden = np.asarray(self.w_feat).shape[0]
        feat = np.asarray(self.w_feat).shape[1]
        enc = 2 * int(self.bands)
        object.__setattr__(self, "w_feat", as_float_array(self.w_feat, "w_feat", (hidden, feat)))
        object.__setattr__(self, "b_feat", as_float_array(self.b_feat, "b_feat", (hidden,)))
        object.__setattr__(self, "w_time1", as_float_array(self.w_time1, "w_time1", (hidden, enc)))
        object.__setattr__(self, "b_time1", as_float_array(self.b_time1, "b_time1", (hidden,)))
        object.__setattr__(self, "w_time2", as_float_array(self.w_time2, "w_time2", (hidden, hidden)))
        object.__setattr__(self, "b_time2", as_float_array(self.b_time2, "b_time2", (hidden,)))
        object.__setattr__(self, "w_attn1", as_float_array(self.w_attn1, "w_attn1", (hidden, 2 * hidden)))
        object.__setattr__(self, "b_attn1", as_float_array(self.b_attn1, "b_attn1", (hidden,)))
        object.__setattr__(self, "w_attn2", as_float_array(self.w_attn2, "w_attn2", (hidden,)))
        object.__setattr__(self, "b_attn2", float(self.b_attn2))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "lambda_mix", float(self.lambda_mix))
        object.__setattr__(self, "bands", int(self.bands))
        for name in FUSION_TENSOR_FIELDS[:-1]:
            check_finite(np.atleast_1d(getattr(self, name)), name)
        if not np.isfinite(self.beta) or self.beta <= 0.0:
            raise ValidationError(f"beta must be positive, got {self.beta}")
        if not 0.0 <= self.lambda_mix <= 1.0:
            raise ValidationError("lambda_mix outside [0, 1]")
        if self.bands < 1:
            raise ValidationError("bands must be >= 1")

    @property
    def hidden_dim(self) -> int:
        return self.w_feat.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.w_feat.shape[1]

    @classmethod
    def init_random(cls, rng: np.random.Generator,
                    feature_dim: int = DEFAULT_FEATURE_DIM,
                    bands: int = DEFAULT_BANDS,
                    hidden_dim: int = DEFAULT_HIDDEN_DIM,
                    beta: float = DEFAULT_BETA,
                    lambda_mix: float = DEFAULT_LAMBDA_MIX) -> "FusionParams":
        """Xavier-style initialization with zero biases."""
        enc = 2 * bands

        def xavier(fan_out, fan_in):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            return rng.normal(0.0, std, size=(fan_out, fan_in))

        return cls(
            w_feat=xavier(hidden_dim, feature_dim),
            b_feat=np.zeros(hidden_dim),
            w_time1=xavier(hidden_dim, enc),
            b_time1=np.zeros(hidden_dim),
            w_time2=xavier(hidden_dim, hidden_dim),
            b_time2=np.zeros(hidden_dim),
            w_attn1=xavier(hidden_dim, 2 * hidden_dim),
            b_attn1=np.zeros(hidden_dim),
            w_attn2=xavier(1, hidden_dim)[0],
            b_attn2=0.0,
            beta=beta,
            lambda_mix=lambda_mix,
            bands=bands,
        )

    def tensor_shapes(self):
        """(name, shape) pairs in serialization order; beta is a 1-vector."""
        out = []
        for name in FUSION_TENSOR_FIELDS:
            value = getattr(self, name)
            shape = (1,) if np.isscalar(value) else np.asarray(value).shape
            out.append((name, tuple(shape)))
        return out

    def to_vector(self) -> np.ndarray:
        """Flatten all trainable tensors (including beta) into one vector."""
        parts = []
        for name in FUSION_TENSOR_FIELDS:
            parts.append(np.ravel(np.asarray(getattr(self, name), dtype=np.float64)))
        return np.concatenate(parts)

    def from_vector(self, vec: np.ndarray) -> "FusionParams":
        """Rebuild parameters from a flat vector using this instance's shapes."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_parameters,):
            raise DimensionMismatchError(
                f"expected vector of length {self.n_parameters}, got {vec.shape}")
        fields = {}
        offset = 0
        for name, shape in self.tensor_shapes():
            size = int(np.prod(shape))
            chunk = vec[offset:offset + size].reshape(shape)
            fields[name] = float(chunk[0]) if name in ("b_attn2", "beta") else chunk
            offset += size
        return FusionParams(lambda_mix=self.lambda_mix, bands=self.bands, **fields)

    @property
    def n_parameters(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.tensor_shapes())

    def decay_mask(self) -> np.ndarray:
        """Boolean mask over the flat vector: True for weight matrices only."""
        parts = []
        for name, shape in self.tensor_shapes():
            is_matrix = name.startswith("w_")
            parts.append(np.full(int(np.prod(shape)), is_matrix, dtype=bool))
        return np.concatenate(parts)


@dataclass(frozen=True)
class SkyModel:
    """Directional background: degree-2 real spherical harmonics per channel."""

    coeffs: np.ndarray  # (9, 3)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", as_float_array(self.coeffs, "coeffs", (9, 3)))
        check_finite(self.coeffs, "coeffs")

    @classmethod
    def black(cls) -> "SkyModel":
        return cls(np.zeros((9, 3)))

    @classmethod
    def constant(cls, color) -> "SkyModel":
        coeffs = np.zeros((9, 3))
        coeffs[0] = np.asarray(color, dtype=np.float64) / 0.28209479177387814
        return cls(coeffs)
