"""Lifting frames into the canonical Gaussian space.

Per-frame pixels with valid depth are unprojected into reference-frame
coordinates, the raw attribute map is activated into Gaussian parameters,
dynamic regions get their opacity suppressed, and explicitly tracked
dynamic centers are interpolated to query times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import CameraModel, CanonicalSpace, FrameObservation, GaussianCloud
from .encoding import attribute_features
from .errors import (
    EmptyInputError,
    EmptyTrackError,
    InvalidDepthError,
    MissingGaussianMapError,
    ValidationError,
)

SCALE_CLAMP = (1e-6, 1e2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def unproject_pixel(cam: CameraModel, u: float, v: float, d: float) -> np.ndarray:
    """Lift pixel (u, v) at z-depth d into reference-frame coordinates."""
    if not np.isfinite(d) or d <= 0.0:
        raise InvalidDepthError(f"depth must be positive and finite, got {d}")
    if not (0.0 <= u <= cam.width - 1 and 0.0 <= v <= cam.height - 1):
        raise ValidationError(f"pixel ({u}, {v}) outside image bounds")
    return cam.unproject(float(u), float(v), float(d))


def _decode_frame(frame: FrameObservation, frame_index: int,
                  feature_dim: int) -> Tuple[GaussianCloud, np.ndarray]:
    """Decode one frame; returns the cloud and the (N, 2) pixel provenance."""
    if frame.gaussian_map is None:
        raise MissingGaussianMapError("frame has no gaussian_map")
    depth = frame.depth
    valid = np.isfinite(depth) & (depth > 0.0)
    vv, uu = np.nonzero(valid)  # row-major pixel order within the frame
    if uu.size == 0:
        return GaussianCloud.empty(feature_dim), np.zeros((0, 2), dtype=np.int64)
    raw = frame.gaussian_map[vv, uu, :]                     # (N, 11)
    color = _sigmoid(raw[:, 0:3])
    opacity = _sigmoid(raw[:, 3])
    scale = np.clip(np.exp(raw[:, 4:7]), *SCALE_CLAMP)
    rot_raw = raw[:, 7:11].copy()
    norms = np.linalg.norm(rot_raw, axis=1)
    degenerate = norms < 1e-12
    rot_raw[degenerate] = 1.0  # zero-channel fallback decodes to the diagonal direction
    rotation = rot_raw / np.linalg.norm(rot_raw, axis=1, keepdims=True)
    mu = frame.camera.unproject(uu.astype(np.float64), vv.astype(np.float64),
                                depth[vv, uu])
    cloud = GaussianCloud.create(
        mu=mu,
        color=color,
        opacity=opacity,
        scale=scale,
        rotation=rotation,
        timestamp=np.full(uu.shape, frame.timestamp),
        feature=attribute_features(color, opacity, scale, feature_dim),
        source_frame=np.full(uu.shape, frame_index, dtype=np.int64),
        validate=False,
    )
    return cloud, np.stack([uu, vv], axis=1).astype(np.int64)


def decode_gaussian_map(frame: FrameObservation, frame_index: int = 0,
                        feature_dim: int = 16) -> GaussianCloud:
    """Activate the raw attribute map into one primitive per valid-depth pixel.

    Channel activations: color/opacity through a sigmoid, scale through a
    clamped exponential, rotation l2-normalized.  Means come from depth
    unprojection, the timestamp from the frame, and the latent feature from
    the fixed attribute encoding.
    """
    cloud, _ = _decode_frame(frame, frame_index, feature_dim)
    return cloud


def build_canonical_space(frames: Sequence[FrameObservation],
                          feature_dim: int = 16) -> CanonicalSpace:
    """Concatenate decoded frames into one canonical space.

    Frames occupy contiguous blocks in input order; within a block the
    primitives follow row-major pixel order, so provenance is reproducible.
    """
    frames = list(frames)
    if not frames:
        raise EmptyInputError("no frames to lift")
    clouds = []
    pixels = []
    for i, frame in enumerate(frames):
        cloud, px = _decode_frame(frame, i, feature_dim)
        clouds.append(cloud)
        pixels.append(px)
    return CanonicalSpace(
        cloud=GaussianCloud.concatenate(clouds),
        frame_timestamps=np.array([f.timestamp for f in frames]),
        source_pixels=np.concatenate(pixels) if pixels else np.zeros((0, 2), np.int64),
    )


def suppress_dynamic(space: CanonicalSpace,
                     frames: Sequence[FrameObservation]) -> CanonicalSpace:
    """Scale each primitive's opacity by (1 - dynamic score at its source pixel).

    Never increases opacity; a score of 1 silences the primitive entirely.
    """
    frames = list(frames)
    factors = np.ones(len(space))
    sf = space.cloud.source_frame
    uu, vv = space.source_pixels[:, 0], space.source_pixels[:, 1]
    for i, frame in enumerate(frames):
        sel = sf == i
        factors[sel] = 1.0 - frame.dyn_mask[vv[sel], uu[sel]]
    cloud = space.cloud
    return CanonicalSpace(
        cloud=GaussianCloud(
            cloud.mu, cloud.color, cloud.opacity * factors, cloud.scale,
            cloud.rotation, cloud.timestamp, cloud.feature, cloud.source_frame),
        frame_timestamps=space.frame_timestamps,
        source_pixels=space.source_pixels,
    )


# ---------------------------------------------------------------------------
# Explicit dynamic tracks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DynamicTrack:
    """Sparse center trajectory of one explicitly dynamic object.

    ``keyframes`` is a list of (timestamp, center) pairs with strictly
    increasing timestamps; ``attached`` lists primitive indices that move
    rigidly with the track.
    """

    keyframes: Tuple[Tuple[float, np.ndarray], ...]
    attached: Tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.keyframes) == 0:
            raise EmptyTrackError("track has no keyframes")
        frozen = tuple((float(t), np.asarray(c, dtype=np.float64).reshape(3))
                       for t, c in self.keyframes)
        times = np.array([t for t, _ in frozen])
        if np.any(np.diff(times) <= 0.0):
            raise ValidationError("keyframe timestamps must be strictly increasing")
        object.__setattr__(self, "keyframes", frozen)
        object.__setattr__(self, "attached", tuple(int(i) for i in self.attached))

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.keyframes])

    @property
    def centers(self) -> np.ndarray:
        return np.stack([c for _, c in self.keyframes])


def interpolate_dynamic_centers(track: DynamicTrack, tau_star: float) -> np.ndarray:
    """Piecewise-linear center at tau_star, clamped outside the keyframe range."""
    times = track.times
    centers = track.centers
    return np.array([np.interp(tau_star, times, centers[:, k]) for k in range(3)])


def transport_attached(space: CanonicalSpace, track: DynamicTrack,
                       tau_star: float) -> CanonicalSpace:
    """Move a track's attached primitives rigidly to the query time.

    Each attached primitive keeps its non-positional attributes and is
    translated by the center displacement between the keyframe nearest its
    own timestamp and the query time.
    """
    if not track.attached:
        return space
    idx = np.asarray(track.attached, dtype=np.int64)
    times = track.times
    mu = np.array(space.cloud.mu)
    target = interpolate_dynamic_centers(track, tau_star)
    for i in idx:
        nearest = int(np.argmin(np.abs(times - space.cloud.timestamp[i])))
        mu[i] = mu[i] + (target - track.centers[nearest])
    cloud = space.cloud
    return CanonicalSpace(
        cloud=GaussianCloud(mu, cloud.color, cloud.opacity, cloud.scale,
                            cloud.rotation, cloud.timestamp, cloud.feature,
                            cloud.source_frame),
        frame_timestamps=space.frame_timestamps,
        source_pixels=space.source_pixels,
    )
