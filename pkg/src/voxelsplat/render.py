"""Forward software rasterization of 3D Gaussians.

Splats are projected to screen-space 2D Gaussians through the perspective
Jacobian, binned into 16x16 pixel tiles with conservative screen-space
bounds, and composited front to back.  The rasterized color buffer is
premultiplied by accumulated alpha; :func:`composite` un-premultiplies and
blends with a directional sky background.  :func:`rasterize_reference`
evaluates every Gaussian at every pixel and serves as the correctness
oracle for the tiled path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import CameraModel, GaussianCloud, GaussianPrimitive, SkyModel, quat_to_rotmat
from .errors import ShapeMismatchError

TILE = 16
NEAR_PLANE = 0.01
COV_DILATION = 0.3          # low-pass dilation added to both cov2d diagonals
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0    # contributions below this are dropped
TRANSMITTANCE_FLOOR = 1e-4  # pixel terminates once this opaque
MAX_CONDITION = 1e8


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray   # (2,) pixel coordinates
    cov2d: np.ndarray    # (2, 2) screen-space covariance, dilated
    view_depth: float


@dataclass(frozen=True)
class RenderOutput:
    """Rasterization buffers: premultiplied rgb, accumulated alpha, expected depth."""

    rgb: np.ndarray                  # (H, W, 3)
    alpha: np.ndarray                # (H, W) in [0, 1]
    depth: Optional[np.ndarray] = None  # (H, W) alpha-weighted mean depth


def _as_cloud(gaussians) -> GaussianCloud:
    if isinstance(gaussians, GaussianCloud):
        return gaussians
    return GaussianCloud.from_primitives(list(gaussians))


def _world_covariances(cloud: GaussianCloud) -> np.ndarray:
    """Sigma = R diag(s^2) R^T per splat, shape (N, 3, 3)."""
    rot = quat_to_rotmat(cloud.rotation)
    rs = rot * cloud.scale[:, None, :]
    return rs @ np.transpose(rs, (0, 2, 1))


def _project_cloud(cloud: GaussianCloud, cam: CameraModel):
    """Vectorized projection; returns (mean2d, cov2d, depth, keep mask)."""
    n = len(cloud)
    if n == 0:
        return (np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                np.zeros(0, dtype=bool))
    p = cloud.mu @ cam.R.T + cam.T
    z = p[:, 2]
    keep = z > NEAR_PLANE
    zs = np.where(keep, z, 1.0)  # placeholder depth for culled rows
    fx, fy = cam.fx, cam.fy
    j = np.zeros((n, 2, 3))
    j[:, 0, 0] = fx / zs
    j[:, 0, 2] = -fx * p[:, 0] / zs**2
    j[:, 1, 1] = fy / zs
    j[:, 1, 2] = -fy * p[:, 1] / zs**2
    jw = j @ cam.R
    cov2d = jw @ _world_covariances(cloud) @ np.transpose(jw, (0, 2, 1))
    cov2d[:, 0, 0] += COV_DILATION
    cov2d[:, 1, 1] += COV_DILATION
    mean2d = np.stack([fx * p[:, 0] / zs + cam.cx, fy * p[:, 1] / zs + cam.cy], axis=1)
    return mean2d, cov2d, z, keep


def project_gaussian(g: GaussianPrimitive, cam: CameraModel) -> Optional[ProjectedGaussian]:
    """Project one splat to screen space; None means culled behind the camera."""
    cloud = GaussianCloud.from_primitives([g], validate=False)
    mean2d, cov2d, depth, keep = _project_cloud(cloud, cam)
    if not keep[0]:
        return None
    return ProjectedGaussian(mean2d=mean2d[0], cov2d=cov2d[0], view_depth=float(depth[0]))


def _conics_and_radii(cov2d: np.ndarray, opacity: np.ndarray):
    """Invert 2x2 covariances and bound each splat's contributing radius.

    The radius is where alpha * exp(-q/2) falls below the 1/255 skip
    threshold, so every pixel outside it is a guaranteed zero contribution
    and tile binning stays exact.  Splats with degenerate covariances
    (non-positive determinant or condition number above 1e8) are dropped.
    """
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    lam_max = mid + disc
    lam_min = mid - disc
    ok = (det > 0.0) & (lam_min > 0.0) & (lam_max / np.maximum(lam_min, 1e-300) <= MAX_CONDITION)
    ok &= opacity * 255.0 > 1.0
    safe_det = np.where(ok, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    cutoff = 2.0 * np.log(np.maximum(opacity, 1e-300) * 255.0)
    radius = np.sqrt(np.maximum(cutoff, 0.0) * lam_max)
    return conic, radius, ok


def _composite_block(rgb, alpha_acc, depth_acc, trans, us, vs, order,
                     mean2d, conic, opacity, color, depth):
    """Front-to-back compositing of the listed splats over one pixel block.

    Mutates the buffers in place; ``order`` must already be depth-sorted.
    """
    for i in order:
        active = trans >= TRANSMITTANCE_FLOOR
        if not active.any():
            break
        dx = us - mean2d[i, 0]
        dy = vs - mean2d[i, 1]
        q = conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy
        a_eff = np.minimum(opacity[i] * np.exp(-0.5 * q), ALPHA_CLAMP)
        hit = active & (a_eff >= ALPHA_SKIP)
        if not hit.any():
            continue
        contrib = a_eff[hit] * trans[hit]
        rgb[hit] += color[i] * contrib[:, None]
        alpha_acc[hit] += contrib
        depth_acc[hit] += depth[i] * contrib
        trans[hit] *= 1.0 - a_eff[hit]


def _finalize(rgb, alpha, depth_acc, h, w) -> RenderOutput:
    alpha = np.clip(alpha, 0.0, 1.0)
    expected = np.zeros_like(alpha)
    covered = alpha > 1e-6
    expected[covered] = depth_acc[covered] / alpha[covered]
    return RenderOutput(rgb=rgb.reshape(h, w, 3), alpha=alpha.reshape(h, w),
                        depth=expected.reshape(h, w))


def rasterize(gaussians: Union[GaussianCloud, Sequence[GaussianPrimitive]],
              cam: CameraModel) -> RenderOutput:
    """Tile-based front-to-back alpha compositing of all visible splats."""
    cloud = _as_cloud(gaussians)
    h, w = cam.height, cam.width
    rgb = np.zeros((h * w, 3))
    alpha_acc = np.zeros(h * w)
    depth_acc = np.zeros(h * w)
    trans = np.ones(h * w)
    mean2d, cov2d, depth, keep = _project_cloud(cloud, cam)
    if keep.any():
        conic, radius, ok = _conics_and_radii(cov2d, cloud.opacity)
        keep &= ok
        idx = np.flatnonzero(keep)
        # depth-ascending processing order, ties broken by primitive index
        idx = idx[np.argsort(depth[idx], kind="stable")]
        if idx.size:
            tiles_x = -(-w // TILE)
            tiles_y = -(-h // TILE)
            x0 = np.maximum(np.floor((mean2d[idx, 0] - radius[idx]) / TILE), 0).astype(np.int64)
            x1 = np.minimum(np.floor((mean2d[idx, 0] + radius[idx]) / TILE), tiles_x - 1).astype(np.int64)
            y0 = np.maximum(np.floor((mean2d[idx, 1] - radius[idx]) / TILE), 0).astype(np.int64)
            y1 = np.minimum(np.floor((mean2d[idx, 1] + radius[idx]) / TILE), tiles_y - 1).astype(np.int64)
            visible = (x1 >= x0) & (y1 >= y0)
            idx, x0, x1, y0, y1 = idx[visible], x0[visible], x1[visible], y0[visible], y1[visible]
            spans_x = x1 - x0 + 1
            spans = spans_x * (y1 - y0 + 1)
            total = int(np.sum(spans))
            if total:
                rep = np.repeat(np.arange(idx.size), spans)
                local = np.arange(total) - np.repeat(np.cumsum(spans) - spans, spans)
                tx = x0[rep] + local % spans_x[rep]
                ty = y0[rep] + local // spans_x[rep]
                tile_id = ty * tiles_x + tx
                # rank = depth order; pairs sorted per tile by rank
                pair_order = np.lexsort((rep, tile_id))
                tile_sorted = tile_id[pair_order]
                member = idx[rep][pair_order]
                bounds = np.flatnonzero(np.diff(tile_sorted)) + 1
                starts = np.concatenate([[0], bounds])
                ends = np.concatenate([bounds, [total]])
                uu, vv = cam.pixel_grid()
                uu, vv = uu.reshape(-1), vv.reshape(-1)
                for s, e in zip(starts, ends):
                    tid = tile_sorted[s]
                    tx_i, ty_i = tid % tiles_x, tid // tiles_x
                    px0, py0 = tx_i * TILE, ty_i * TILE
                    cols = np.arange(px0, min(px0 + TILE, w))
                    rows = np.arange(py0, min(py0 + TILE, h))
                    flat = (rows[:, None] * w + cols[None, :]).reshape(-1)
                    sub = (rgb[flat], alpha_acc[flat], depth_acc[flat], trans[flat])
                    _composite_block(*sub, uu[flat], vv[flat], member[s:e],
                                     mean2d, conic, cloud.opacity, cloud.color,
                                     depth)
                    rgb[flat], alpha_acc[flat], depth_acc[flat], trans[flat] = sub
    return _finalize(rgb, alpha_acc, depth_acc, h, w)


def rasterize_reference(gaussians: Union[GaussianCloud, Sequence[GaussianPrimitive]],
                        cam: CameraModel) -> RenderOutput:
    """Brute-force oracle: every kept splat evaluated at every pixel."""
    cloud = _as_cloud(gaussians)
    h, w = cam.height, cam.width
    rgb = np.zeros((h * w, 3))
    alpha_acc = np.zeros(h * w)
    depth_acc = np.zeros(h * w)
    trans = np.ones(h * w)
    mean2d, cov2d, depth, keep = _project_cloud(cloud, cam)
    if keep.any():
        conic, _, ok = _conics_and_radii(cov2d, cloud.opacity)
        keep &= ok
        idx = np.flatnonzero(keep)
        idx = idx[np.argsort(depth[idx], kind="stable")]
        uu, vv = cam.pixel_grid()
        _composite_block(rgb, alpha_acc, depth_acc, trans, uu.reshape(-1),
                         vv.reshape(-1), idx, mean2d, conic, cloud.opacity,
                         cloud.color, depth)
    return _finalize(rgb, alpha_acc, depth_acc, h, w)


# ---------------------------------------------------------------------------
# Sky background
# ---------------------------------------------------------------------------

# Real spherical-harmonic basis up to degree 2, in the order
# [Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22].
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)


def sh_basis_deg2(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 9 real SH basis functions at unit directions (..., 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        np.full_like(x, _SH_C0),
        _SH_C1 * y,
        _SH_C1 * z,
        _SH_C1 * x,
        _SH_C2[0] * x * y,
        _SH_C2[0] * y * z,
        _SH_C2[1] * (2.0 * z * z - x * x - y * y),
        _SH_C2[0] * x * z,
        _SH_C2[2] * (x * x - y * y),
    ], axis=-1)


def sky_eval(sky: SkyModel, cam: CameraModel) -> np.ndarray:
    """Directional background color per pixel, clamped to [0, 1]."""
    u, v = cam.pixel_grid()
    dirs = cam.ray_directions(u, v)
    rgb = sh_basis_deg2(dirs) @ sky.coeffs
    return np.clip(rgb, 0.0, 1.0)


def composite(render: RenderOutput, sky_rgb: np.ndarray) -> np.ndarray:
    """Blend the 3D render over the sky: alpha * I3d + (1 - alpha) * sky.

    ``render.rgb`` is premultiplied by accumulated alpha, so the pure 3D
    color is rgb / alpha wherever alpha is non-negligible and the sky color
    elsewhere (where the blend reduces to the sky anyway).
    """
    sky_rgb = np.asarray(sky_rgb, dtype=np.float64)
    if sky_rgb.shape != render.rgb.shape:
        raise ShapeMismatchError(
            f"sky {sky_rgb.shape} does not match render {render.rgb.shape}")
    alpha = render.alpha[..., None]
    covered = render.alpha > 1e-6
    pure = np.where(covered[..., None], render.rgb / np.where(alpha > 1e-6, alpha, 1.0),
                    sky_rgb)
    return alpha * pure + (1.0 - alpha) * sky_rgb
