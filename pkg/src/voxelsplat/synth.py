"""Procedural temporal-conflict scenes for desk-scale training and tests.

A scene is a set of base Gaussians placed on a voxel lattice (a textured
ground-plane sheet plus ellipsoid clutter), observed by one static camera
over several frames.  A configurable fraction of the Gaussians oscillates
sinusoidally in position (along its own pixel ray) and color, so the same
voxel holds genuinely conflicting observations across time while all
temporal copies of one Gaussian stay inside one voxel by construction.

Every frame embeds its Gaussians exactly: the depth map and the raw
attribute map decode back to ``true_state`` at that frame's timestamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .core import CameraModel, FrameObservation, GaussianCloud
from .encoding import attribute_features
from .errors import BadConfigError
from .render import RenderOutput, rasterize

# Fractions of the voxel size used by the deformation field; chosen so the
# pixel-snap offset plus the largest displacement keeps every temporal copy
# inside its base voxel.
POSITION_AMPLITUDE_FRAC = 0.42
COLOR_AMPLITUDE = 0.15


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 4
    n_gaussians: int = 500
    deform_amplitude: float = 1.0      # in [0, 1], scales both deformations
    dynamic_fraction: float = 0.5
    width: int = 64
    height: int = 64
    focal: float = 150.0
    rho: float = 0.25                  # scene-calibrated voxel side
    depth_range: Tuple[float, float] = (4.0, 10.0)
    plane_y: float = 1.0               # ground-plane height (y points down)
    temporal_profile: str = "piecewise"  # or "smooth"
    feature_dim: int = 16
    render_images: bool = True

    def validate(self) -> None:
        if self.n_frames < 2:
            raise BadConfigError("need at least 2 frames")
        if self.n_gaussians < 1:
            raise BadConfigError("need at least 1 Gaussian")
        if not 0.0 <= self.deform_amplitude <= 1.0:
            raise BadConfigError("deform_amplitude must be in [0, 1]")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise BadConfigError("dynamic_fraction must be in [0, 1]")
        if self.rho <= 0.0 or self.focal <= 0.0:
            raise BadConfigError("rho and focal must be positive")
        if self.depth_range[0] <= 0.0 or self.depth_range[1] <= self.depth_range[0]:
            raise BadConfigError("invalid depth range")
        if self.temporal_profile not in ("piecewise", "smooth"):
            raise BadConfigError(f"unknown temporal profile {self.temporal_profile!r}")


@dataclass(frozen=True)
class SyntheticScene:
    """Frames plus the exact ground-truth Gaussian state at any time."""

    frames: Tuple[FrameObservation, ...]
    camera: CameraModel
    seed: int
    config: SynthConfig
    rho: float
    frame_times: np.ndarray        # (T,)
    pixels: np.ndarray             # (n, 2) int, pixel of each base Gaussian
    base_depth: np.ndarray         # (n,) z-depth of the base position
    base_color: np.ndarray         # (n, 3)
    opacity: np.ndarray            # (n,)
    scale: np.ndarray              # (n, 3)
    rotation: np.ndarray           # (n, 4)
    is_dynamic: np.ndarray         # (n,) bool
    phase_pos: np.ndarray          # (n,)
    phase_col: np.ndarray          # (n,)
    color_dir: np.ndarray          # (n, 3) unit color-deformation direction

    @property
    def n_gaussians(self) -> int:
        return self.pixels.shape[0]

    def snap_time(self, tau: float) -> float:
        """Nearest frame time (the piecewise temporal profile)."""
        return float(self.frame_times[int(np.argmin(np.abs(self.frame_times - tau)))])

    def _effective_time(self, tau: float) -> float:
        if self.config.temporal_profile == "piecewise":
            return self.snap_time(tau)
        return float(tau)

    def state_depth(self, tau: float) -> np.ndarray:
        """Per-Gaussian z-depth at time tau (position moves along the pixel ray)."""
        te = self._effective_time(tau)
        amp = POSITION_AMPLITUDE_FRAC * self.rho * self.config.deform_amplitude
        delta = amp * np.sin(np.pi * te + self.phase_pos) * self.is_dynamic
        return self.base_depth + delta

    def state_color(self, tau: float) -> np.ndarray:
        te = self._effective_time(tau)
        amp = COLOR_AMPLITUDE * self.config.deform_amplitude
        swing = amp * np.sin(np.pi * te + self.phase_col) * self.is_dynamic
        return self.base_color + swing[:, None] * self.color_dir

    def true_state(self, tau: float) -> GaussianCloud:
        """Ground-truth Gaussian set at time tau.

        Positions are computed through the same unprojection as frame
        decoding, so the embedded per-frame maps reproduce this state.
        """
        depth = self.state_depth(tau)
        color = self.state_color(tau)
        mu = self.camera.unproject(self.pixels[:, 0].astype(np.float64),
                                   self.pixels[:, 1].astype(np.float64), depth)
        return GaussianCloud.create(
            mu=mu, color=color, opacity=self.opacity, scale=self.scale,
            rotation=self.rotation,
            timestamp=np.full(self.n_gaussians, float(np.clip(tau, 0.0, 1.0))),
            feature=attribute_features(color, self.opacity, self.scale,
                                       self.config.feature_dim),
            source_frame=np.zeros(self.n_gaussians, dtype=np.int64),
            validate=False)


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p / (1.0 - p))


def _plane_texture(x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Smooth procedural color field for the ground-plane sheet."""
    r = 0.5 + 0.25 * np.sin(2.0 * np.pi * x / 1.3)
    g = 0.5 + 0.25 * np.sin(2.0 * np.pi * z / 1.7 + 1.0)
    b = 0.5 + 0.25 * np.sin(2.0 * np.pi * (x + z) / 2.1 + 2.0)
    return np.stack([r, g, b], axis=1)


def _lattice_placement(cfg: SynthConfig, rng: np.random.Generator):
    """Pick distinct voxel cells with distinct pixels for every base Gaussian.

    Returns pixel coordinates, base depths (cell-center z) and a flag for
    plane membership.  Cells are snapped to pixel rays at unchanged z-depth,
    which keeps them within a small fraction of a cell of their center.
    """
    rho, f = cfg.rho, cfg.focal
    cx, cy = (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0
    kz_lo = int(np.ceil(cfg.depth_range[0] / rho))
    kz_hi = int(np.floor(cfg.depth_range[1] / rho))
    margin = 2.0  # pixels kept clear of the image border

    def pixel_of(cell):
        x, y, z = cell[0] * rho, cell[1] * rho, cell[2] * rho
        u = f * x / z + cx
        v = f * y / z + cy
        return int(np.round(u)), int(np.round(v))

    def in_bounds(px):
        return margin <= px[0] <= cfg.width - 1 - margin and \
            margin <= px[1] <= cfg.height - 1 - margin

    ky_plane = int(np.round(cfg.plane_y / rho))
    taken_pixels = set()
    taken_cells = set()
    cells = []
    pixels = []
    plane_flags = []

    # ground-plane sheet, scanned near-to-far
    n_plane_target = cfg.n_gaussians // 2
    for kz in range(kz_lo, kz_hi + 1):
        if len(cells) >= n_plane_target:
            break
        z = kz * rho
        kx_max = int(np.floor((cfg.width / 2.0 - margin - 1) / f * z / rho))
        for kx in range(-kx_max, kx_max + 1):
            if len(cells) >= n_plane_target:
                break
            cell = (kx, ky_plane, kz)
            px = pixel_of(cell)
            if not in_bounds(px) or px in taken_pixels or cell in taken_cells:
                continue
            taken_pixels.add(px)
            taken_cells.add(cell)
            cells.append(cell)
            pixels.append(px)
            plane_flags.append(True)

    # ellipsoid clutter above the plane
    attempts = 0
    while len(cells) < cfg.n_gaussians:
        attempts += 1
        if attempts > 200 * cfg.n_gaussians:
            raise BadConfigError(
                "could not place the requested number of Gaussians; "
                "reduce n_gaussians or enlarge the image/frustum")
        kz = int(rng.integers(kz_lo, kz_hi + 1))
        z = kz * rho
        kx_max = int(np.floor((cfg.width / 2.0 - margin - 1) / f * z / rho))
        ky_max = int(np.floor((cfg.height / 2.0 - margin - 1) / f * z / rho))
        if kx_max < 1 or ky_max < 1:
            continue
        kx = int(rng.integers(-kx_max, kx_max + 1))
        ky = int(rng.integers(-ky_max, min(ky_max, ky_plane - 1) + 1))
        cell = (kx, ky, kz)
        if cell in taken_cells:
            continue
        px = pixel_of(cell)
        if not in_bounds(px) or px in taken_pixels:
            continue
        taken_pixels.add(px)
        taken_cells.add(cell)
        cells.append(cell)
        pixels.append(px)
        plane_flags.append(False)

    return (np.array(pixels, dtype=np.int64),
            np.array([c[2] * rho for c in cells]),
            np.array(plane_flags, dtype=bool))


def synth_scene(seed: int, config: Optional[SynthConfig] = None) -> SyntheticScene:
    """Generate a deterministic temporal-conflict scene for the given seed."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    cam = CameraModel(
        R=np.eye(3), T=np.zeros(3),
        K=np.array([[cfg.focal, 0.0, (cfg.width - 1) / 2.0],
                    [0.0, cfg.focal, (cfg.height - 1) / 2.0],
                    [0.0, 0.0, 1.0]]),
        width=cfg.width, height=cfg.height)

    pixels, base_depth, on_plane = _lattice_placement(cfg, rng)
    n = pixels.shape[0]
    mu0 = cam.unproject(pixels[:, 0].astype(np.float64),
                        pixels[:, 1].astype(np.float64), base_depth)

    color = rng.uniform(0.2, 0.8, size=(n, 3))
    color[on_plane] = _plane_texture(mu0[on_plane, 0], mu0[on_plane, 2])
    opacity = rng.uniform(0.6, 0.95, size=n)

    scale = np.exp(rng.uniform(np.log(0.15 * cfg.rho), np.log(0.9 * cfg.rho),
                               size=(n, 3)))
    # disc-shaped plane splats, thin along the plane normal (y)
    scale[on_plane, 0] = 0.8 * cfg.rho
    scale[on_plane, 1] = 0.08 * cfg.rho
    scale[on_plane, 2] = 0.8 * cfg.rho

    rotation = rng.normal(size=(n, 4))
    rotation /= np.linalg.norm(rotation, axis=1, keepdims=True)
    rotation[rotation[:, 0] < 0.0] *= -1.0
    rotation[on_plane] = np.array([1.0, 0.0, 0.0, 0.0])

    n_dynamic = int(round(cfg.dynamic_fraction * n))
    is_dynamic = np.zeros(n, dtype=bool)
    is_dynamic[rng.permutation(n)[:n_dynamic]] = True

    scene = SyntheticScene(
        frames=(), camera=cam, seed=int(seed), config=cfg, rho=cfg.rho,
        frame_times=np.linspace(0.0, 1.0, cfg.n_frames),
        pixels=pixels, base_depth=base_depth, base_color=color,
        opacity=opacity, scale=scale, rotation=rotation,
        is_dynamic=is_dynamic,
        phase_pos=rng.uniform(0.0, 2.0 * np.pi, size=n),
        phase_col=rng.uniform(0.0, 2.0 * np.pi, size=n),
        color_dir=_unit_rows(rng.normal(size=(n, 3))),
    )
    frames = tuple(_embed_frame(scene, t) for t in range(cfg.n_frames))
    return replace(scene, frames=frames)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _embed_frame(scene: SyntheticScene, t: int) -> FrameObservation:
    """Write one frame whose maps decode exactly to true_state(frame time)."""
    cfg = scene.config
    tau = float(scene.frame_times[t])
    h, w = cfg.height, cfg.width
    uu, vv = scene.pixels[:, 0], scene.pixels[:, 1]

    depth = np.zeros((h, w))
    depth[vv, uu] = scene.state_depth(tau)

    gmap = np.zeros((h, w, 11))
    gmap[vv, uu, 0:3] = _logit(scene.state_color(tau))
    gmap[vv, uu, 3] = _logit(scene.opacity)
    gmap[vv, uu, 4:7] = np.log(scene.scale)
    gmap[vv, uu, 7:11] = scene.rotation

    if cfg.render_images:
        out: RenderOutput = rasterize(scene.true_state(tau), scene.camera)
        image = np.clip(out.rgb, 0.0, 1.0)
    else:
        image = np.zeros((h, w, 3))
        image[vv, uu] = scene.state_color(tau)

    return FrameObservation(
        image=image, depth=depth,
        dyn_mask=np.zeros((h, w)), sky_mask=np.zeros((h, w)),
        timestamp=tau, camera=scene.camera, gaussian_map=gmap)
