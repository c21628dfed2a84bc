"""Desk-scale training of the fusion parameters.

Supervision lives in attribute space: the fused primitives at a query time
are compared voxel-by-voxel against the scene's ground-truth state
(squared error on position, color and log-scale plus a sign-invariant
quaternion term), with a fixed penalty for ground-truth voxels the fused
output fails to cover.  Gradients flow through the softmax weights only;
they are implemented analytically and checked against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .aggregate import (
    PreparedSpace,
    aggregate,
    prepare_space,
    voxel_ids,
    _forward,
    _segment_softmax,
)
from .core import FrameObservation, FusionParams, GaussianCloud
from .errors import (
    BadConfigError,
    DivergedLossError,
    NoMatchedVoxelsError,
    NonFiniteObjectiveError,
    ValidationError,
)
from .lift import build_canonical_space, decode_gaussian_map

DEFAULT_MISS_PENALTY = 1.0
DEFAULT_P_DROP = 0.7
WARMUP_FRACTION = 0.05
BETA_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# Ground truth per voxel
# ---------------------------------------------------------------------------

def _group_mean_state(cloud: GaussianCloud, rho: float):
    """Voxelize a ground-truth cloud and average multi-occupant cells.

    Returns a dict cell -> (mu, color, log_scale, quat).  Cells are almost
    always single-occupant for calibrated scenes; coarse voxel sweeps merge
    occupants with uniform weights (geometric mean for scale, hemisphere-
    aligned normalized mean for rotation).
    """
    ids = voxel_ids(cloud.mu, rho)
    table = {}
    for m in range(len(cloud)):
        table.setdefault(tuple(ids[m]), []).append(m)
    out = {}
    for cell, members in table.items():
        idx = np.array(members)
        mu = cloud.mu[idx].mean(axis=0)
        color = cloud.color[idx].mean(axis=0)
        log_s = np.log(cloud.scale[idx]).mean(axis=0)
        q = cloud.rotation[idx]
        sign = np.where(q @ q[0] < 0.0, -1.0, 1.0)
        q_mean = (q * sign[:, None]).mean(axis=0)
        q_mean = q_mean / np.linalg.norm(q_mean)
        out[cell] = (mu, color, log_s, q_mean)
    return out


@dataclass(frozen=True)
class ObjectiveContext:
    """Prepared context space plus voxel-aligned ground truth for one query."""

    prep: PreparedSpace
    tau_star: float
    matched: np.ndarray       # (M,) bool, fused voxel has a ground-truth target
    gt_mu: np.ndarray         # (M, 3), rows valid where matched
    gt_color: np.ndarray      # (M, 3)
    gt_log_scale: np.ndarray  # (M, 3)
    gt_rotation: np.ndarray   # (M, 4)
    n_gt_voxels: int
    miss_penalty: float

    @property
    def n_matched(self) -> int:
        return int(np.sum(self.matched))


def build_objective_context(scene, tau_star: float,
                            context_frames: Optional[Sequence[FrameObservation]] = None,
                            rho: Optional[float] = None,
                            params_like: Optional[FusionParams] = None,
                            bands: int = 10, feature_dim: int = 16,
                            miss_penalty: float = DEFAULT_MISS_PENALTY,
                            prepared: Optional[PreparedSpace] = None) -> ObjectiveContext:
    """Lift the context, group it into voxels, and align ground truth.

    When ``context_frames`` is omitted, all scene frames are used except one
    whose timestamp equals ``tau_star`` exactly (the training-time dropout
    convention).  ``params_like`` supplies bands/feature dims.
    """
    rho = float(scene.rho if rho is None else rho)
    if params_like is not None:
        bands, feature_dim = params_like.bands, params_like.feature_dim
    if prepared is None:
        if context_frames is None:
            context_frames = [f for f in scene.frames
                              if abs(f.timestamp - tau_star) >= 1e-9]
        space = build_canonical_space(context_frames, feature_dim)
        prepared = prepare_space(space.cloud, rho, bands)

    gt_table = _group_mean_state(scene.true_state(tau_star), rho)
    if not gt_table:
        raise NoMatchedVoxelsError("ground truth has no occupied voxels")
    m = prepared.n_voxels
    matched = np.zeros(m, dtype=bool)
    gt_mu = np.zeros((m, 3))
    gt_color = np.zeros((m, 3))
    gt_log_scale = np.zeros((m, 3))
    gt_rotation = np.zeros((m, 4))
    gt_rotation[:, 0] = 1.0
    for i in range(m):
        cell = (int(prepared.ids[i, 0]), int(prepared.ids[i, 1]), int(prepared.ids[i, 2]))
        hit = gt_table.get(cell)
        if hit is not None:
            matched[i] = True
            gt_mu[i], gt_color[i], gt_log_scale[i], gt_rotation[i] = hit
    if not np.any(matched):
        raise NoMatchedVoxelsError("no fused voxel coincides with the ground truth")
    return ObjectiveContext(
        prep=prepared, tau_star=float(tau_star), matched=matched, gt_mu=gt_mu,
        gt_color=gt_color, gt_log_scale=gt_log_scale, gt_rotation=gt_rotation,
        n_gt_voxels=len(gt_table), miss_penalty=float(miss_penalty))


def _objective_core(params: FusionParams, ctx: ObjectiveContext,
                    want_grad: bool) -> Tuple[float, Optional[np.ndarray]]:
    prep = ctx.prep
    fwd = _forward(prep.feature, prep.gamma, ctx.tau_star, params)
    beta = params.beta
    w = _segment_softmax(fwd.logits, beta, prep.starts, prep.counts)
    starts, counts = prep.starts, prep.counts
    wc = w[:, None]

    mu_hat = np.add.reduceat(wc * prep.mu, starts, axis=0)
    c_hat = np.add.reduceat(wc * prep.color, starts, axis=0)
    ls_hat = np.add.reduceat(wc * prep.log_scale, starts, axis=0)
    ref = np.repeat(prep.rotation[starts], counts, axis=0)
    sign = np.where(np.sum(prep.rotation * ref, axis=1) < 0.0, -1.0, 1.0)
    q_tilde = sign[:, None] * prep.rotation
    u = np.add.reduceat(wc * q_tilde, starts, axis=0)
    u_norm = np.linalg.norm(u, axis=1)
    u_norm = np.maximum(u_norm, 1e-12)
    q_hat = u / u_norm[:, None]

    matched = ctx.matched
    d_mu = (mu_hat - ctx.gt_mu) * matched[:, None]
    d_c = (c_hat - ctx.gt_color) * matched[:, None]
    d_ls = (ls_hat - ctx.gt_log_scale) * matched[:, None]
    qdot = np.sum(q_hat * ctx.gt_rotation, axis=1)
    q_loss = (1.0 - qdot**2) * matched

    g = float(ctx.n_gt_voxels)
    n_miss = ctx.n_gt_voxels - ctx.n_matched
    value = (np.sum(d_mu**2) + np.sum(d_c**2) + np.sum(d_ls**2) + np.sum(q_loss)
             + ctx.miss_penalty * n_miss) / g
    if not want_grad:
        return float(value), None

    # d(loss)/d(per-voxel fused attributes), then per-member d(loss)/dw
    scale = 2.0 / g
    rep = prep.repeat_per_member
    dw = np.sum(prep.mu * rep(scale * d_mu), axis=1)
    dw += np.sum(prep.color * rep(scale * d_c), axis=1)
    dw += np.sum(prep.log_scale * rep(scale * d_ls), axis=1)
    # quaternion branch: d(1 - (q.g)^2)/du through the normalization
    dq_hat = (-2.0 * qdot * matched / g)[:, None] * ctx.gt_rotation
    du = (dq_hat - q_hat * np.sum(q_hat * dq_hat, axis=1, keepdims=True)) \
        / u_norm[:, None]
    dw += np.sum(q_tilde * rep(du), axis=1)

    # softmax backward inside each voxel: z = logits / beta
    inner = np.add.reduceat(w * dw, starts)
    dz = w * (dw - np.repeat(inner, counts))
    d_logits = dz / beta
    d_beta = float(np.sum(dz * (-fwd.logits / beta**2)))

    grad = _attention_backward(params, prep, fwd, d_logits)
    grad["beta"] = np.array([d_beta])
    flat = np.concatenate([np.ravel(grad[name]) for name in
                           ("w_feat", "b_feat", "w_time1", "b_time1", "w_time2",
                            "b_time2", "w_attn1", "b_attn1", "w_attn2", "b_attn2",
                            "beta")])
    return float(value), flat


def _attention_backward(params: FusionParams, prep: PreparedSpace,
                        fwd, d_logits: np.ndarray) -> dict:
    hidden = params.hidden_dim
    a1l = params.w_attn1[:, :hidden]
    a1r = params.w_attn1[:, hidden:]

    d_w_attn2 = fwd.v1.T @ d_logits
    d_b_attn2 = np.array([np.sum(d_logits)])
    dv1 = d_logits[:, None] * params.w_attn2[None, :]
    du1 = dv1 * (1.0 - fwd.v1**2)
    du1_sum = np.sum(du1, axis=0)
    d_w_attn1 = np.concatenate([du1.T @ fwd.h, np.outer(du1_sum, fwd.h_star)], axis=1)
    d_b_attn1 = du1_sum
    dh = du1 @ a1l
    dh_star = du1_sum @ a1r

    # member path: h = phi_f(feature) + phi_t(gamma)
    d_w_feat = dh.T @ prep.feature
    d_b_feat = np.sum(dh, axis=0)
    d_w_time2 = dh.T @ fwd.z1
    d_b_time2 = np.sum(dh, axis=0)
    dz1 = (dh @ params.w_time2) * (1.0 - fwd.z1**2)
    d_w_time1 = dz1.T @ prep.gamma
    d_b_time1 = np.sum(dz1, axis=0)

    # query path: h* = phi_t(gamma(tau*))
    d_w_time2 += np.outer(dh_star, fwd.z1_star)
    d_b_time2 += dh_star
    dz1_star = (dh_star @ params.w_time2) * (1.0 - fwd.z1_star**2)
    d_w_time1 += np.outer(dz1_star, fwd.gamma_star)
    d_b_time1 += dz1_star

    return {
        "w_feat": d_w_feat, "b_feat": d_b_feat,
        "w_time1": d_w_time1, "b_time1": d_b_time1,
        "w_time2": d_w_time2, "b_time2": d_b_time2,
        "w_attn1": d_w_attn1, "b_attn1": d_b_attn1,
        "w_attn2": d_w_attn2, "b_attn2": d_b_attn2,
    }


def objective_value(params: FusionParams, ctx: ObjectiveContext) -> float:
    value, _ = _objective_core(params, ctx, want_grad=False)
    return value


def objective_value_and_grad(params: FusionParams,
                             ctx: ObjectiveContext) -> Tuple[float, np.ndarray]:
    value, grad = _objective_core(params, ctx, want_grad=True)
    return value, grad


def fusion_objective(params: FusionParams, scene, tau_star: float,
                     context_frames: Optional[Sequence[FrameObservation]] = None,
                     rho: Optional[float] = None,
                     miss_penalty: float = DEFAULT_MISS_PENALTY) -> float:
    """Attribute-space fusion error against the scene's true state.

    Mean over ground-truth voxels of the squared position/color/log-scale
    error plus a sign-invariant quaternion term for covered voxels, and
    ``miss_penalty`` for uncovered ones.  Frames whose timestamp equals
    ``tau_star`` are withheld from the default context.
    """
    ctx = build_objective_context(scene, tau_star, context_frames, rho,
                                  params_like=params, miss_penalty=miss_penalty)
    return objective_value(params, ctx)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_diff_grad(objective: Callable[[FusionParams], float],
                     params: FusionParams, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``objective`` over every parameter."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValidationError("eps must lie in [1e-6, 1e-3]")
    v0 = params.to_vector()
    grad = np.empty_like(v0)
    for i in range(v0.size):
        vp = v0.copy()
        vp[i] = v0[i] + eps
        fp = objective(params.from_vector(vp))
        vp[i] = v0[i] - eps
        fm = objective(params.from_vector(vp))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteObjectiveError(f"objective non-finite at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, peak_lr: float,
              warmup_frac: float = WARMUP_FRACTION) -> float:
    """Linear warmup followed by cosine annealing to zero."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * (step - warmup) / span))


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n))

    def step(self, theta: np.ndarray, grad: np.ndarray, lr: float,
             decay_mask: np.ndarray, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8, weight_decay: float = 1e-4) -> np.ndarray:
        self.t += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad**2
        m_hat = self.m / (1.0 - beta1**self.t)
        v_hat = self.v / (1.0 - beta2**self.t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        update = update + weight_decay * np.where(decay_mask, theta, 0.0)
        return theta - lr * update


def prepare_training_contexts(scene, rho: Optional[float],
                              params_like: FusionParams,
                              miss_penalty: float = DEFAULT_MISS_PENALTY):
    """One ObjectiveContext per (query frame, dropped?) combination."""
    frames = list(scene.frames)
    contexts = {}
    for t, frame in enumerate(frames):
        tau = float(frame.timestamp)
        contexts[(t, False)] = build_objective_context(
            scene, tau, context_frames=frames, rho=rho,
            params_like=params_like, miss_penalty=miss_penalty)
        contexts[(t, True)] = build_objective_context(
            scene, tau, context_frames=[f for i, f in enumerate(frames) if i != t],
            rho=rho, params_like=params_like, miss_penalty=miss_penalty)
    return contexts


def train_fusion(scene, params0: FusionParams, steps: int, lr: float,
                 rng_seed: int, p_drop: float = DEFAULT_P_DROP,
                 rho: Optional[float] = None, weight_decay: float = 1e-4,
                 miss_penalty: float = DEFAULT_MISS_PENALTY,
                 ) -> Tuple[FusionParams, np.ndarray]:
    """AdamW with warmup plus cosine annealing on the fusion objective.

    Each step picks a random query frame, withholds it from the context
    with probability ``p_drop``, and supervises against the scene's true
    state at that frame's timestamp.  Deterministic for fixed seeds.
    """
    if steps < 1:
        raise BadConfigError("steps must be >= 1")
    contexts = prepare_training_contexts(scene, rho, params0, miss_penalty)
    n_frames = len(scene.frames)
    rng = np.random.default_rng(rng_seed)
    theta = params0.to_vector()
    state = AdamWState.zeros(theta.size)
    decay_mask = params0.decay_mask()
    curve = np.empty(steps)
    params = params0
    for step in range(steps):
        t = int(rng.integers(n_frames))
        dropped = bool(rng.random() < p_drop)
        loss, grad = objective_value_and_grad(params, contexts[(t, dropped)])
        if not np.isfinite(loss):
            raise DivergedLossError(f"loss became non-finite at step {step}")
        curve[step] = loss
        theta = state.step(theta, grad, cosine_lr(step, steps, lr),
                           decay_mask, weight_decay=weight_decay)
        theta[-1] = max(theta[-1], BETA_FLOOR)  # clamp the temperature
        params = params0.from_vector(theta)
    return params, curve


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def heldout_objective(params: FusionParams, scene, rho: Optional[float] = None,
                      miss_penalty: float = DEFAULT_MISS_PENALTY) -> float:
    """Mean objective over frame times with the query frame withheld."""
    values = []
    frames = list(scene.frames)
    for t, frame in enumerate(frames):
        ctx = build_objective_context(
            scene, float(frame.timestamp),
            context_frames=[f for i, f in enumerate(frames) if i != t],
            rho=rho, params_like=params, miss_penalty=miss_penalty)
        values.append(objective_value(params, ctx))
    return float(np.mean(values))


def selection_accuracy(params: FusionParams, scene, n_queries: int = 100,
                       rho: Optional[float] = None) -> float:
    """Fraction of (query, voxel) decisions whose top-weight member comes
    from the temporally nearest context frame.  Uses the full context."""
    space = build_canonical_space(scene.frames, params.feature_dim)
    prep = prepare_space(space.cloud, float(scene.rho if rho is None else rho),
                         params.bands)
    times = np.asarray(scene.frame_times)
    hits = 0
    total = 0
    for tau in np.linspace(0.0, 1.0, n_queries):
        result = aggregate(space, float(tau), params, prepared=prep)
        nearest = int(np.argmin(np.abs(times - tau)))
        offset = 0
        for w in result.weights:
            member = offset + int(np.argmax(w))
            hits += int(prep.source_frame[member] == nearest)
            total += 1
            offset += w.size
    return hits / total


class FrameSupervisedScene:
    """Scene adapter whose truth at any time is the nearest frame's own state.

    Lets training run on plain frame sequences (no generator ground truth):
    the decoded Gaussians of the temporally nearest frame serve as the
    supervision target, matching the piecewise temporal profile.
    """

    def __init__(self, frames: Sequence[FrameObservation], rho: float,
                 feature_dim: int = 16):
        self.frames = tuple(frames)
        if not self.frames:
            raise BadConfigError("no frames")
        self.rho = float(rho)
        self.frame_times = np.array([f.timestamp for f in self.frames])
        from .lift import decode_gaussian_map
        self._clouds = tuple(decode_gaussian_map(f, i, feature_dim)
                             for i, f in enumerate(self.frames))

    def true_state(self, tau: float) -> GaussianCloud:
        nearest = int(np.argmin(np.abs(self.frame_times - tau)))
        return self._clouds[nearest]
