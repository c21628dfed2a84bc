"""Voxel-grounded temporal fusion of the canonical Gaussian space.

Primitives are grouped into a uniform voxel grid, scored by a
query-conditioned attention MLP, normalized with a temperature softmax
restricted to each voxel, and fused with attribute-specific estimators:
weighted means for position and color, a max-blended weighted mean for
opacity, a log-space geometric mean for scale, and a hemisphere-aligned
normalized mean for rotation.  Every non-empty voxel emits exactly one
fused primitive regardless of the query time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import CanonicalSpace, FusionParams, GaussianCloud, GaussianPrimitive, VoxelPartition
from .encoding import attribute_features, encode_time
from .errors import (
    DegenerateQuaternionSumError,
    DimensionMismatchError,
    EmptyInputError,
    EmptyVoxelError,
    NonPositiveRhoError,
    QueryFrameAbsentError,
    ValidationError,
)

# Street-scale default cell side; desk-scale scenes pass their own value.
DEFAULT_VOXEL_SIZE = 0.002


def _round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer with halves away from zero."""
    return np.trunc(x + np.copysign(0.5, x))


def voxel_ids(mu: np.ndarray, rho: float) -> np.ndarray:
    """Integer cell coordinate of each center: round(mu / rho) per component."""
    if not np.isfinite(rho) or rho <= 0.0:
        raise NonPositiveRhoError(f"voxel side must be positive, got {rho}")
    return _round_half_away(np.asarray(mu, dtype=np.float64) / rho).astype(np.int64)


def voxelize(space: Union[CanonicalSpace, GaussianCloud], rho: float) -> VoxelPartition:
    """Group primitives by quantized center into a sparse partition."""
    cloud = space.cloud if isinstance(space, CanonicalSpace) else space
    ids = voxel_ids(cloud.mu, rho)
    order, starts, counts, uniq = _group_by_cell(ids)
    cells = {}
    for m in range(uniq.shape[0]):
        key = (int(uniq[m, 0]), int(uniq[m, 1]), int(uniq[m, 2]))
        cells[key] = order[starts[m]:starts[m] + counts[m]].copy()
    return VoxelPartition(rho=rho, cells=cells, n_primitives=len(cloud))


def _group_by_cell(ids: np.ndarray,
                   tiebreak: Optional[Sequence[np.ndarray]] = None):
    """Sort primitives into contiguous voxel segments.

    Ordering is lexicographic over the cell id, with an optional
    content-based tie-break inside each cell so results do not depend on
    input order.  Returns (order, starts, counts, unique_ids).
    """
    keys = [ids[:, 2], ids[:, 1], ids[:, 0]]
    if tiebreak is not None:
        keys = list(tiebreak)[::-1] + keys
    order = np.lexsort(tuple(keys))
    sorted_ids = ids[order]
    if sorted_ids.shape[0] == 0:
        return order, np.zeros(0, np.int64), np.zeros(0, np.int64), sorted_ids
    change = np.any(np.diff(sorted_ids, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.flatnonzero(change) + 1]).astype(np.int64)
    counts = np.diff(np.concatenate([starts, [sorted_ids.shape[0]]])).astype(np.int64)
    return order, starts, counts, sorted_ids[starts]


@dataclass(frozen=True)
class PreparedSpace:
    """Canonical-sorted view of a space, ready for repeated fusion passes.

    Members are sorted by voxel id and, inside each voxel, by
    (timestamp, source frame, position) so that fusion output is invariant
    to the order primitives were supplied in.
    """

    mu: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    timestamp: np.ndarray
    feature: np.ndarray
    source_frame: np.ndarray
    gamma: np.ndarray        # (N, 2 * bands) time encoding of member timestamps
    starts: np.ndarray       # (M,) segment starts
    counts: np.ndarray       # (M,)
    ids: np.ndarray          # (M, 3) voxel coordinates, lexicographically sorted
    order: np.ndarray        # (N,) original index of each sorted member

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.starts.shape[0]

    def repeat_per_member(self, per_voxel: np.ndarray) -> np.ndarray:
        return np.repeat(per_voxel, self.counts, axis=0)


def prepare_space(cloud: GaussianCloud, rho: float, bands: int) -> PreparedSpace:
    if len(cloud) == 0:
        raise EmptyInputError("cannot fuse an empty canonical space")
    ids = voxel_ids(cloud.mu, rho)
    tiebreak = (cloud.timestamp, cloud.source_frame.astype(np.float64),
                cloud.mu[:, 0], cloud.mu[:, 1], cloud.mu[:, 2])
    order, starts, counts, uniq = _group_by_cell(ids, tiebreak)
    return PreparedSpace(
        mu=cloud.mu[order], color=cloud.color[order], opacity=cloud.opacity[order],
        log_scale=np.log(cloud.scale[order]), rotation=cloud.rotation[order],
        timestamp=cloud.timestamp[order], feature=cloud.feature[order],
        source_frame=cloud.source_frame[order],
        gamma=encode_time(cloud.timestamp[order], bands),
        starts=starts, counts=counts, ids=uniq, order=order)


# ---------------------------------------------------------------------------
# Attention forward pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionForward:
    """Intermediate activations of one scoring pass (kept for backprop)."""

    gamma_star: np.ndarray   # (2L,)
    z1_star: np.ndarray      # (H,)
    h_star: np.ndarray       # (H,)
    z1: np.ndarray           # (N, H) tanh inside the time MLP
    h: np.ndarray            # (N, H) member context embeddings
    v1: np.ndarray           # (N, H) tanh inside the attention MLP
    logits: np.ndarray       # (N,)


def _time_mlp(gamma: np.ndarray, params: FusionParams):
    z1 = np.tanh(gamma @ params.w_time1.T + params.b_time1)
    return z1, z1 @ params.w_time2.T + params.b_time2


def _forward(feature: np.ndarray, gamma: np.ndarray, tau_star: float,
             params: FusionParams) -> FusionForward:
    if feature.shape[1] != params.feature_dim:
        raise DimensionMismatchError(
            f"feature dim {feature.shape[1]} != params feature dim {params.feature_dim}")
    hf = feature @ params.w_feat.T + params.b_feat
    z1, ht = _time_mlp(gamma, params)
    h = hf + ht
    gamma_star = encode_time(np.float64(tau_star), params.bands)
    z1_star, h_star = _time_mlp(gamma_star[None, :], params)
    z1_star, h_star = z1_star[0], h_star[0]
    # attention on [h_i ; h*] without materializing the concatenation
    hidden = params.hidden_dim
    u1 = h @ params.w_attn1[:, :hidden].T \
        + params.w_attn1[:, hidden:] @ h_star + params.b_attn1
    v1 = np.tanh(u1)
    logits = v1 @ params.w_attn2 + params.b_attn2
    return FusionForward(gamma_star=gamma_star, z1_star=z1_star, h_star=h_star,
                         z1=z1, h=h, v1=v1, logits=logits)


def context_embedding(g: GaussianPrimitive, params: FusionParams) -> np.ndarray:
    """Latent context vector of one primitive: phi_f(feature) + phi_t(gamma(t))."""
    feature = np.asarray(g.feature, dtype=np.float64)
    if feature.shape != (params.feature_dim,):
        raise DimensionMismatchError(
            f"feature shape {feature.shape} incompatible with params ({params.feature_dim},)")
    hf = params.w_feat @ feature + params.b_feat
    _, ht = _time_mlp(encode_time(np.float64(g.timestamp), params.bands)[None, :], params)
    return hf + ht[0]


def query_embedding(tau_star: float, params: FusionParams) -> np.ndarray:
    """Latent query vector: phi_t(gamma(tau_star))."""
    _, h = _time_mlp(encode_time(np.float64(tau_star), params.bands)[None, :], params)
    return h[0]


def relevance_logit(h_i: np.ndarray, h_star: np.ndarray, params: FusionParams) -> float:
    """Scalar relevance of one member embedding to the query embedding."""
    cat = np.concatenate([np.asarray(h_i, dtype=np.float64),
                          np.asarray(h_star, dtype=np.float64)])
    if cat.shape != (2 * params.hidden_dim,):
        raise DimensionMismatchError("embedding size incompatible with attention weights")
    v1 = np.tanh(params.w_attn1 @ cat + params.b_attn1)
    return float(v1 @ params.w_attn2 + params.b_attn2)


# ---------------------------------------------------------------------------
# Softmax and fusion
# ---------------------------------------------------------------------------

def intra_voxel_weights(logits: Sequence[float], beta: float) -> np.ndarray:
    """Temperature softmax over one voxel's logits, max-subtracted for stability."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise EmptyVoxelError("softmax over an empty voxel")
    if not np.isfinite(beta) or beta <= 0.0:
        raise ValidationError(f"beta must be positive, got {beta}")
    z = logits / beta
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def _segment_softmax(logits: np.ndarray, beta: float, starts: np.ndarray,
                     counts: np.ndarray) -> np.ndarray:
    z = logits / beta
    z = z - np.repeat(np.maximum.reduceat(z, starts), counts)
    e = np.exp(z)
    return e / np.repeat(np.add.reduceat(e, starts), counts)


def _fuse_segments(mu, color, opacity, log_scale, rotation, w, starts, lambda_mix):
    """Attribute-specific fusion of contiguous segments.

    Rotation rows are sign-aligned to each segment's first member before
    the weighted mean; callers control the first member via their ordering.
    """
    wc = w[:, None]
    mu_hat = np.add.reduceat(wc * mu, starts, axis=0)
    c_hat = np.add.reduceat(wc * color, starts, axis=0)
    a_mean = np.add.reduceat(w * opacity, starts)
    a_max = np.maximum.reduceat(opacity, starts)
    a_hat = lambda_mix * a_max + (1.0 - lambda_mix) * a_mean
    s_hat = np.exp(np.add.reduceat(wc * log_scale, starts, axis=0))
    counts = np.diff(np.concatenate([starts, [w.shape[0]]]))
    ref = np.repeat(rotation[starts], counts, axis=0)
    sign = np.where(np.sum(rotation * ref, axis=1) < 0.0, -1.0, 1.0)
    q_sum = np.add.reduceat(wc * (sign[:, None] * rotation), starts, axis=0)
    norms = np.linalg.norm(q_sum, axis=1)
    if np.any(norms < 1e-8):
        raise DegenerateQuaternionSumError("weighted quaternion sum collapsed to zero")
    q_hat = q_sum / norms[:, None]
    return mu_hat, c_hat, a_hat, s_hat, q_hat


def fuse_voxel(cell: Union[Sequence[GaussianPrimitive], GaussianCloud],
               w: Sequence[float], lambda_mix: float,
               tau_star: float) -> GaussianPrimitive:
    """Fuse one voxel's members under the given simplex weights."""
    cloud = cell if isinstance(cell, GaussianCloud) else GaussianCloud.from_primitives(list(cell))
    w = np.asarray(w, dtype=np.float64)
    if len(cloud) == 0 or w.shape != (len(cloud),):
        raise DimensionMismatchError("cell and weights must be equal-length and non-empty")
    if abs(float(np.sum(w)) - 1.0) > 1e-6 or np.any(w < 0.0):
        raise ValidationError("weights must be non-negative and sum to 1")
    starts = np.array([0], dtype=np.int64)
    mu, c, a, s, q = _fuse_segments(cloud.mu, cloud.color, cloud.opacity,
                                    np.log(cloud.scale), cloud.rotation, w,
                                    starts, lambda_mix)
    return GaussianPrimitive(
        mu=mu[0], color=c[0], opacity=float(a[0]), scale=s[0], rotation=q[0],
        timestamp=float(tau_star),
        feature=attribute_features(c[0][None], np.array([a[0]]), s[0][None],
                                   cloud.feature_dim)[0],
        source_frame=-1)


@dataclass(frozen=True)
class VoxelFusionResult:
    """One fused primitive per non-empty voxel, plus the attention weights."""

    fused: GaussianCloud
    weights: Tuple[np.ndarray, ...]   # per-voxel simplex weights over members
    voxel_ids: np.ndarray             # (M, 3), aligned with ``fused``

    def __post_init__(self):
        ids = np.array(self.voxel_ids, dtype=np.int64)
        ids.setflags(write=False)
        object.__setattr__(self, "voxel_ids", ids)
        object.__setattr__(self, "weights", tuple(np.asarray(w) for w in self.weights))
        if len(self.fused) != ids.shape[0] or len(self.weights) != ids.shape[0]:
            raise DimensionMismatchError("fused, weights and voxel_ids must align")
        for w in self.weights:
            if w.size == 0 or np.any(w < 0.0) or abs(float(np.sum(w)) - 1.0) > 1e-6:
                raise ValidationError("per-voxel weights must be a probability simplex")

    def __len__(self) -> int:
        return len(self.fused)


def _fuse_prepared(prep: PreparedSpace, w: np.ndarray, lambda_mix: float,
                   tau_star: float) -> GaussianCloud:
    mu, c, a, s, q = _fuse_segments(prep.mu, prep.color, prep.opacity,
                                    prep.log_scale, prep.rotation, w,
                                    prep.starts, lambda_mix)
    return GaussianCloud.create(
        mu=mu, color=c, opacity=a, scale=s, rotation=q,
        timestamp=np.full(mu.shape[0], float(tau_star)),
        feature=attribute_features(c, a, s, prep.feature.shape[1]),
        source_frame=np.full(mu.shape[0], -1, dtype=np.int64),
        validate=False)


def aggregate(space: Union[CanonicalSpace, GaussianCloud], tau_star: float,
              params: FusionParams, rho: float = DEFAULT_VOXEL_SIZE,
              prepared: Optional[PreparedSpace] = None) -> VoxelFusionResult:
    """Fuse the whole space at a query time: one primitive per non-empty voxel.

    The voxel count — and therefore the output size — depends only on the
    geometry and ``rho``, never on ``tau_star``.  Pass ``prepared`` to reuse
    the grouping across repeated query times.
    """
    if prepared is None:
        cloud = space.cloud if isinstance(space, CanonicalSpace) else space
        prepared = prepare_space(cloud, rho, params.bands)
    fwd = _forward(prepared.feature, prepared.gamma, tau_star, params)
    w = _segment_softmax(fwd.logits, params.beta, prepared.starts, prepared.counts)
    fused = _fuse_prepared(prepared, w, params.lambda_mix, tau_star)
    return VoxelFusionResult(
        fused=fused,
        weights=tuple(np.split(w, prepared.starts[1:])),
        voxel_ids=prepared.ids)


# ---------------------------------------------------------------------------
# Temporal augmentation
# ---------------------------------------------------------------------------

def dropout_query_frame(frames: Sequence, tau_star: float, p_drop: float,
                        rng_seed) -> Tuple[list, object]:
    """Withhold the query-time frame from the context with probability p_drop.

    Returns (context frames, supervision target).  Deterministic for a fixed
    seed; the target frame is always returned even when kept in the context.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise ValidationError("need at least two frames for query-frame dropout")
    matches = [i for i, f in enumerate(frames) if abs(f.timestamp - tau_star) < 1e-9]
    if len(matches) != 1:
        raise QueryFrameAbsentError(
            f"expected exactly one frame at tau={tau_star}, found {len(matches)}")
    target = frames[matches[0]]
    rng = np.random.default_rng(rng_seed)
    if rng.random() < p_drop:
        context = [f for i, f in enumerate(frames) if i != matches[0]]
    else:
        context = frames
    return context, target
