"""Sinusoidal encodings for timestamps and Gaussian attributes."""

from __future__ import annotations

import numpy as np

from .core import DEFAULT_FEATURE_DIM
from .errors import ValidationError


def encode_time(tau, bands: int) -> np.ndarray:
    """Multi-frequency sinusoidal encoding of a normalized timestamp.

    Returns [sin(2^0 pi t), cos(2^0 pi t), ..., sin(2^(L-1) pi t),
    cos(2^(L-1) pi t)] — shape (..., 2 * bands).
    """
    if bands < 1:
        raise ValidationError("bands must be >= 1")
    tau = np.asarray(tau, dtype=np.float64)
    freqs = (2.0 ** np.arange(bands)) * np.pi          # (L,)
    angles = tau[..., None] * freqs                    # (..., L)
    out = np.empty(tau.shape + (2 * bands,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def attribute_features(color: np.ndarray, opacity: np.ndarray, scale: np.ndarray,
                       dim: int = DEFAULT_FEATURE_DIM) -> np.ndarray:
    """Fixed sinusoidal encoding of (color, opacity, log-scale) per primitive.

    The 7 raw attributes are expanded band by band as (sin, cos) pairs per
    attribute and the sequence is truncated or zero-padded to ``dim``.
    Stands in for a learned per-primitive latent.
    """
    color = np.atleast_2d(np.asarray(color, dtype=np.float64))
    opacity = np.atleast_1d(np.asarray(opacity, dtype=np.float64))
    scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    attrs = np.concatenate([color, opacity[:, None], np.log(scale)], axis=1)  # (N, 7)
    n, k = attrs.shape
    n_bands = -(-dim // (2 * k))  # ceil
    out = np.empty((n, n_bands * 2 * k), dtype=np.float64)
    for b in range(n_bands):
        angles = (2.0 ** b) * np.pi * attrs
        out[:, b * 2 * k + 0:(b + 1) * 2 * k:2] = np.sin(angles)
        out[:, b * 2 * k + 1:(b + 1) * 2 * k:2] = np.cos(angles)
    if out.shape[1] < dim:
        out = np.pad(out, ((0, 0), (0, dim - out.shape[1])))
    return out[:, :dim]
