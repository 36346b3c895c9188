"""Dense kernels used by the toy decoder and the eviction scorers.

Matrices are plain 2-D ``numpy`` arrays in float64. All functions are pure.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument

DTYPE = np.float64
# Stand-in for -inf on masked logits; keeps max-subtraction finite.
MASK_VALUE = np.finfo(DTYPE).min


def as_matrix(x, name: str = "x") -> np.ndarray:
    m = np.asarray(x, dtype=DTYPE)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise InvalidArgument(f"{name}: expected a 2-D matrix, got shape {m.shape}")
    return m


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    m = as_matrix(m, "m")
    if m.size == 0:
        raise InvalidArgument("softmax_rows: empty matrix")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def causal_mask(nq: int, nk: int, causal_offset: int | None) -> np.ndarray | None:
    """Boolean ``nq x nk`` matrix, True where query ``i`` may see key ``j``."""
    if causal_offset is None:
        return None
    return np.arange(nk)[None, :] <= causal_offset + np.arange(nq)[:, None]


def attention_weights(Q, K, causal_offset: int | None = None) -> np.ndarray:
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    if Q.shape[1] != K.shape[1]:
        raise InvalidArgument(f"query dim {Q.shape[1]} != key dim {K.shape[1]}")
    if K.shape[0] == 0:
        raise InvalidArgument("attention over an empty key set")
    logits = (Q @ K.T) / np.sqrt(Q.shape[1])
    allowed = causal_mask(Q.shape[0], K.shape[0], causal_offset)
    if allowed is None:
        return softmax_rows(logits)
    if not allowed.any(axis=1).all():
        raise InvalidArgument("causal_offset leaves a query row with no visible key")
    w = softmax_rows(np.where(allowed, logits, MASK_VALUE))
    # exp(MASK_VALUE - rowmax) underflows to exactly zero; make that explicit
    w[~allowed] = 0.0
    return w


def scaled_dot_attention(Q, K, V, causal_offset: int | None = None) -> np.ndarray:
    """softmax(Q K^T / sqrt(d) + mask) V.

    With ``causal_offset`` set, query ``i`` sees keys ``0 .. causal_offset + i``.
    """
    V = as_matrix(V, "V")
    K = as_matrix(K, "K")
    if V.shape[0] != K.shape[0]:
        raise InvalidArgument(f"{K.shape[0]} keys but {V.shape[0]} values")
    return attention_weights(Q, K, causal_offset) @ V


def rope_angles(positions, dim: int, base: float) -> np.ndarray:
    positions = np.asarray(positions, dtype=DTYPE)
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=DTYPE) / dim)
    return positions[:, None] * inv_freq[None, :]


def apply_rope(x, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate interleaved coordinate pairs ``(2i, 2i+1)`` by ``pos / base**(2i/d)``."""
    x = as_matrix(x, "x")
    n, d = x.shape
    if d % 2:
        raise InvalidArgument(f"apply_rope needs an even dimension, got {d}")
    positions = np.asarray(positions)
    if positions.shape != (n,):
        raise InvalidArgument(f"expected {n} positions, got shape {positions.shape}")
    ang = rope_angles(positions, d, base)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out
