"""A small seeded decoder-only transformer that emits per-layer KV pairs.

Pre-norm blocks (RMSNorm), multi-head causal attention with rotary positions,
and a two-layer GELU feed-forward. Inputs are embedding vectors; there is no
vocabulary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidConfiguration
from .kv_cache import KvCache
from .tensor_core import apply_rope, as_matrix, attention_weights

# rows of queries per attention call; bounds the logits matrix on long bulk passes
QUERY_CHUNK = 1024
RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    rope_base: float = 10000.0
    seed: int = 0
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if min(self.layers, self.heads, self.d_model) < 1:
            raise InvalidConfiguration("model.layers, model.heads and model.d_model must be >= 1")
        if self.d_model % self.heads:
            raise InvalidConfiguration("model.d_model must be divisible by model.heads")
        if self.d_head % 2:
            raise InvalidConfiguration("model head dimension must be even for rotary encoding")
        if self.mlp_ratio <= 0 or self.rope_base <= 0:
            raise InvalidConfiguration("model.mlp_ratio and model.rope_base must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def d_ff(self) -> int:
        return max(1, int(round(self.mlp_ratio * self.d_model)))


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    attn_gain: np.ndarray
    mlp_gain: np.ndarray

    def arrays(self):
        return (self.wq, self.wk, self.wv, self.wo, self.w1, self.w2, self.attn_gain, self.mlp_gain)


@dataclass
class ModelState:
    config: ModelConfig
    layers: list[LayerWeights] = field(default_factory=list)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for lw in self.layers:
            for a in lw.arrays():
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def new_cache(self) -> KvCache:
        c = self.config
        return KvCache(c.layers, c.heads, c.d_head)


def init_model(config: ModelConfig) -> ModelState:
    rng = np.random.default_rng(config.seed)
    D, F = config.d_model, config.d_ff
    layers = []
    for _ in range(config.layers):
        proj = [rng.normal(0.0, D ** -0.5, (D, D)) for _ in range(4)]
        layers.append(
            LayerWeights(
                *proj,
                w1=rng.normal(0.0, D ** -0.5, (D, F)),
                w2=rng.normal(0.0, F ** -0.5, (F, D)),
                attn_gain=np.ones(D),
                mlp_gain=np.ones(D),
            )
        )
    return ModelState(config, layers)


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) * gain


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def project_qkv(model: ModelState, layer: int, x: np.ndarray, positions: np.ndarray):
    """Rotated per-head queries and keys, plus values, for residual stream ``x``.

    Each is ``(heads, n, d_head)``.
    """
    cfg, lw = model.config, model.layers[layer]
    h = rms_norm(x, lw.attn_gain)
    q, k, v = (split_heads(h @ w, cfg.heads) for w in (lw.wq, lw.wk, lw.wv))
    q = np.stack([apply_rope(qh, positions, cfg.rope_base) for qh in q])
    k = np.stack([apply_rope(kh, positions, cfg.rope_base) for kh in k])
    return q, k, v


@dataclass
class ForwardTrace:
    """Optional side outputs of a forward pass, filled per layer."""

    queries: list[np.ndarray] = field(default_factory=list)
    weights: list[list[np.ndarray]] = field(default_factory=list)
    keep_weights: bool = False


def _forward(model, x, cache, positions, kinds=None, structure_ids=None, protected=None, trace=None):
    cfg = model.config
    x = as_matrix(x, "embeddings")
    if x.shape[1] != cfg.d_model:
        raise InvalidArgument(f"embedding width {x.shape[1]} != d_model {cfg.d_model}")
    b = x.shape[0]
    for layer, lw in enumerate(model.layers):
        q, k, v = project_qkv(model, layer, x, positions)
        cache.append_block(layer, k, v, positions, kinds, structure_ids, protected)
        heads_out, head_weights = [], []
        for hd in range(cfg.heads):
            st = cache.store(layer, hd)
            offset = len(st) - b
            rows, ws = [], []
            for r0 in range(0, b, QUERY_CHUNK):
                r1 = min(r0 + QUERY_CHUNK, b)
                visible = offset + r1
                w = attention_weights(q[hd, r0:r1], st.keys[:visible], causal_offset=offset + r0)
                rows.append(w @ st.values[:visible])
                if trace is not None and trace.keep_weights:
                    ws.append(np.pad(w, ((0, 0), (0, len(st) - visible))))
            heads_out.append(np.concatenate(rows))
            if ws:
                head_weights.append(np.concatenate(ws))
        attn = np.concatenate(heads_out, axis=1) @ lw.wo
        x = x + attn
        x = x + gelu(rms_norm(x, lw.mlp_gain) @ lw.w1) @ lw.w2
        if trace is not None:
            trace.queries.append(q)
            if trace.keep_weights:
                trace.weights.append(head_weights)
    return x


def forward_prefill_block(model, block_embeddings, cache: KvCache, start_position: int,
                          kinds=None, structure_ids=None, protected=None, trace=None) -> np.ndarray:
    """Run one prefill block, appending its KV to ``cache`` layer by layer.

    Block queries attend to whatever the cache currently holds plus the causal
    prefix of the block itself.
    """
    expected = cache.next_position
    if start_position != expected:
        raise InvalidArgument(f"start_position {start_position} != next uncached position {expected}")
    x = as_matrix(block_embeddings, "block_embeddings")
    positions = np.arange(start_position, start_position + x.shape[0])
    out = _forward(model, x, cache, positions, kinds, structure_ids, protected, trace)
    cache.next_position = start_position + x.shape[0]
    return out


def decode_step(model, embedding, cache: KvCache, position: int, trace=None) -> np.ndarray:
    """One-token forward against the (possibly compressed) cache."""
    last = max((int(st.positions[-1]) for row in cache.stores for st in row if len(st)), default=-1)
    if position <= last:
        raise InvalidArgument(f"decode position {position} must follow last cached position {last}")
    x = as_matrix(embedding, "embedding")
    if x.shape[0] != 1:
        raise InvalidArgument("decode_step takes a single embedding vector")
    out = _forward(model, x, cache, np.array([position]), trace=trace)
    cache.next_position = position + 1
    return out[0]


def forward_bulk(model, embeddings) -> tuple[np.ndarray, KvCache]:
    """Plain causal forward over the whole input with a full cache."""
    cache = model.new_cache()
    hidden = forward_prefill_block(model, embeddings, cache, 0)
    return hidden, cache
