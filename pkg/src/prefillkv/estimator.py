"""scikit-learn style wrapper around the prefill engine.

``fit`` encodes a prefix (rows of ``X`` are token embeddings) into a
compressed KV cache; ``transform`` decodes new embeddings against a copy of
that cache and returns their hidden states.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InvalidArgument
from .eviction import EvictionPolicy, plan_budgets
from .prefill_engine import PrefillMode, run_prefill
from .toy_model import ModelConfig, decode_step, init_model
from .vision_layout import TokenLayout


class BlockPrefillCompressor(TransformerMixin, BaseEstimator):
    """Memory-bounded prefill of an embedding sequence.

    Parameters
    ----------
    mode : {"hybrid", "blockwise", "bulk"}
    block_size : int
        Tokens per prefill block.
    budget : int
        Entries each (layer, head) may keep after a block.
    policy : {"snapkv", "keydiff", "random"}
    align : {"none", "structure"}
    n_layers, n_heads : int
        Toy decoder shape; ``d_model`` is taken from ``X`` at fit time.
    random_state : int
        Seeds model weights and the random-eviction baseline.

    Attributes
    ----------
    result_ : PrefillResult
    cache_ : KvCache
    layout_ : TokenLayout
    model_ : ModelState
    """

    def __init__(self, mode="hybrid", block_size=256, budget=1024, policy="snapkv", align="none",
                 proxy_source="prompt_first", protect_prompt=True, protect_recent=True,
                 n_layers=2, n_heads=2, rope_base=10000.0, precision_bytes=2, random_state=0):
        self.mode = mode
        self.block_size = block_size
        self.budget = budget
        self.policy = policy
        self.align = align
        self.proxy_source = proxy_source
        self.protect_prompt = protect_prompt
        self.protect_recent = protect_recent
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.rope_base = rope_base
        self.precision_bytes = precision_bytes
        self.random_state = random_state

    def fit(self, X, y=None, layout: TokenLayout | None = None, prompt_len: int = 1):
        """Prefill ``X``.

        Without ``layout`` the first ``prompt_len`` rows are the text prompt and
        the rest a single text span.
        """
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if layout is None:
            spans = [("text", prompt_len)] + ([("text", len(X) - prompt_len)] if len(X) > prompt_len else [])
            layout = TokenLayout.from_spans(spans, prompt_index=0)
        if layout.total_len != len(X):
            raise InvalidArgument(f"layout covers {layout.total_len} tokens, X has {len(X)} rows")
        self.model_ = init_model(ModelConfig(self.n_layers, self.n_heads, X.shape[1], self.rope_base,
                                             self.random_state))
        self.layout_ = layout
        mode = PrefillMode(self.mode, self.block_size, self.align)
        kw = {"precision_bytes": self.precision_bytes}
        plan = policy = None
        if self.mode != "bulk":
            plan = plan_budgets("static", self.n_layers, self.budget)
            policy = EvictionPolicy(self.policy, self.random_state)
            kw.update(proxy_source=self.proxy_source, protect_prompt=self.protect_prompt,
                      protect_recent=self.protect_recent)
        self.result_ = run_prefill(mode, self.model_, layout, X, policy, plan, **kw)
        self.cache_ = self.result_.cache
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        """Hidden states of ``X`` decoded token by token after the fitted prefix."""
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgument(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        cache = self.cache_.copy()
        return np.stack([decode_step(self.model_, x, cache, cache.next_position) for x in X])

    def retained_positions(self):
        check_is_fitted(self, "result_")
        return self.result_.retained_positions

    @property
    def global_peak_bytes_(self) -> int:
        check_is_fitted(self, "result_")
        return self.result_.trace.global_peak()
