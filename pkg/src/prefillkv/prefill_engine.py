"""Bulk, block-wise and hybrid prefill drivers.

Block-wise prefill encodes the input one block at a time; after each block is
appended, any (layer, head) holding more entries than its budget is cut back
to the budget using the configured eviction policy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, InvalidConfiguration
from .eviction import BudgetPlan, EvictionPolicy, select_retained
from .kv_cache import KvCache, MemoryTrace
from .toy_model import ForwardTrace, ModelState, forward_prefill_block
from .vision_layout import DEFAULT_BLOCK_SIZE, Block, TokenLayout, partition_blocks

MODES = ("bulk", "blockwise", "hybrid")
PROXY_SOURCES = ("prompt_first", "block_local")


@dataclass(frozen=True)
class PrefillMode:
    kind: str = "hybrid"
    block_size: int = DEFAULT_BLOCK_SIZE
    align: str = "none"

    def __post_init__(self):
        if self.kind not in MODES:
            raise InvalidConfiguration(f"prefill.mode must be one of {MODES}, got {self.kind!r}")
        if self.block_size < 1:
            raise InvalidConfiguration("prefill.block_size must be >= 1")
        if self.align not in ("none", "structure"):
            raise InvalidConfiguration(f"prefill.align must be 'none' or 'structure', got {self.align!r}")


@dataclass(frozen=True)
class ProxySpec:
    mode: str
    rows: int | None


def proxy_query_source(layout: TokenLayout, mode: str = "prompt_first") -> ProxySpec:
    """Where query-aware eviction takes its proxy queries from.

    ``prompt_first`` reuses the prompt's query states, which requires the
    prompt to be encoded before any vision block. ``block_local`` scores with
    the current block's own queries.
    """
    if mode not in PROXY_SOURCES:
        raise InvalidConfiguration(f"proxy_source must be one of {PROXY_SOURCES}, got {mode!r}")
    if mode == "block_local":
        return ProxySpec(mode, None)
    if not layout.prompt_first:
        raise InvalidConfiguration("proxy_source=prompt_first needs the prompt at the start of the layout")
    return ProxySpec(mode, layout.prompt.length)


@dataclass
class PrefillResult:
    cache: KvCache
    trace: MemoryTrace
    hidden: np.ndarray
    schedule: list[Block]
    ttft_wall_s: float
    attention_flops: int
    projection_flops: int
    evictions: int = 0
    proxy_queries: list[np.ndarray] | None = None
    retained_positions: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def ttft_flops(self) -> int:
        return self.attention_flops + self.projection_flops

    @property
    def forward_passes(self) -> int:
        return len(self.schedule)

    @property
    def ttft_proxy(self) -> tuple[float, int]:
        return self.ttft_wall_s, self.ttft_flops


def _check_inputs(model: ModelState, layout: TokenLayout, embeddings) -> np.ndarray:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != layout.total_len:
        raise InvalidArgument(f"embeddings shape {x.shape} does not match layout length {layout.total_len}")
    if x.shape[1] != model.config.d_model:
        raise InvalidArgument(f"embedding width {x.shape[1]} != d_model {model.config.d_model}")
    return x


def projection_flops(model: ModelState, tokens: int) -> int:
    c = model.config
    per_token = 2 * (4 * c.d_model * c.d_model + 2 * c.d_model * c.d_ff)
    return tokens * c.layers * per_token


class _Runner:
    """State of one prefill run over a fixed block schedule."""

    def __init__(self, model, layout, x, schedule, policy, plan, proxy, protect_prompt, protect_recent,
                 precision_bytes):
        cfg = model.config
        self.model, self.layout, self.x, self.schedule = model, layout, x, schedule
        self.policy, self.plan, self.proxy = policy, plan, proxy
        self.protect_recent = protect_recent
        self.cache = model.new_cache()
        self.trace = MemoryTrace(cfg.layers, cfg.heads, cfg.d_head, precision_bytes)
        self.kinds = layout.kind_codes()
        self.sids = layout.structure_ids()
        self.prot = layout.prompt_mask() if protect_prompt else np.zeros(layout.total_len, dtype=bool)
        self.prompt_q = [np.zeros((cfg.heads, 0, cfg.d_head)) for _ in range(cfg.layers)]
        self.attention_flops = 0
        self.evictions = 0
        if plan is not None:
            self._check_budgets()

    def _check_budgets(self):
        # worst protected set at each eviction point, known before any compute
        for blk in self.schedule:
            n_prot = int(self.prot[: blk.start].sum())
            if self.protect_recent:
                n_prot += len(blk)
            else:
                n_prot += int(self.prot[blk.start:blk.end].sum())
            # protected entries are never evicted, so occupancy >= n_prot
            if n_prot > min(self.plan.per_layer):
                raise InvalidConfiguration(
                    f"budget {min(self.plan.per_layer)} is smaller than the {n_prot} protected entries "
                    f"at block [{blk.start}, {blk.end})"
                )

    def run(self) -> PrefillResult:
        t0 = time.perf_counter()
        hidden = []
        for i, blk in enumerate(self.schedule):
            hidden.append(self._forward(blk))
            self.trace.record(f"block{i}:append", self.cache, block=i)
            if self.plan is not None and self._evict(i, blk):
                self.trace.record(f"block{i}:evict", self.cache, block=i)
        wall = time.perf_counter() - t0
        return PrefillResult(
            cache=self.cache,
            trace=self.trace,
            hidden=np.concatenate(hidden),
            schedule=list(self.schedule),
            ttft_wall_s=wall,
            attention_flops=self.attention_flops,
            projection_flops=projection_flops(self.model, self.layout.total_len),
            evictions=self.evictions,
            proxy_queries=self.prompt_q if self.proxy and self.proxy.mode == "prompt_first" else None,
            retained_positions=self.cache.retained_positions(),
        )

    def _forward(self, blk: Block) -> np.ndarray:
        cfg = self.model.config
        sl = slice(blk.start, blk.end)
        self.last_trace = ForwardTrace()
        out = forward_prefill_block(
            self.model, self.x[sl], self.cache, blk.start,
            kinds=self.kinds[sl], structure_ids=self.sids[sl], protected=self.prot[sl], trace=self.last_trace,
        )
        for layer in range(cfg.layers):
            kv_len = self.cache.count(layer, 0)
            self.attention_flops += cfg.heads * 4 * len(blk) * kv_len * cfg.d_head
        p_start, p_len = self.layout.prompt_span
        lo, hi = max(blk.start, p_start), min(blk.end, p_start + p_len)
        if lo < hi:
            for layer in range(cfg.layers):
                q = self.last_trace.queries[layer][:, lo - blk.start: hi - blk.start]
                self.prompt_q[layer] = np.concatenate([self.prompt_q[layer], q], axis=1)
        return out

    def _proxy_for(self, layer: int, head: int) -> np.ndarray | None:
        if not self.policy.uses_queries:
            return None
        if self.proxy.mode == "prompt_first":
            return self.prompt_q[layer][head]
        return self.last_trace.queries[layer][head]

    def _evict(self, round_: int, blk: Block) -> bool:
        fired = False
        for layer in range(self.model.config.layers):
            budget = self.plan[layer]
            for head in range(self.model.config.heads):
                st = self.cache.store(layer, head)
                if len(st) <= budget:
                    continue
                prot = st.protected.copy()
                if self.protect_recent:
                    prot |= st.positions >= blk.start
                scores = self.policy.score(st.keys, self._proxy_for(layer, head),
                                           layer=layer, head=head, round_=round_)
                keep = select_retained(scores, budget, np.flatnonzero(prot))
                self.cache.retain(layer, head, keep)
                fired = True
        self.evictions += fired
        return fired


def prefill_bulk(model: ModelState, layout: TokenLayout, embeddings, precision_bytes: int = 2) -> PrefillResult:
    """Full-cache baseline: the whole input in one forward, nothing evicted."""
    x = _check_inputs(model, layout, embeddings)
    schedule = [Block(0, layout.total_len, True)]
    return _Runner(model, layout, x, schedule, None, None, None, False, False, precision_bytes).run()


def _setup(model, layout, embeddings, policy, plan, b, proxy_source):
    x = _check_inputs(model, layout, embeddings)
    if not isinstance(policy, EvictionPolicy):
        policy = EvictionPolicy(policy)
    if len(plan) != model.config.layers:
        raise InvalidConfiguration(f"budget plan covers {len(plan)} layers, model has {model.config.layers}")
    if b < 1:
        raise InvalidConfiguration("block size must be >= 1")
    proxy = proxy_query_source(layout, proxy_source) if policy.uses_queries else ProxySpec(proxy_source, None)
    return x, policy, proxy


def prefill_blockwise(model: ModelState, layout: TokenLayout, embeddings, policy: EvictionPolicy,
                      plan: BudgetPlan, b: int = DEFAULT_BLOCK_SIZE, align: str = "none", *,
                      proxy_source: str = "prompt_first", protect_prompt: bool = True,
                      protect_recent: bool = True, precision_bytes: int = 2) -> PrefillResult:
    x, policy, proxy = _setup(model, layout, embeddings, policy, plan, b, proxy_source)
    schedule = partition_blocks(layout, b, align)
    return _Runner(model, layout, x, schedule, policy, plan, proxy, protect_prompt, protect_recent,
                   precision_bytes).run()


def hybrid_schedule(layout: TokenLayout, M: int, b: int, align: str = "none") -> list[Block]:
    """One bulk chunk of up to ``M`` tokens, then ``b``-sized blocks.

    Under structure alignment the chunk ends on the last segment boundary
    that fits in ``M``.
    """
    n = layout.total_len
    head = min(M, n)
    if align == "structure":
        head = max((e for e in layout.boundaries() if e <= head), default=0)
    if head == 0:
        return partition_blocks(layout, b, align)
    first = Block(0, head, not layout.splits_structure(head))
    return [first] + (partition_blocks(layout, b, align, start=head) if head < n else [])


def prefill_hybrid(model: ModelState, layout: TokenLayout, embeddings, policy: EvictionPolicy,
                   plan: BudgetPlan, b: int = DEFAULT_BLOCK_SIZE, align: str = "none", *,
                   proxy_source: str = "prompt_first", protect_prompt: bool = True,
                   protect_recent: bool = True, precision_bytes: int = 2) -> PrefillResult:
    """Bulk-encode the first ``M`` tokens, then continue block-wise with eviction."""
    x, policy, proxy = _setup(model, layout, embeddings, policy, plan, b, proxy_source)
    if align == "structure" and b < layout.max_segment_len:
        partition_blocks(layout, b, align)  # raises the misalignment error
    schedule = hybrid_schedule(layout, min(plan.per_layer), b, align)
    return _Runner(model, layout, x, schedule, policy, plan, proxy, protect_prompt, protect_recent,
                   precision_bytes).run()


def run_prefill(mode: PrefillMode, model, layout, embeddings, policy=None, plan=None, **kw) -> PrefillResult:
    if mode.kind == "bulk":
        return prefill_bulk(model, layout, embeddings, kw.get("precision_bytes", 2))
    fn = prefill_blockwise if mode.kind == "blockwise" else prefill_hybrid
    return fn(model, layout, embeddings, policy, plan, mode.block_size, mode.align, **kw)
