"""Memory-bounded block-wise prefill with online KV-cache eviction."""

from .errors import ContractViolation, InvalidArgument, InvalidConfiguration, InvalidState, PrefillError
from .estimator import BlockPrefillCompressor
from .eviction import (
    BudgetPlan,
    EvictionPolicy,
    plan_budgets,
    score_query_agnostic,
    score_query_aware,
    select_retained,
)
from .kv_cache import KvCache, MemoryTrace
from .prefill_engine import (
    PrefillMode,
    PrefillResult,
    prefill_blockwise,
    prefill_bulk,
    prefill_hybrid,
    proxy_query_source,
)
from .tensor_core import apply_rope, scaled_dot_attention, softmax_rows
from .toy_model import ModelConfig, ModelState, decode_step, forward_prefill_block, init_model
from .vision_layout import (
    Block,
    Segment,
    TokenLayout,
    build_layout,
    kv_memory_bytes,
    partition_blocks,
    vision_token_count,
)

__version__ = "0.1.0"
