"""Cache entry scoring, top-k selection and per-layer budget planning."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidConfiguration
from .tensor_core import as_matrix, softmax_rows

logger = logging.getLogger(__name__)

POLICY_ALIASES = {
    "snapkv": "query_aware",
    "query_aware": "query_aware",
    "keydiff": "query_agnostic",
    "query_agnostic": "query_agnostic",
    "random": "random",
    "random_baseline": "random",
}


@dataclass(frozen=True)
class EvictionPolicy:
    """Which scorer ranks cache entries.

    ``query_aware`` averages proxy-query attention over the cached keys,
    ``query_agnostic`` prefers keys pointing away from the mean key, and
    ``random`` is a seeded baseline with no signal at all.
    """

    kind: str = "query_aware"
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in POLICY_ALIASES:
            raise InvalidConfiguration(f"unknown eviction policy {self.kind!r}")
        object.__setattr__(self, "kind", POLICY_ALIASES[self.kind])

    @property
    def uses_queries(self) -> bool:
        return self.kind == "query_aware"

    def score(self, keys, proxy_Q=None, *, layer: int = 0, head: int = 0, round_: int = 0) -> np.ndarray:
        if self.kind == "query_aware":
            if proxy_Q is None or len(proxy_Q) == 0:
                raise InvalidConfiguration("query_aware eviction needs proxy queries")
            return score_query_aware(proxy_Q, keys)
        if self.kind == "query_agnostic":
            return score_query_agnostic(keys)
        rng = np.random.default_rng([self.rng_seed, layer, head, round_])
        return rng.random(len(keys))


def score_query_aware(proxy_Q, keys, d_k: int | None = None) -> np.ndarray:
    """Mean, over proxy rows, of softmax(q . k_j / sqrt(d_k)) across all keys."""
    proxy_Q = as_matrix(proxy_Q, "proxy_Q")
    keys = as_matrix(keys, "keys")
    if keys.shape[0] == 0:
        raise InvalidArgument("cannot score an empty key set")
    if proxy_Q.shape[0] == 0:
        raise InvalidArgument("need at least one proxy query")
    if proxy_Q.shape[1] != keys.shape[1]:
        raise InvalidArgument(f"proxy dim {proxy_Q.shape[1]} != key dim {keys.shape[1]}")
    scale = np.sqrt(d_k if d_k is not None else keys.shape[1])
    total = np.zeros(keys.shape[0])
    # one elementwise reduction per logit instead of a BLAS matmul, whose kernels can
    # round identical key columns differently and break exact ties
    for q in proxy_Q:
        total += softmax_rows(((keys * q).sum(axis=1) / scale)[None])[0]
    return total / proxy_Q.shape[0]


def score_query_agnostic(keys, with_diagnostics: bool = False):
    """Negative cosine similarity of each key to the mean key.

    A zero-norm key (or zero mean) gets a neutral cosine of 0; those indices
    are reported when ``with_diagnostics`` is set.
    """
    keys = as_matrix(keys, "keys")
    if keys.shape[0] == 0:
        raise InvalidArgument("cannot score an empty key set")
    # cosine ignores scale, so anchor on the column sum. cos^2 = dot^2 / (|k|^2 |mu|^2)
    # is a single rounding step on integer-valued keys, so equal cosines stay
    # bit-identical and ties reach the index tie-break intact.
    mu = keys.sum(axis=0)
    mu2 = mu @ mu
    k2 = np.einsum("ij,ij->i", keys, keys)
    dot = np.einsum("ij,j->i", keys, mu)
    degenerate = (k2 == 0) | (mu2 == 0)
    denom = np.where(degenerate, 1.0, k2 * mu2)
    cos2 = np.minimum(dot * dot / denom, 1.0)
    cos = np.where(degenerate, 0.0, np.sign(dot) * np.sqrt(cos2))
    if degenerate.any():
        logger.debug("query-agnostic scoring: %d zero-norm keys/anchor", int(degenerate.sum()))
    scores = -cos
    if with_diagnostics:
        return scores, np.flatnonzero(degenerate)
    return scores


def select_retained(scores, M: int, protected=()) -> np.ndarray:
    """Protected indices plus the best-scoring others, ``min(M, n)`` in total.

    Equal scores favour the earlier index. Returned ascending.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    protected = np.unique(np.asarray(protected, dtype=np.int64))
    if protected.size > M:
        raise InvalidConfiguration(f"{protected.size} protected entries exceed budget {M}")
    if protected.size and (protected[0] < 0 or protected[-1] >= n):
        raise InvalidArgument("protected index out of range")
    if M >= n:
        return np.arange(n)
    free = np.ones(n, dtype=bool)
    free[protected] = False
    cand = np.flatnonzero(free)
    order = cand[np.argsort(-scores[cand], kind="stable")]
    chosen = order[: M - protected.size]
    return np.sort(np.concatenate([protected, chosen]))


@dataclass(frozen=True)
class BudgetPlan:
    per_layer: tuple[int, ...]
    mode: str = "static"

    def __getitem__(self, layer: int) -> int:
        return self.per_layer[layer]

    def __len__(self) -> int:
        return len(self.per_layer)

    @property
    def max_budget(self) -> int:
        return max(self.per_layer)


def _largest_remainder(raw: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        frac = raw - base
        base[np.argsort(-frac, kind="stable")[:short]] += 1
    return base


def plan_budgets(mode: str, layers: int, M: int, layer_stats=None, floor: int = 1) -> BudgetPlan:
    """Per-layer retention budgets.

    ``static`` gives every layer ``M``. ``dynamic`` splits ``layers * M``
    proportionally to ``layer_stats`` (per-layer attention entropies), lifting
    any layer below ``floor`` up to it and sharing what is left among the rest.
    """
    if layers < 1 or M < 1:
        raise InvalidConfiguration("layers and budget must be positive")
    if mode == "static":
        return BudgetPlan(tuple([M] * layers), "static")
    if mode != "dynamic":
        raise InvalidConfiguration(f"budget_mode must be 'static' or 'dynamic', got {mode!r}")
    if layer_stats is None:
        raise InvalidConfiguration("budget_mode=dynamic requires per-layer statistics (budget_stats)")
    w = np.asarray(layer_stats, dtype=np.float64)
    if w.shape != (layers,):
        raise InvalidConfiguration(f"expected {layers} layer statistics, got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidConfiguration("layer statistics must be finite and nonnegative")
    total = layers * M
    if floor * layers > total:
        raise InvalidConfiguration(f"floor {floor} exceeds budget {M}")

    pinned = np.zeros(layers, dtype=bool)
    while True:
        remaining = total - floor * int(pinned.sum())
        wf = np.where(pinned, 0.0, w)
        if wf.sum() > 0:
            raw = remaining * wf / wf.sum()
        else:
            raw = np.where(pinned, 0.0, remaining / max(1, int((~pinned).sum())))
        low = ~pinned & (raw < floor)
        if not low.any():
            break
        pinned |= low
    alloc = _largest_remainder(np.where(pinned, 0.0, raw), total - floor * int(pinned.sum()))
    alloc[pinned] = floor
    return BudgetPlan(tuple(int(x) for x in alloc), "dynamic")


def attention_entropy(weights: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of an attention matrix."""
    w = np.asarray(weights)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w), 0.0)
    return float(-terms.sum(axis=-1).mean())
