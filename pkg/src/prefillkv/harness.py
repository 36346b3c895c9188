"""Synthetic needle tasks, baselines and experiment sweeps.

Every sweep returns a list of :class:`RunReport`; the matching ``check_*``
function evaluates the trend claims on those reports and returns a mapping
``claim -> bool`` so callers decide whether a failed claim is fatal.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from .config import RunConfig
from .errors import InvalidArgument, InvalidState
from .eviction import EvictionPolicy, attention_entropy, plan_budgets
from .prefill_engine import PrefillMode, PrefillResult, prefill_bulk, run_prefill
from .tensor_core import apply_rope
from .toy_model import (
    ForwardTrace,
    ModelConfig,
    ModelState,
    decode_step,
    forward_prefill_block,
    init_model,
    rms_norm,
)
from .vision_layout import TokenLayout, build_layout, kv_memory_bytes, partition_blocks

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# needle tasks

@dataclass
class NeedleTask:
    layout: TokenLayout
    needle_kind: str
    needle_segment: int
    needle_positions: np.ndarray
    kappa: float
    seed: int
    needle_scale: float
    # decode-time question embedding, built like the prompt
    probe: np.ndarray

    @property
    def needle_size(self) -> int:
        return len(self.needle_positions)


def resolve_needle_segment(layout: TokenLayout, needle_segment: int) -> tuple[str, int]:
    visual = layout.visual_segments()
    if not visual:
        raise InvalidArgument("layout has no tile or frame segment to hide a needle in")
    kind = visual[0].kind
    ids = [s.structure_id for s in visual if s.kind == kind]
    if needle_segment < 0:
        return kind, ids[len(ids) // 2]
    if needle_segment not in ids:
        raise InvalidArgument(f"no {kind} with structure id {needle_segment}")
    return kind, needle_segment


def needle_directions(model: ModelState) -> tuple[np.ndarray, np.ndarray]:
    """Embedding-space directions for needle tokens and for prompt tokens.

    The target key pattern puts unit weight on the lowest-frequency rotary
    pair of every head, so the match survives large position gaps. The needle
    direction maximises the summed layer-0 key response to that pattern and
    the prompt direction does the same for layer-0 queries.
    """
    cfg = model.config
    lw = model.layers[0]
    target = np.zeros(cfg.d_model)
    target[np.arange(cfg.heads) * cfg.d_head + cfg.d_head - 2] = 1.0
    u = lw.wk @ target
    w = lw.wq @ target
    return u / np.linalg.norm(u), w / np.linalg.norm(w)


def gen_needle_haystack(seed: int, layout: TokenLayout, needle_segment: int, kappa: float,
                        model: ModelState, needle_scale: float = 4.0) -> tuple[np.ndarray, NeedleTask]:
    """Isotropic haystack, one displaced needle segment, prompt aligned with strength ``kappa``.

    ``kappa = 0`` leaves the prompt as pure noise. The construction targets
    layer 0 of ``model``; use :func:`needle_premise` to confirm the needle
    really is top-scored on a given instance.
    """
    if kappa < 0:
        raise InvalidArgument("kappa must be nonnegative")
    kind, sid = resolve_needle_segment(layout, needle_segment)
    seg = layout.find_segment(kind, sid)
    D = model.config.d_model
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((layout.total_len, D))
    u, w = needle_directions(model)
    x[seg.start:seg.end] += needle_scale * math.sqrt(D) * u
    p0, plen = layout.prompt_span
    x[p0:p0 + plen] += kappa * math.sqrt(D) * w
    probe = rng.standard_normal(D) + kappa * math.sqrt(D) * w
    task = NeedleTask(layout, kind, sid, np.arange(seg.start, seg.end), float(kappa), seed, needle_scale, probe)
    return x, task


def needle_premise(model: ModelState, task: NeedleTask, embeddings) -> bool:
    """True iff, at layer 0 and for every head and prompt query, each needle key
    out-scores every other non-prompt key.

    Under that condition query-aware eviction keeps the whole needle in layer
    0 whenever the budget leaves room for it.
    """
    cfg = model.config
    x = np.asarray(embeddings)
    lw = model.layers[0]
    pos = np.arange(len(x))
    h = rms_norm(x, lw.attn_gain)
    p0, plen = task.layout.prompt_span
    needle = np.zeros(len(x), dtype=bool)
    needle[task.needle_positions] = True
    others = ~needle
    others[p0:p0 + plen] = False
    if not others.any():
        return True
    for hd in range(cfg.heads):
        cols = slice(hd * cfg.d_head, (hd + 1) * cfg.d_head)
        k = apply_rope(h @ lw.wk[:, cols], pos, cfg.rope_base)
        q = apply_rope(h[p0:p0 + plen] @ lw.wq[:, cols], pos[p0:p0 + plen], cfg.rope_base)
        logits = q @ k.T
        if not np.all(logits[:, needle].min(axis=1) > logits[:, others].max(axis=1)):
            return False
    return True


def eval_retention(result: PrefillResult, task: NeedleTask, source_positions=None) -> float:
    """Fraction of needle positions still cached, averaged over (layer, head).

    ``source_positions`` maps cache positions back to original token indices
    for runs on a reduced input.
    """
    if task.needle_size == 0:
        return 1.0
    fracs = []
    for row in result.retained_positions:
        for pos in row:
            orig = _original_positions(pos, source_positions)
            fracs.append(np.isin(task.needle_positions, orig).mean())
    return float(np.mean(fracs))


def _original_positions(pos: np.ndarray, source_positions) -> np.ndarray:
    if source_positions is None:
        return pos
    src = np.asarray(source_positions)
    # positions past the reduced input (decode tokens) map to -1
    return np.where(pos < len(src), src[np.minimum(pos, len(src) - 1)], -1)


def decode_attention_mass(model: ModelState, result: PrefillResult, task: NeedleTask,
                          source_positions=None) -> float:
    """Attention mass a one-token decode of ``task.probe`` puts on needle entries."""
    if task.needle_size == 0:
        return 0.0
    cache = result.cache.copy()
    trace = ForwardTrace(keep_weights=True)
    decode_step(model, task.probe, cache, cache.next_position, trace=trace)
    masses = []
    for layer, per_head in enumerate(trace.weights):
        for hd, w in enumerate(per_head):
            orig = _original_positions(cache.positions(layer, hd), source_positions)
            masses.append(float(w[0][np.isin(orig, task.needle_positions)].sum()))
    return float(np.clip(np.mean(masses), 0.0, 1.0))


# ---------------------------------------------------------------------------
# input-reduction baseline

class ReducedInput(NamedTuple):
    layout: TokenLayout
    embeddings: np.ndarray
    source_positions: np.ndarray


def reduction_stride(layout: TokenLayout, target_tokens: int) -> int:
    return max(1, layout.vision_tokens // target_tokens)


def baseline_input_reduction(layout: TokenLayout, embeddings, target_tokens: int) -> ReducedInput:
    """Keep every k-th vision token of each tile/frame, ``k = vision_tokens // target``.

    Text segments pass through untouched. The kept count is
    ``sum(ceil(len / k))`` per segment, which can sit slightly above
    ``target_tokens`` when segment lengths are not multiples of ``k``.
    """
    visual = layout.visual_segments()
    if target_tokens > layout.vision_tokens:
        raise InvalidArgument(f"target {target_tokens} exceeds the {layout.vision_tokens} vision tokens")
    if target_tokens < len(visual):
        raise InvalidArgument(f"target {target_tokens} leaves less than one token per tile/frame")
    k = reduction_stride(layout, target_tokens)
    keep, spans = [], []
    for seg in layout.segments:
        idx = np.arange(seg.start, seg.end)
        if seg.is_visual:
            idx = idx[::k]
        keep.append(idx)
        spans.append((seg.kind, len(idx)))
    src = np.concatenate(keep)
    reduced = TokenLayout.from_spans(spans, prompt_index=layout.prompt_index)
    return ReducedInput(reduced, np.asarray(embeddings)[src], src)


# ---------------------------------------------------------------------------
# reports

@dataclass
class RunReport:
    label: str
    config: dict
    global_peak_bytes: int
    avg_block_peak_bytes: float
    ttft_wall_s: float | None
    ttft_flops: int
    needle_retention: float
    decode_attention_mass_on_needle: float
    policy: str
    budget: int
    block_size: int
    mode: str
    forward_passes: int

    def __post_init__(self):
        for name in ("needle_retention", "decode_attention_mass_on_needle"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidState(f"{name}={v} outside [0, 1]")
        if self.global_peak_bytes < 0 or self.avg_block_peak_bytes < 0:
            raise InvalidState("negative peak")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


REPORT_COLUMNS = [f.name for f in fields(RunReport)]
_INT_COLS = {"global_peak_bytes", "ttft_flops", "budget", "block_size", "forward_passes"}
_FLOAT_COLS = {"avg_block_peak_bytes", "needle_retention", "decode_attention_mass_on_needle"}


def reports_to_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        row = []
        for col in REPORT_COLUMNS:
            v = getattr(r, col)
            if col == "config":
                v = json.dumps(v, sort_keys=True, separators=(",", ":"))
            elif v is None:
                v = ""
            elif isinstance(v, float):
                v = repr(v)
            row.append(v)
        w.writerow(row)
    return buf.getvalue()


def reports_from_csv(text: str) -> list[RunReport]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        d: dict = dict(row)
        d["config"] = json.loads(d["config"])
        d["ttft_wall_s"] = float(d["ttft_wall_s"]) if d["ttft_wall_s"] else None
        for c in _INT_COLS:
            d[c] = int(d[c])
        for c in _FLOAT_COLS:
            d[c] = float(d[c])
        out.append(RunReport.from_dict(d))
    return out


def reports_to_json(reports: Sequence[RunReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], sort_keys=False, indent=1)


def reports_from_json(text: str) -> list[RunReport]:
    return [RunReport.from_dict(d) for d in json.loads(text)]


# ---------------------------------------------------------------------------
# single runs

def build_model(cfg: RunConfig) -> ModelState:
    m = cfg.model
    return init_model(ModelConfig(m.layers, m.heads, m.d_model, m.rope_base, m.seed, m.mlp_ratio))


def build_config_layout(cfg: RunConfig) -> TokenLayout:
    lay = cfg.layout
    return build_layout(lay.prompt_len, lay.tiles, lay.tokens_per_tile, lay.frames, lay.tokens_per_frame,
                        lay.prompt_position)


def make_inputs(cfg: RunConfig, model: ModelState, layout: TokenLayout) -> tuple[np.ndarray, NeedleTask]:
    t = cfg.task
    if not layout.visual_segments():
        rng = np.random.default_rng(t.seed)
        x = rng.standard_normal((layout.total_len, model.config.d_model))
        task = NeedleTask(layout, "tile", -1, np.zeros(0, dtype=np.int64), t.kappa, t.seed, t.needle_scale,
                          rng.standard_normal(model.config.d_model))
        return x, task
    return gen_needle_haystack(t.seed, layout, t.needle_segment, t.kappa, model, t.needle_scale)


def measure_layer_entropies(model: ModelState, embeddings, tokens: int) -> np.ndarray:
    """Mean attention entropy per layer from a full forward over the first ``tokens`` inputs."""
    cache = model.new_cache()
    trace = ForwardTrace(keep_weights=True)
    forward_prefill_block(model, np.asarray(embeddings)[:tokens], cache, 0, trace=trace)
    return np.array([np.mean([attention_entropy(w) for w in per_head]) for per_head in trace.weights])


def budget_plan_for(cfg: RunConfig, model: ModelState, embeddings, budget: int | None = None):
    pf = cfg.prefill
    M = pf.budget if budget is None else budget
    stats = None
    if pf.budget_mode == "dynamic":
        if pf.budget_stats == "explicit":
            stats = pf.layer_entropies
        elif pf.budget_stats == "first_block":
            stats = measure_layer_entropies(model, embeddings, min(pf.block_size, len(embeddings)))
    floor = pf.block_size if M >= pf.block_size else 1
    return plan_budgets(pf.budget_mode, model.config.layers, M, stats, floor=floor)


def _report(label, cfg, model, result, task, mode, budget, block_size, source_positions=None) -> RunReport:
    return RunReport(
        label=label,
        config=cfg.echo(),
        global_peak_bytes=int(result.trace.global_peak()),
        avg_block_peak_bytes=float(result.trace.avg_block_peak()),
        ttft_wall_s=float(result.ttft_wall_s) if cfg.output.wall_clock else None,
        ttft_flops=int(result.ttft_flops),
        needle_retention=eval_retention(result, task, source_positions),
        decode_attention_mass_on_needle=decode_attention_mass(model, result, task, source_positions),
        policy=cfg.prefill.policy,
        budget=int(budget),
        block_size=int(block_size),
        mode=mode,
        forward_passes=result.forward_passes,
    )


def run_once(cfg: RunConfig, label: str = "run") -> tuple[RunReport, PrefillResult, NeedleTask]:
    model = build_model(cfg)
    layout = build_config_layout(cfg)
    x, task = make_inputs(cfg, model, layout)
    pf = cfg.prefill
    mode = PrefillMode(pf.mode, pf.block_size, pf.align)
    plan = budget_plan_for(cfg, model, x) if pf.mode != "bulk" else None
    kw = dict(precision_bytes=cfg.model.precision_bytes)
    if pf.mode != "bulk":
        kw.update(proxy_source=pf.proxy_source, protect_prompt=pf.protect_prompt, protect_recent=pf.protect_recent)
    result = run_prefill(mode, model, layout, x, EvictionPolicy(pf.policy, cfg.task.seed), plan, **kw)
    budget = layout.total_len if pf.mode == "bulk" else pf.budget
    return _report(label, cfg, model, result, task, pf.mode, budget, pf.block_size), result, task


# ---------------------------------------------------------------------------
# sweeps

def sweep_input_size(cfg: RunConfig, tile_counts: Sequence[int]) -> list[RunReport]:
    """Full-cache and block-wise prefill at each tile count."""
    reports = []
    for tiles in tile_counts:
        c = cfg.replace(**{"layout.tiles": tiles, "layout.frames": 0})
        full = c.replace(**{"prefill.mode": "bulk"})
        reports.append(run_once(full, f"full_cache/tiles={tiles}")[0])
        blk = c.replace(**{"prefill.mode": "blockwise"})
        reports.append(run_once(blk, f"blockwise/tiles={tiles}")[0])
    return reports


def check_input_size_trend(cfg: RunConfig, reports: Sequence[RunReport]) -> dict[str, bool]:
    m = cfg.model
    full = [r for r in reports if r.mode == "bulk"]
    blk = [r for r in reports if r.mode == "blockwise"]
    tiles = [r.config["layout"]["tiles"] for r in full]
    bound = kv_memory_bytes(m.layers, m.heads, m.d_model // m.heads, m.precision_bytes,
                            cfg.prefill.budget + cfg.prefill.block_size)
    peaks = [r.global_peak_bytes for r in full]
    return {
        "blockwise_peak_constant": len({r.global_peak_bytes for r in blk}) == 1,
        "blockwise_peak_equals_M_plus_b": all(r.global_peak_bytes == bound for r in blk),
        "full_cache_ratio_matches_tiles": all(p * tiles[0] == peaks[0] * t for p, t in zip(peaks, tiles)),
        "full_cache_affine_in_tiles": len({(p - peaks[0]) * 1.0 / (t - tiles[0])
                                           for p, t in zip(peaks[1:], tiles[1:])}) <= 1,
    }


def sweep_budget(cfg: RunConfig, budgets: Sequence[int]) -> list[RunReport]:
    """Hybrid prefill at each budget."""
    reports = []
    for M in budgets:
        c = cfg.replace(**{"prefill.budget": M, "prefill.mode": "hybrid"})
        reports.append(run_once(c, f"hybrid/budget={M}")[0])
    return reports


def check_budget_trend(reports: Sequence[RunReport]) -> dict[str, bool]:
    rs = sorted(reports, key=lambda r: r.budget)
    peaks = [r.global_peak_bytes for r in rs]
    flops = [r.ttft_flops for r in rs]
    passes = [r.forward_passes for r in rs]
    return {
        "peak_non_decreasing": all(a <= b for a, b in zip(peaks, peaks[1:])),
        "flops_non_increasing": all(a >= b for a, b in zip(flops, flops[1:])),
        "forward_passes_non_increasing": all(a >= b for a, b in zip(passes, passes[1:])),
    }


def needle_split(layout: TokenLayout, task: NeedleTask, b: int, align: str) -> bool:
    """Whether the needle segment straddles a block boundary under this partition."""
    lo, hi = int(task.needle_positions[0]), int(task.needle_positions[-1]) + 1
    return any(lo < blk.end < hi for blk in partition_blocks(layout, b, align))


def sweep_block_size(cfg: RunConfig, block_sizes: Sequence[int], tile_token_count: int) -> list[RunReport]:
    """Aligned and unaligned block-wise runs per block size on a one-tile needle task.

    Aligned runs are skipped where the block is shorter than a segment.
    """
    base = cfg.replace(**{"layout.tokens_per_tile": tile_token_count, "layout.frames": 0,
                          "prefill.mode": "blockwise"})
    reports = []
    longest = max(base.layout.prompt_len, tile_token_count)
    for b in block_sizes:
        for align in ("none", "structure"):
            if align == "structure" and b < longest:
                continue
            c = base.replace(**{"prefill.block_size": b, "prefill.align": align})
            reports.append(run_once(c, f"blockwise/b={b}/align={align}")[0])
    return reports


def check_block_size_trend(reports: Sequence[RunReport]) -> dict[str, bool]:
    out = {}
    for align in ("none", "structure"):
        rs = sorted((r for r in reports if r.config["prefill"]["align"] == align), key=lambda r: r.block_size)
        peaks = [r.avg_block_peak_bytes for r in rs]
        out[f"avg_block_peak_non_decreasing[{align}]"] = all(a <= b for a, b in zip(peaks, peaks[1:]))
    return out


def compare_policies(cfg: RunConfig, policies: Sequence[str] = ("snapkv", "keydiff", "random")) -> list[RunReport]:
    return [run_once(cfg.replace(**{"prefill.policy": p}), f"policy={p}")[0] for p in policies]


def compare_reduction(cfg: RunConfig, budget: int | None = None) -> list[RunReport]:
    """Prefill compression vs. strided input reduction at the same cache budget."""
    M = cfg.prefill.budget if budget is None else budget
    c = cfg.replace(**{"prefill.budget": M})
    comp = run_once(c, "compression")[0]

    model = build_model(c)
    layout = build_config_layout(c)
    x, task = make_inputs(c, model, layout)
    red = baseline_input_reduction(layout, x, max(1, M - layout.prompt.length))
    result = prefill_bulk(model, red.layout, red.embeddings, c.model.precision_bytes)
    rep = _report("reduction", c, model, result, task, "bulk", M, c.prefill.block_size, red.source_positions)
    return [comp, rep]
