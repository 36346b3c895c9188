import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefillkv.errors import InvalidArgument, InvalidConfiguration
from prefillkv.eviction import EvictionPolicy, plan_budgets
from prefillkv.harness import eval_retention, gen_needle_haystack, needle_premise
from prefillkv.prefill_engine import (PrefillMode, hybrid_schedule, prefill_blockwise, prefill_bulk,
                                      prefill_hybrid, proxy_query_source, run_prefill)
from prefillkv.toy_model import ModelConfig, forward_bulk, init_model
from prefillkv.vision_layout import TokenLayout, build_layout, kv_memory_bytes


def setup(seed=0, layers=2, heads=2, d_model=16, prompt=4, tiles=6, tpt=8):
    model = init_model(ModelConfig(layers, heads, d_model, seed=seed))
    lay = build_layout(prompt, tiles=tiles, tokens_per_tile=tpt)
    x = np.random.default_rng(seed).normal(size=(lay.total_len, d_model))
    return model, lay, x


def occupancy_log(result):
    return [(ev.label, ev.entries) for ev in result.trace.events]


class TestBulk:
    def test_full_cache(self):
        m, lay, x = setup()
        r = prefill_bulk(m, lay, x)
        assert (r.cache.counts() == lay.total_len).all()
        assert r.trace.global_peak() == kv_memory_bytes(2, 2, 8, 2, lay.total_len)
        assert r.forward_passes == 1

    def test_doubling_input_doubles_peak(self):
        m = init_model(ModelConfig(d_model=16))
        peaks = []
        for n in (20, 40):
            lay = TokenLayout.from_spans([("text", n)])
            peaks.append(prefill_bulk(m, lay, np.zeros((n, 16))).trace.global_peak())
        assert peaks[1] == 2 * peaks[0]

    def test_length_mismatch(self):
        m, lay, x = setup()
        with pytest.raises(InvalidArgument):
            prefill_bulk(m, lay, x[:-1])


class TestBlockwise:
    @pytest.mark.parametrize("fn", [prefill_blockwise, prefill_hybrid])
    def test_full_budget_equals_bulk(self, fn):
        m, lay, x = setup(seed=1)
        bulk = prefill_bulk(m, lay, x)
        r = fn(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, lay.total_len), 8)
        assert r.evictions == 0
        np.testing.assert_allclose(r.hidden, bulk.hidden, rtol=1e-5)
        for l in range(2):
            for hd in range(2):
                np.testing.assert_allclose(r.cache.store(l, hd).keys, bulk.cache.store(l, hd).keys, rtol=1e-5)
                assert r.cache.positions(l, hd).tolist() == bulk.cache.positions(l, hd).tolist()

    def test_step_through_n8_b4_m4(self):
        m = init_model(ModelConfig(layers=1, heads=2, d_model=8))
        lay = TokenLayout.from_spans([("text", 8)])
        x = np.random.default_rng(0).normal(size=(8, 8))
        r = prefill_blockwise(m, lay, x, EvictionPolicy("keydiff"), plan_budgets("static", 1, 4), 4,
                              protect_prompt=False)
        assert occupancy_log(r) == [("block0:append", 4), ("block1:append", 8), ("block1:evict", 4)]
        assert r.cache.counts().max() <= 4

    @pytest.mark.parametrize("policy", ["snapkv", "keydiff", "random"])
    @pytest.mark.parametrize("mode", ["blockwise", "hybrid"])
    def test_budget_and_peak_bounds(self, policy, mode):
        m, lay, x = setup(seed=2, tiles=10)
        M, b = 24, 8
        r = run_prefill(PrefillMode(mode, b), m, lay, x, EvictionPolicy(policy, 3), plan_budgets("static", 2, M),
                        proxy_source="prompt_first")
        for ev in r.trace.events:
            assert ev.entries <= M + b
            if ev.label.endswith("evict"):
                assert ev.entries <= M
        assert r.trace.global_peak() <= kv_memory_bytes(2, 2, 8, 2, M + b)
        assert (r.cache.counts() <= M).all()
        # all heads of a layer end with the same count
        assert (r.cache.counts() == r.cache.counts()[:, :1]).all()

    def test_retained_positions_match_cache(self):
        m, lay, x = setup(seed=3)
        r = prefill_blockwise(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, 20), 8)
        for l in range(2):
            for hd in range(2):
                assert r.retained_positions[l][hd].tolist() == r.cache.positions(l, hd).tolist()

    def test_prompt_and_recent_block_protected(self):
        m, lay, x = setup(seed=4)
        r = prefill_blockwise(m, lay, x, EvictionPolicy("random", 1), plan_budgets("static", 2, 16), 8)
        last = r.schedule[-1]
        for l in range(2):
            for hd in range(2):
                pos = set(r.cache.positions(l, hd).tolist())
                assert set(range(4)) <= pos
                assert set(range(last.start, last.end)) <= pos

    def test_budget_below_protected_set(self):
        m, lay, x = setup()
        with pytest.raises(InvalidConfiguration):
            prefill_blockwise(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, 10), 8)

    def test_structure_misalignment(self):
        m, lay, x = setup()
        with pytest.raises(InvalidConfiguration):
            prefill_blockwise(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, 40), 6, "structure")

    def test_plan_layer_count_checked(self):
        m, lay, x = setup()
        with pytest.raises(InvalidConfiguration):
            prefill_blockwise(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 3, 40), 8)

    def test_deterministic(self):
        m, lay, x = setup(seed=5)
        runs = [prefill_blockwise(m, lay, x, EvictionPolicy("random", 9), plan_budgets("static", 2, 20), 8)
                for _ in range(2)]
        assert runs[0].cache.fingerprint() == runs[1].cache.fingerprint()
        assert occupancy_log(runs[0]) == occupancy_log(runs[1])

    def test_adversarial_needle_survives(self):
        model = init_model(ModelConfig(1, 2, 256, rope_base=1e6))
        lay = build_layout(16, tiles=12, tokens_per_tile=16)
        x, task = gen_needle_haystack(0, lay, -1, 8.0, model)
        assert needle_premise(model, task, x)
        b = 16
        for M in (16 + 16 + b, 64, 100):
            r = prefill_blockwise(model, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 1, M), b)
            assert r.evictions > 0
            assert eval_retention(r, task) == 1.0


class TestHybrid:
    def test_short_input_is_bulk(self):
        m, lay, x = setup(seed=6)
        r = prefill_hybrid(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, 100), 8)
        assert r.forward_passes == 1
        np.testing.assert_allclose(r.hidden, prefill_bulk(m, lay, x).hidden, rtol=1e-12)

    def test_n_equals_m_plus_b(self):
        lay = build_layout(4, tiles=5, tokens_per_tile=8)  # N = 44
        sched = hybrid_schedule(lay, 36, 8)
        assert [len(b) for b in sched] == [36, 8]

    def test_structure_aligned_head(self):
        lay = build_layout(4, tiles=5, tokens_per_tile=8)
        sched = hybrid_schedule(lay, 30, 8, "structure")
        assert (sched[0].start, sched[0].end) == (0, 28)
        assert all(blk.aligned for blk in sched)

    def test_peak_bound_after_first_chunk(self):
        m, lay, x = setup(seed=7, tiles=10)
        r = prefill_hybrid(m, lay, x, EvictionPolicy("keydiff"), plan_budgets("static", 2, 30), 8)
        assert r.trace.peak_entries() <= 38


class TestFlopModel:
    def test_attention_flop_count(self):
        m = init_model(ModelConfig(layers=2, heads=2, d_model=8))
        lay = TokenLayout.from_spans([("text", 12)])
        x = np.zeros((12, 8))
        r = prefill_blockwise(m, lay, x, EvictionPolicy("keydiff"), plan_budgets("static", 2, 6), 4,
                              protect_prompt=False)
        # kv lengths 4, 8 -> evict to 6, then 10
        assert r.attention_flops == 2 * 2 * 4 * 4 * (4 * 4 + 4 * 8 + 4 * 10)

    def test_projection_flops_mode_independent(self):
        m, lay, x = setup()
        a = prefill_bulk(m, lay, x)
        b = prefill_blockwise(m, lay, x, EvictionPolicy("keydiff"), plan_budgets("static", 2, 20), 8)
        assert a.projection_flops == b.projection_flops

    def test_blockwise_flops_non_increasing_in_budget(self):
        m, lay, x = setup(seed=8, tiles=12)
        flops = [prefill_blockwise(m, lay, x, EvictionPolicy("keydiff"), plan_budgets("static", 2, M), 8).ttft_flops
                 for M in (16, 32, 64)]
        assert flops[0] >= flops[1] >= flops[2], flops

    def test_hybrid_flops_below_blockwise(self):
        m, lay, x = setup(seed=9, tiles=12)
        plan = plan_budgets("static", 2, 32)
        hy = prefill_hybrid(m, lay, x, EvictionPolicy("keydiff"), plan, 8).attention_flops
        bw = prefill_blockwise(m, lay, x, EvictionPolicy("keydiff"), plan, 8).attention_flops
        assert hy < bw


class TestProxySource:
    def test_prompt_first_rows(self):
        m, lay, x = setup(prompt=16, tiles=4)
        assert proxy_query_source(lay, "prompt_first").rows == 16
        r = prefill_blockwise(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, 30), 8)
        assert all(q.shape == (2, 16, 8) for q in r.proxy_queries)

    def test_prompt_last_rejected(self):
        lay = build_layout(4, tiles=2, tokens_per_tile=4, prompt_position="last")
        with pytest.raises(InvalidConfiguration):
            proxy_query_source(lay, "prompt_first")
        assert proxy_query_source(lay, "block_local").rows is None

    def test_block_local_on_prompt_last(self):
        m = init_model(ModelConfig(d_model=16))
        lay = build_layout(4, tiles=6, tokens_per_tile=4, prompt_position="last")
        x = np.random.default_rng(0).normal(size=(lay.total_len, 16))
        r = prefill_blockwise(m, lay, x, EvictionPolicy("snapkv"), plan_budgets("static", 2, 12), 4,
                              proxy_source="block_local")
        assert (r.cache.counts() <= 12).all()

    def test_query_agnostic_ignores_proxy_source(self):
        m, lay, x = setup(seed=10)
        sets = [prefill_blockwise(m, lay, x, EvictionPolicy("keydiff"), plan_budgets("static", 2, 20), 8,
                                  proxy_source=src).retained_positions for src in ("prompt_first", "block_local")]
        for l in range(2):
            for hd in range(2):
                assert sets[0][l][hd].tolist() == sets[1][l][hd].tolist()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), tiles=st.integers(1, 8), tpt=st.integers(1, 12), b=st.integers(2, 12),
       extra=st.integers(0, 30), policy=st.sampled_from(["snapkv", "keydiff", "random"]),
       mode=st.sampled_from(["blockwise", "hybrid"]))
def test_budget_invariant_property(seed, tiles, tpt, b, extra, policy, mode):
    m = init_model(ModelConfig(1, 2, 8, seed=seed % 7))
    lay = build_layout(2, tiles=tiles, tokens_per_tile=tpt)
    x = np.random.default_rng(seed).normal(size=(lay.total_len, 8))
    M = 2 + b + extra
    r = run_prefill(PrefillMode(mode, b), m, lay, x, EvictionPolicy(policy, seed), plan_budgets("static", 1, M))
    assert r.trace.peak_entries() <= M + b
    assert all(ev.entries <= M for ev in r.trace.events if ev.label.endswith("evict"))
    assert (r.cache.counts() <= M).all()
