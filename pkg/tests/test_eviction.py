import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefillkv.errors import InvalidArgument, InvalidConfiguration
from prefillkv.eviction import (EvictionPolicy, attention_entropy, plan_budgets, score_query_agnostic,
                                score_query_aware, select_retained)


def brute_mass(Q, K):
    """Mean softmax mass per key, with plain Python loops."""
    n, d = K.shape
    out = [0.0] * n
    for q in Q:
        logits = [sum(q[t] * k[t] for t in range(d)) / math.sqrt(d) for k in K]
        m = max(logits)
        e = [math.exp(l - m) for l in logits]
        z = sum(e)
        for j in range(n):
            out[j] += e[j] / z / len(Q)
    return out


def brute_neg_cosine(K):
    n, d = K.shape
    mu = [sum(K[j, t] for j in range(n)) / n for t in range(d)]
    mn = math.sqrt(sum(v * v for v in mu))
    out = []
    for k in K:
        kn = math.sqrt(sum(v * v for v in k))
        out.append(0.0 if kn == 0 or mn == 0 else -sum(a * b for a, b in zip(k, mu)) / (kn * mn))
    return out


def exact_neg_cosine_key(K):
    """Exact rational stand-in for -cos(k, mean): -sign(c) * c**2, same ordering."""
    rows = [[Fraction(float(v)) for v in k] for k in K]
    S = [sum(col) for col in zip(*rows)]
    s2 = sum(v * v for v in S)
    out = []
    for k in rows:
        k2 = sum(v * v for v in k)
        if k2 == 0 or s2 == 0:
            out.append(Fraction(0))
            continue
        dot = sum(a * b for a, b in zip(k, S))
        out.append(-(1 if dot > 0 else -1) * dot * dot / (k2 * s2))
    return out


def brute_topk(scores, M, protected=()):
    """Protected plus the best others; ties go to the lower index."""
    protected = set(protected)
    if M >= len(scores):
        return list(range(len(scores)))
    rest = sorted((i for i in range(len(scores)) if i not in protected), key=lambda i: (-scores[i], i))
    return sorted(protected | set(rest[: M - len(protected)]))


def random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


class TestQueryAware:
    def test_hand_example(self):
        np.testing.assert_allclose(score_query_aware([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]], 2),
                                   [0.6698, 0.3302], atol=1e-4)

    def test_identical_keys_uniform(self):
        np.testing.assert_allclose(score_query_aware(np.ones((3, 4)), np.ones((5, 4))), np.full(5, 0.2))

    def test_symmetric_pair_ties_at_top(self):
        Q = np.array([[4.0, 0.0], [0.0, 4.0]])
        K = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
        s = score_query_aware(Q, K)
        assert s[0] == pytest.approx(s[1]) and s[0] > s[2]
        assert select_retained(s, 1).tolist() == [0]

    def test_empty_keys(self):
        with pytest.raises(InvalidArgument):
            score_query_aware(np.ones((1, 2)), np.zeros((0, 2)))

    def test_d_k_rescales(self):
        Q, K = np.array([[1.0, 2.0]]), np.array([[0.5, 0.0], [0.0, 1.0]])
        logits = (Q @ K.T)[0] / math.sqrt(8)
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(score_query_aware(Q, K, d_k=8), expected)

    @settings(max_examples=200, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_each_proxy_row_normalised(self, seed):
        rng = np.random.default_rng(seed)
        K = rng.normal(size=(rng.integers(1, 40), 6)) * 3
        for q in rng.normal(size=(4, 6)) * 3:
            assert score_query_aware(q[None], K).sum() == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31), M=st.integers(1, 20))
    def test_joint_rotation_invariance(self, seed, M):
        rng = np.random.default_rng(seed)
        Q, K = rng.normal(size=(3, 5)), rng.normal(size=(20, 5))
        R = random_orthogonal(rng, 5)
        a = select_retained(score_query_aware(Q, K), M)
        b = select_retained(score_query_aware(Q @ R, K @ R), M)
        assert a.tolist() == b.tolist()


class TestQueryAgnostic:
    def test_hand_example(self):
        s = score_query_agnostic([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        np.testing.assert_allclose(s, [-1, -1, 1])
        assert select_retained(s, 1).tolist() == [2]

    def test_identical_keys(self):
        np.testing.assert_allclose(score_query_agnostic(np.full((4, 3), 2.0)), -np.ones(4))

    def test_zero_norm_flagged(self):
        s, bad = score_query_agnostic([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]], with_diagnostics=True)
        assert bad.tolist() == [0] and s[0] == 0.0

    def test_zero_mean_is_neutral(self):
        s, bad = score_query_agnostic([[1.0, 0.0], [-1.0, 0.0]], with_diagnostics=True)
        assert s.tolist() == [0.0, 0.0] and bad.tolist() == [0, 1]

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_rotation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        K = rng.normal(size=(15, 4)) + 1.0
        R = random_orthogonal(rng, 4)
        np.testing.assert_allclose(score_query_agnostic(K @ R), score_query_agnostic(K), atol=1e-12)


class TestSelectRetained:
    def test_budget_covers_all(self):
        assert select_retained([0.3, 0.1], 5).tolist() == [0, 1]

    def test_argtop(self):
        assert select_retained([0.1, 0.5, 0.3], 2).tolist() == [1, 2]

    def test_tie_prefers_earlier(self):
        assert select_retained([0.4, 0.4, 0.4], 2).tolist() == [0, 1]

    def test_protected_kept(self):
        assert select_retained([0.9, 0.1, 0.8, 0.2], 2, [1]).tolist() == [0, 1]

    def test_too_many_protected(self):
        with pytest.raises(InvalidConfiguration):
            select_retained([1, 2, 3], 1, [0, 1])

    @settings(max_examples=300, deadline=None)
    @given(scores=st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=1, max_size=12), data=st.data())
    def test_matches_enumeration(self, scores, data):
        n = len(scores)
        M = data.draw(st.integers(1, n + 2))
        prot = data.draw(st.sets(st.integers(0, n - 1), max_size=min(M, n)))
        got = select_retained(scores, M, sorted(prot)).tolist()
        # exhaustive: among subsets of size min(M, n) containing prot, pick the best by
        # (total score, then lexicographically smallest index tuple)
        k = min(M, n)
        best = None
        for combo in itertools.combinations(range(n), k):
            if not prot <= set(combo):
                continue
            ranked = sorted((scores[i], -i) for i in combo if i not in prot)
            key = [(-s, -ni) for s, ni in sorted(ranked, reverse=True)]
            if best is None or key < best[0]:
                best = (key, list(combo))
        assert got == best[1]
        assert len(got) == k and prot <= set(got)


class TestOracles:
    def test_query_aware_matches_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(300):
            n, d = int(rng.integers(1, 65)), int(rng.integers(1, 9))
            K, Q = rng.normal(size=(n, d)), rng.normal(size=(int(rng.integers(1, 5)), d))
            K[rng.integers(0, n, size=n // 3)] = K[0]  # duplicate keys tie exactly
            M = int(rng.integers(1, n + 1))
            assert select_retained(score_query_aware(Q, K), M).tolist() == brute_topk(brute_mass(Q, K), M)

    def test_query_agnostic_matches_brute_force(self):
        rng = np.random.default_rng(321)
        for _ in range(300):
            n, d = int(rng.integers(1, 65)), int(rng.integers(1, 9))
            K = rng.integers(-2, 3, size=(n, d)).astype(float)  # integer grid forces ties
            M = int(rng.integers(1, n + 1))
            ref = brute_neg_cosine(K)
            np.testing.assert_allclose(score_query_agnostic(K), ref, atol=1e-12)
            assert select_retained(score_query_agnostic(K), M).tolist() == brute_topk(exact_neg_cosine_key(K), M)


class TestRandomPolicy:
    def test_deterministic_per_round(self):
        p = EvictionPolicy("random", 7)
        a = p.score(np.zeros((10, 2)), layer=1, head=0, round_=3)
        assert np.array_equal(a, p.score(np.zeros((10, 2)), layer=1, head=0, round_=3))
        assert not np.array_equal(a, p.score(np.zeros((10, 2)), layer=1, head=0, round_=4))

    def test_aliases(self):
        assert EvictionPolicy("snapkv").kind == "query_aware"
        assert EvictionPolicy("keydiff").kind == "query_agnostic"
        with pytest.raises(InvalidConfiguration):
            EvictionPolicy("lru")

    def test_query_aware_needs_proxy(self):
        with pytest.raises(InvalidConfiguration):
            EvictionPolicy("snapkv").score(np.ones((3, 2)), None)


class TestPlanBudgets:
    def test_static(self):
        assert plan_budgets("static", 4, 1024).per_layer == (1024,) * 4

    def test_equal_entropies_match_static(self):
        assert plan_budgets("dynamic", 3, 100, [2.0, 2.0, 2.0]).per_layer == (100, 100, 100)

    def test_proportional(self):
        assert plan_budgets("dynamic", 2, 100, [1.0, 3.0], floor=10).per_layer == (50, 150)

    def test_floor_redistributes(self):
        # raw split 4, 196 -> first layer lifted to 10, remainder 190 to the other
        assert plan_budgets("dynamic", 2, 100, [0.02, 0.98], floor=10).per_layer == (10, 190)

    def test_dynamic_needs_stats(self):
        with pytest.raises(InvalidConfiguration):
            plan_budgets("dynamic", 2, 100)

    @settings(max_examples=200, deadline=None)
    @given(stats=st.lists(st.floats(0, 10), min_size=1, max_size=6), M=st.integers(8, 500),
           floor=st.integers(1, 8))
    def test_dynamic_conserves_total(self, stats, M, floor):
        plan = plan_budgets("dynamic", len(stats), M, stats, floor=floor)
        assert sum(plan.per_layer) == len(stats) * M
        assert min(plan.per_layer) >= floor


def test_attention_entropy():
    assert attention_entropy(np.array([[0.5, 0.5], [1.0, 0.0]])) == pytest.approx(math.log(2) / 2)
