import math

import numpy as np
import pytest

from blockattn.attention import (
	AttentionState,
	HeadConfig,
	ScaleFreeState,
	attention_state,
	lse_of_scores,
	merge,
	merge_all,
	operational_intensity,
)

## ------ lse_of_scores ------ ##
def test_lse_of_empty_scores_is_neg_inf():
	assert lse_of_scores([]) == -math.inf

def test_lse_of_single_zero():
	assert lse_of_scores([0.0]) == 0.0

@pytest.mark.parametrize("a", [-50.0, 0.0, 3.5, 1000.0])
def test_lse_of_pair_adds_log_two(a):
	assert lse_of_scores([a, a]) == pytest.approx(a + math.log(2), abs=1e-12)

def test_lse_matches_direct_evaluation(rng):
	scores = rng.standard_normal(64)
	assert lse_of_scores(scores) == pytest.approx(math.log(np.exp(scores).sum()), abs=1e-12)

## ------ attention_state ------ ##
def test_single_orthogonal_pair_returns_value():
	q = np.array([1.0, 0.0])
	k = np.array([[0.0, 1.0]])
	v = np.array([[3.0, -2.0]])
	s = attention_state(q, k, v)
	np.testing.assert_array_equal(s.output, v[0])
	assert float(s.lse) == 0.0

def test_duplicate_pairs_add_log_two(rng):
	q = rng.standard_normal(4)
	k = np.tile(rng.standard_normal(4), (2, 1))
	v = np.tile(rng.standard_normal(4), (2, 1))
	s = attention_state(q, k, v)
	np.testing.assert_allclose(s.output, v[0], atol=1e-12)
	assert float(s.lse) == pytest.approx(float(q @ k[0]) + math.log(2), abs=1e-12)

def test_no_keys_gives_empty_state():
	s = attention_state(np.ones(3), np.zeros((0, 3)), np.zeros((0, 3)))
	assert s.is_empty
	np.testing.assert_array_equal(s.output, np.zeros(3))

def test_attention_state_matches_brute_force(rng):
	q = rng.standard_normal(16)
	k = rng.standard_normal((8, 16))
	v = rng.standard_normal((8, 16))
	scores = k @ q
	weights = np.exp(scores) / np.exp(scores).sum()
	s = attention_state(q, k, v)
	np.testing.assert_allclose(s.output, weights @ v, atol=1e-12)
	assert float(s.lse) == pytest.approx(math.log(np.exp(scores).sum()), abs=1e-12)

def test_attention_state_rejects_dim_mismatch():
	with pytest.raises(ValueError):
		attention_state(np.ones(3), np.ones((2, 4)), np.ones((2, 4)))
	with pytest.raises(ValueError):
		attention_state(np.ones(3), np.ones((2, 3)), np.ones((3, 3)))

## ------ merge ------ ##
def test_merge_with_empty_is_bit_exact(make_state):
	s = make_state(dim=8, rows=(5,))
	empty = AttentionState.empty(8, rows=(5,), dtype=np.float64)
	for merged in (merge(empty, s), merge(s, empty)):
		np.testing.assert_array_equal(merged.output, s.output)
		np.testing.assert_array_equal(merged.lse, s.lse)

def test_merge_of_two_empties_stays_empty():
	e = AttentionState.empty(4, rows=(3,), dtype=np.float64)
	m = merge(e, e)
	assert np.all(m.is_empty)
	np.testing.assert_array_equal(m.output, np.zeros((3, 4)))

def test_merge_with_itself_adds_log_two(make_state):
	s = make_state(rows=(4,))
	m = merge(s, s)
	np.testing.assert_allclose(m.output, s.output, atol=1e-12)
	np.testing.assert_allclose(m.lse, s.lse + math.log(2), atol=1e-12)

def test_merge_is_commutative_and_associative(make_state):
	for _ in range(200):
		a, b, c = (make_state(rows=(3,)) for _ in range(3))
		ab, ba = merge(a, b), merge(b, a)
		np.testing.assert_allclose(ab.output, ba.output, atol=1e-12)
		np.testing.assert_allclose(ab.lse, ba.lse, atol=1e-12)
		left = merge(merge(a, b), c)
		right = merge(a, merge(b, c))
		np.testing.assert_allclose(left.output, right.output, atol=1e-12)
		np.testing.assert_allclose(left.lse, right.lse, atol=1e-12)

def test_merge_is_commutative_in_single_precision(make_state):
	for _ in range(100):
		a, b = make_state(rows=(3,)), make_state(rows=(3,))
		a32 = AttentionState(a.output.astype(np.float32), a.lse.astype(np.float32))
		b32 = AttentionState(b.output.astype(np.float32), b.lse.astype(np.float32))
		ab, ba = merge(a32, b32), merge(b32, a32)
		assert ab.output.dtype == np.float32
		np.testing.assert_allclose(ab.output, ba.output, atol=1e-5)

def test_merge_of_disjoint_sets_equals_union(rng):
	q = rng.standard_normal(8)
	k = rng.standard_normal((20, 8))
	v = rng.standard_normal((20, 8))
	for split in (1, 7, 19):
		m = merge(attention_state(q, k[:split], v[:split]), attention_state(q, k[split:], v[split:]))
		whole = attention_state(q, k, v)
		np.testing.assert_allclose(m.output, whole.output, atol=1e-12)
		assert float(m.lse) == pytest.approx(float(whole.lse), abs=1e-12)

def test_merge_survives_large_lse(rng):
	a = AttentionState(rng.standard_normal(4), np.float64(900.0))
	b = AttentionState(rng.standard_normal(4), np.float64(901.0))
	m = merge(a, b)
	assert np.all(np.isfinite(m.output))
	assert float(m.lse) == pytest.approx(901.0 + math.log1p(math.exp(-1.0)), abs=1e-12)

def test_merge_rejects_mismatched_states():
	with pytest.raises(ValueError):
		merge(AttentionState.empty(4, dtype=np.float64), AttentionState.empty(5, dtype=np.float64))
	with pytest.raises(ValueError):
		merge(AttentionState.empty(4), ScaleFreeState.empty(4))

def test_scale_free_merge_adds():
	a = ScaleFreeState(np.array([1.0, 2.0]))
	b = ScaleFreeState(np.array([0.5, -1.0]))
	np.testing.assert_array_equal(merge(a, b).output, [1.5, 1.0])
	np.testing.assert_array_equal(merge(a, ScaleFreeState.empty(2, dtype=np.float64)).output, a.output)

## ------ merge_all ------ ##
def test_merge_all_of_one_state_returns_it(make_state):
	s = make_state()
	assert merge_all([s]) is s

def test_merge_all_rejects_empty_list():
	with pytest.raises(ValueError):
		merge_all([])

def test_merge_all_of_single_key_states_equals_full_attention(rng):
	q = rng.standard_normal(8)
	k = rng.standard_normal((16, 8))
	v = rng.standard_normal((16, 8))
	parts = [attention_state(q, k[i:i+1], v[i:i+1]) for i in range(16)]
	whole = attention_state(q, k, v)
	folded = merge_all(parts)
	np.testing.assert_allclose(folded.output, whole.output, atol=1e-12)
	assert float(folded.lse) == pytest.approx(float(whole.lse), abs=1e-12)
	shuffled = merge_all([parts[i] for i in rng.permutation(16)])
	np.testing.assert_allclose(shuffled.output, whole.output, atol=1e-10)

def test_appending_a_key_increases_lse(rng):
	q = rng.standard_normal(4)
	k = rng.standard_normal((6, 4))
	v = rng.standard_normal((6, 4))
	lses = [float(attention_state(q, k[:n], v[:n]).lse) for n in range(7)]
	assert all(a < b for a, b in zip(lses, lses[1:]))

## ------ HeadConfig / intensity ------ ##
def test_head_config_group_size():
	cfg = HeadConfig(32, 8, 128)
	assert cfg.group_size == 4
	assert cfg.kv_head_of(13) == 3

def test_head_config_rejects_non_divisible_heads():
	with pytest.raises(ValueError):
		HeadConfig(6, 4, 64)

def test_operational_intensity():
	assert operational_intensity(2, 2) == pytest.approx(1.0)
	assert operational_intensity(1, 1024) == pytest.approx(1024 / 1025)
	assert operational_intensity(1, 1024, 8) == pytest.approx(8 * 1024 / 1025)
	with pytest.raises(ValueError):
		operational_intensity(0, 10)

## ------ Algebra at scale ------ ##
@pytest.mark.slow
def test_merge_algebra_at_scale(make_state, rng):
	# One case per row
	n = 10_000
	a, b, c = (make_state(rows=(n,)) for _ in range(3))
	empty_rows = rng.random(n) < 0.05
	a = AttentionState(np.where(empty_rows[:, None], 0.0, a.output), np.where(empty_rows, -np.inf, a.lse))
	e = AttentionState.empty(8, (n,), dtype=np.float64)

	ae, ea = merge(a, e), merge(e, a)
	for m in (ae, ea):
		np.testing.assert_array_equal(m.output, a.output)
		np.testing.assert_array_equal(m.lse, a.lse)
	ab, ba = merge(a, b), merge(b, a)
	np.testing.assert_allclose(ab.output, ba.output, atol=1e-12)
	np.testing.assert_allclose(ab.lse, ba.lse, atol=1e-12)
	left, right = merge(merge(a, b), c), merge(a, merge(b, c))
	np.testing.assert_allclose(left.output, right.output, atol=1e-12)
	np.testing.assert_allclose(left.lse, right.lse, atol=1e-12)

@pytest.mark.slow
def test_disjoint_union_at_scale():
	rng = np.random.default_rng(3)
	for _ in range(10_000):
		n = int(rng.integers(2, 12))
		q = rng.standard_normal(4)
		k = rng.standard_normal((n, 4)) * 2
		v = rng.standard_normal((n, 4))
		order = rng.permutation(n)
		split = int(rng.integers(1, n))
		left, right = order[:split], order[split:]
		m = merge(attention_state(q, k[left], v[left]), attention_state(q, k[right], v[right]))
		whole = attention_state(q, k, v)
		np.testing.assert_allclose(m.output, whole.output, atol=1e-12)
		assert float(m.lse) == pytest.approx(float(whole.lse), abs=1e-12)
