import math
from dataclasses import replace

import numpy as np
import pytest

from blockattn.attention import (
	HeadConfig,
	alibi_slopes,
	builtin_alibi,
	builtin_causal,
	builtin_fused_rope,
	builtin_sigmoid,
	builtin_sliding_window,
	builtin_softcap,
	builtin_vanilla,
	oracle_attention,
	with_causal,
)
from blockattn.core.utils import resolve_num_workers
from blockattn.layout import BsrMatrix, KvPool, RaggedTensor, bsr_from_ragged, decompose_shared_prefix
from blockattn.runtime import (
	CompositePlanHandle,
	Engine,
	EngineBounds,
	Workspace,
	WorkspaceBounds,
	contraction,
	estimate_workspace,
)

GQA = HeadConfig(8, 2, 16)

def _case(rng, qo, kv, head, dtype=np.float32, block_rows=4):
	def ragged(lengths, heads):
		data = rng.standard_normal((int(sum(lengths)), heads, head.head_dim)).astype(dtype)
		return RaggedTensor.from_lengths(data, lengths)
	q = ragged(qo, head.num_qo_heads)
	k = ragged(kv, head.num_kv_heads)
	v = ragged(kv, head.num_kv_heads)
	return q, k, v, bsr_from_ragged(k, v, qo, block_rows=block_rows)

def _engine(head, qo, kv, num_ctas, **kw):
	kw.setdefault("num_workers", 2)
	bounds = EngineBounds(
		max_batch_size=len(qo),
		max_total_qo=max(1, sum(qo)),
		max_total_kv=max(1, sum(kv)),
		num_ctas=num_ctas,
	)
	return Engine(head, bounds, **kw)

def _oracle(q, k, v, head, variant):
	return oracle_attention(q.indptr, k.indptr, head, q.data, k.data, v.data, variant)

VARIANTS = [
	builtin_vanilla(),
	builtin_causal(),
	builtin_softcap(30.0),
	builtin_sliding_window(7),
	builtin_alibi(alibi_slopes(8)),
	builtin_sigmoid(-2.0),
	builtin_fused_rope(),
]

## ------ Equivalence ------ ##
@pytest.mark.parametrize("variant", VARIANTS, ids=lambda v: v.name)
@pytest.mark.parametrize("num_ctas", [1, 4, 64])
def test_engine_matches_oracle(rng, variant, num_ctas):
	qo, kv = [1, 9, 3, 20], [40, 17, 150, 33]
	q, k, v, bsr = _case(rng, qo, kv, GQA)
	engine = _engine(GQA, qo, kv, num_ctas)
	out = engine.run(engine.plan_for(bsr), q, bsr, variant)
	np.testing.assert_array_equal(out.indptr, q.indptr)
	np.testing.assert_allclose(out.data, _oracle(q, k, v, GQA, variant).output, atol=1e-5, rtol=1e-5)

def test_double_precision_engine_matches_oracle_tightly(rng):
	qo, kv = [2, 5], [90, 31]
	head = HeadConfig(4, 1, 8)
	q, k, v, bsr = _case(rng, qo, kv, head, dtype=np.float64)
	engine = _engine(head, qo, kv, 8, dtype=np.float64)
	variant = builtin_causal()
	out = engine.run(engine.plan_for(bsr), q, bsr, variant)
	assert out.data.dtype == np.float64
	np.testing.assert_allclose(out.data, _oracle(q, k, v, head, variant).output, atol=1e-12)

def test_long_decode_split_four_ways(rng):
	head = HeadConfig(1, 1, 32)
	q, k, v, bsr = _case(rng, [1], [1000], head)
	engine = _engine(head, [1], [1000], 4)
	handle = engine.plan_for(bsr)
	assert handle.plan.merge_map[0].slots == (0, 1, 2, 3)
	out, lse = engine.run(handle, q, bsr, builtin_vanilla(), return_lse=True)
	ref = _oracle(q, k, v, head, builtin_vanilla())
	np.testing.assert_allclose(out.data, ref.output, atol=1e-5)
	np.testing.assert_allclose(lse, ref.lse, atol=1e-4, rtol=1e-5)

def test_split_and_unsplit_runs_agree(rng):
	qo, kv = [3, 1, 12], [300, 1, 64]
	q, k, v, bsr = _case(rng, qo, kv, GQA)
	outs = []
	for num_ctas in (1, 4, 64):
		engine = _engine(GQA, qo, kv, num_ctas)
		outs.append(engine.run(engine.plan_for(bsr), q, bsr, builtin_causal()).data)
	for other in outs[1:]:
		np.testing.assert_allclose(other, outs[0], atol=1e-5)

def test_outputs_are_bit_identical_across_worker_counts(rng):
	qo, kv = [4, 1, 7], [500, 260, 90]
	q, k, v, bsr = _case(rng, qo, kv, GQA)
	outs = []
	for workers in (1, 2, 8):
		engine = _engine(GQA, qo, kv, 16, num_workers=workers)
		outs.append(engine.run(engine.plan_for(bsr), q, bsr, builtin_softcap(20.0)).data)
	for other in outs[1:]:
		np.testing.assert_array_equal(other, outs[0])

def test_empty_kv_rows_are_zero(rng):
	head = HeadConfig(2, 2, 8)
	qo, kv = [2, 1], [0, 5]
	q, k, v, bsr = _case(rng, qo, kv, head)
	engine = _engine(head, qo, kv, 2)
	out, lse = engine.run(engine.plan_for(bsr), q, bsr, return_lse=True)
	np.testing.assert_array_equal(out.data[:2], np.zeros((2, 2, 8)))
	assert np.all(np.isneginf(lse[:2]))

def test_trailing_request_without_queries(rng):
	head = HeadConfig(2, 1, 8)
	qo, kv = [2, 0], [5, 3]
	q, k, v, bsr = _case(rng, qo, kv, head)
	assert bsr.num_requests == 2
	np.testing.assert_array_equal(bsr.qo_indptr(), [0, 2, 2])
	engine = _engine(head, qo, kv, 2)
	handle = engine.plan_for(bsr)
	assert handle.plan.workload.qo_lens == (2, 0)
	out = engine.run(handle, q, bsr, builtin_causal())
	np.testing.assert_array_equal(out.indptr, [0, 2, 2])
	np.testing.assert_allclose(out.data, _oracle(q, k, v, head, builtin_causal()).output, atol=1e-5)

def test_too_few_alibi_slopes_fail_before_running(rng):
	qo, kv = [1], [20]
	q, k, v, bsr = _case(rng, qo, kv, GQA)
	engine = _engine(GQA, qo, kv, 2)
	with pytest.raises(ValueError, match="slopes"):
		engine.run(engine.plan_for(bsr), q, bsr, builtin_alibi(alibi_slopes(4)))

## ------ Paged KV ------ ##
@pytest.mark.parametrize("page_size", [1, 2, 16])
@pytest.mark.parametrize("g", [1, 4])
def test_paged_kv_matches_oracle(page_size, g):
	from blockattn.bench import WorkloadProfile, generate_workload
	profile = WorkloadProfile(
		distribution="uniform", params={"lo": 5, "hi": 70}, batch_size=5, mode="prefill-causal",
		num_qo_heads=2 * g, num_kv_heads=2, head_dim=8, page_size=page_size, block_rows=8, seed=page_size,
	)
	w = generate_workload(profile)
	engine = _engine(w.head, w.qo_lens.tolist(), w.kv_lens.tolist(), 8)
	variant = with_causal(builtin_alibi(alibi_slopes(2 * g)))
	out = engine.run(engine.plan_for(w.kv), w.q, w.kv, variant)
	ref = _oracle(w.q, w.k, w.v, w.head, variant)
	np.testing.assert_allclose(out.data, ref.output, atol=1e-5, rtol=1e-5)

## ------ Composable ------ ##
def _shared_prefix_case(rng, head):
	tokens = 400
	keys = rng.standard_normal((tokens, 1, head.num_kv_heads, head.head_dim)).astype(np.float32)
	values = rng.standard_normal(keys.shape).astype(np.float32)
	pool = KvPool(keys, values)
	groups = [(range(0, 3), (0, 60)), (range(3, 6), (60, 150))]
	suffixes = [(150 + 40 * r, 150 + 40 * r + 5 * r + 1) for r in range(6)]
	fmt = decompose_shared_prefix(pool, groups, suffixes)
	q = RaggedTensor.from_lengths(rng.standard_normal((6, head.num_qo_heads, head.head_dim)).astype(np.float32), [1] * 6)
	return pool, fmt, q

@pytest.mark.parametrize("variant", [builtin_vanilla(), builtin_causal(), builtin_alibi(alibi_slopes(8)), builtin_sigmoid(0.5)],
	ids=lambda v: v.name)
def test_composable_matches_single_format(rng, variant):
	pool, fmt, q = _shared_prefix_case(rng, GQA)
	single = fmt.to_single_format()
	kv_lens = fmt.kv_lens.tolist()
	engine = _engine(GQA, [1] * 6, kv_lens, 4)
	composite = engine.plan_for(fmt)
	assert isinstance(composite, CompositePlanHandle) and len(composite.parts) == 2
	merged = engine.run(composite, q, fmt, variant)
	plain = engine.run(engine.plan_for(single), q, single, variant)
	np.testing.assert_allclose(merged.data, plain.data, atol=1e-5, rtol=1e-5)

	rows = [pool.keys[single.row_indices(r), 0] for r in range(6)]
	k = RaggedTensor.from_lengths(np.concatenate(rows), kv_lens)
	v = RaggedTensor.from_lengths(np.concatenate([pool.values[single.row_indices(r), 0] for r in range(6)]), kv_lens)
	np.testing.assert_allclose(merged.data, _oracle(q, k, v, GQA, variant).output, atol=1e-5, rtol=1e-5)

def test_composable_needs_composite_handle(rng):
	_, fmt, q = _shared_prefix_case(rng, GQA)
	engine = _engine(GQA, [1] * 6, fmt.kv_lens.tolist(), 4)
	single = fmt.to_single_format()
	with pytest.raises(ValueError):
		engine.run(engine.plan_for(single), q, fmt)

## ------ Plan/run contract ------ ##
def test_same_lengths_hit_the_plan_cache(rng):
	engine = _engine(GQA, [1, 1], [100, 100], 4)
	a = engine.plan([1, 1], [100, 100])
	b = engine.plan([1, 1], [100, 100])
	assert a is b
	assert engine.cache.hits == 1 and engine.cache.misses == 1
	c = engine.plan([1, 1], [100, 101])
	assert c.fingerprint != a.fingerprint

def test_plan_rejects_workloads_over_bounds():
	engine = _engine(GQA, [1, 1], [100, 100], 4)
	with pytest.raises(ValueError):
		engine.plan([1, 1, 1], [1, 1, 1])
	with pytest.raises(ValueError):
		engine.plan([1, 1], [100, 101])
	with pytest.raises(ValueError):
		engine.plan([3], [10])

def test_run_rejects_layout_that_does_not_match_plan(rng):
	qo, kv = [1, 1], [50, 60]
	q, k, v, bsr = _case(rng, qo, kv, GQA)
	engine = _engine(GQA, qo, kv, 2)
	handle = engine.plan([1, 1], [50, 59])
	with pytest.raises(ValueError):
		engine.run(handle, q, bsr)

def test_workspace_is_stable_across_decode_steps(rng):
	head = HeadConfig(4, 2, 8)
	engine = _engine(head, [1, 1, 1], [200, 200, 200], 8)
	offsets = engine.layout.offsets
	addresses = None
	for step in range(100):
		kv = [20 + step, 5 + 3 * step, 60 + step]
		q, k, v, bsr = _case(rng, [1, 1, 1], kv, head)
		out = engine.run(engine.plan_for(bsr), q, bsr)
		np.testing.assert_allclose(out.data, _oracle(q, k, v, head, builtin_vanilla()).output, atol=1e-5)
		assert engine.layout.offsets == offsets
		if addresses is None:
			addresses = dict(engine.last_addresses)
		assert engine.last_addresses == addresses

def test_one_handle_serves_many_layers(rng):
	qo, kv = [3, 1], [80, 210]
	engine = _engine(GQA, qo, kv, 8)
	handle = engine.plan(qo, kv)
	for _ in range(3):
		q, k, v, bsr = _case(rng, qo, kv, GQA)
		out = engine.run(handle, q, bsr, builtin_causal())
		np.testing.assert_allclose(out.data, _oracle(q, k, v, GQA, builtin_causal()).output, atol=1e-5, rtol=1e-5)

def test_other_plan_is_reloaded_before_run(rng):
	qo, kv = [1], [300]
	q, k, v, bsr = _case(rng, qo, kv, GQA)
	engine = _engine(GQA, qo, kv, 4)
	handle = engine.plan_for(bsr)
	engine.plan([1], [10])
	out = engine.run(handle, q, bsr)
	np.testing.assert_allclose(out.data, _oracle(q, k, v, GQA, builtin_vanilla()).output, atol=1e-5)
	assert engine.workspace.active == handle.fingerprint

## ------ Contraction ------ ##
def _workspace():
	return Workspace(estimate_workspace(WorkspaceBounds(2, 1, 1, 4, 1, 4, 4), dtype=np.float64))

def _write(ws, slot, output, lse):
	out, l = ws.partial_slot(slot, 1, 1)
	out[:] = output
	l[:] = lse

def test_contraction_of_one_slot_copies_it():
	ws = _workspace()
	_write(ws, 0, [1.0, 2.0, 3.0, 4.0], 0.7)
	final_out = np.zeros((1, 1, 4)); final_lse = np.full((1, 1), -np.inf)
	assert contraction(ws, np.array([0, 1]), np.array([0]), np.array([[0, 1]]), final_out, final_lse) == 1
	np.testing.assert_array_equal(final_out[0, 0], [1.0, 2.0, 3.0, 4.0])
	assert final_lse[0, 0] == 0.7

def test_contraction_of_equal_states_adds_log_k():
	ws = _workspace()
	for s in range(3):
		_write(ws, s, [1.0, -1.0, 0.5, 2.0], 0.2)
	final_out = np.zeros((1, 1, 4)); final_lse = np.zeros((1, 1))
	contraction(ws, np.array([0, 3]), np.array([0, 1, 2]), np.array([[0, 1]]), final_out, final_lse)
	np.testing.assert_allclose(final_out[0, 0], [1.0, -1.0, 0.5, 2.0], atol=1e-12)
	assert final_lse[0, 0] == pytest.approx(0.2 + math.log(3), abs=1e-12)

def test_contraction_of_scale_free_slots_adds():
	ws = _workspace()
	_write(ws, 0, [1.0, 1.0, 1.0, 1.0], 0)
	_write(ws, 1, [0.5, 0.0, -1.0, 2.0], 0)
	final_out = np.zeros((1, 1, 4)); final_lse = np.zeros((1, 1))
	contraction(ws, np.array([0, 2]), np.array([0, 1]), np.array([[0, 1]]), final_out, final_lse, use_softmax=False)
	np.testing.assert_array_equal(final_out[0, 0], [1.5, 1.0, 0.0, 3.0])

def test_contraction_rejects_unwritten_slot():
	ws = _workspace()
	_write(ws, 0, [1.0, 1.0, 1.0, 1.0], 0)
	ws.reset_slots()
	with pytest.raises(RuntimeError):
		contraction(ws, np.array([0, 1]), np.array([0]), np.array([[0, 1]]), np.zeros((1, 1, 4)), np.zeros((1, 1)))

def test_directs_skip_contraction():
	ws = _workspace()
	final_out = np.ones((2, 1, 4))
	assert contraction(ws, np.array([0, 0, 0]), np.zeros(0, dtype=np.int64), np.array([[0, 1], [1, 2]]),
		final_out, np.zeros((2, 1))) == 0
	np.testing.assert_array_equal(final_out, np.ones((2, 1, 4)))

## ------ Worker count ------ ##
def test_worker_count_resolution(monkeypatch):
	monkeypatch.setenv("BLOCKATTN_NUM_WORKERS", "3")
	assert resolve_num_workers() == 3
	assert resolve_num_workers(5) == 5
	monkeypatch.setenv("BLOCKATTN_NUM_WORKERS", "many")
	with pytest.raises(ValueError):
		resolve_num_workers()
	monkeypatch.delenv("BLOCKATTN_NUM_WORKERS")
	assert resolve_num_workers() >= 1
	with pytest.raises(ValueError):
		resolve_num_workers(0)

## ------ Masking vs deleting ------ ##
def _drop_positions(ctx, params):
	return ~np.isin(ctx.kv_idx, params["dropped"])

def test_masked_kv_equals_deleted_kv(rng):
	head = HeadConfig(2, 1, 8)
	qo, kv = [3, 1], [40, 25]
	dropped = np.array([0, 5, 6, 17, 33])
	q, k, v, full = _case(rng, qo, kv, head, dtype=np.float64)
	masked = replace(builtin_softcap(20.0), logits_mask=_drop_positions, params={"cap": 20.0, "dropped": dropped})

	# Same pool, row blocks without the dropped positions
	indptr, indices, positions = [0], [], []
	for rb in range(full.rows_blocks):
		keep = ~np.isin(np.arange(full.kv_len(rb)), dropped)
		indices.append(full.row_indices(rb)[keep])
		indptr.append(indptr[-1] + int(keep.sum()))
		positions.append(np.flatnonzero(keep))
	deleted = BsrMatrix(
		block_rows=full.block_rows,
		indptr=np.asarray(indptr),
		indices=np.concatenate(indices),
		last_block_len=np.ones(full.rows_blocks, dtype=np.int64),
		pool=full.pool,
		row_offsets=full.row_offsets,
		row_request=full.row_request,
		batch_size=full.num_requests,
	)

	engine = _engine(head, qo, kv, 4, dtype=np.float64)
	out_masked = engine.run(engine.plan_for(full), q, full, masked)
	out_deleted = engine.run(engine.plan_for(deleted), q, deleted, builtin_softcap(20.0))
	np.testing.assert_allclose(out_masked.data, out_deleted.data, atol=1e-12)

	kept_k = np.concatenate([k[r][p] for r, p in enumerate(positions)])
	kept_v = np.concatenate([v[r][p] for r, p in enumerate(positions)])
	kept_indptr = np.concatenate([[0], np.cumsum([len(p) for p in positions])])
	ref = oracle_attention(q.indptr, kept_indptr, head, q.data, kept_k, kept_v, masked,
		kv_positions=np.concatenate(positions))
	np.testing.assert_allclose(out_masked.data, ref.output, atol=1e-12)

## ------ Acceptance sweeps ------ ##
@pytest.mark.slow
def test_outputs_are_bit_identical_across_worker_counts_at_scale():
	rng = np.random.default_rng(5)
	for _ in range(50):
		batch = int(rng.integers(1, 6))
		head = HeadConfig(*[(2, 2), (4, 1), (8, 2)][int(rng.integers(3))], 8)
		qo = rng.integers(1, 12, size=batch).tolist()
		kv = rng.integers(1, 400, size=batch).tolist()
		q, k, v, bsr = _case(rng, qo, kv, head)
		num_ctas = int(rng.choice([1, 4, 16]))
		outs = []
		for workers in (1, 2, 8):
			engine = _engine(head, qo, kv, num_ctas, num_workers=workers)
			outs.append(engine.run(engine.plan_for(bsr), q, bsr, builtin_causal()).data)
		for other in outs[1:]:
			np.testing.assert_array_equal(other, outs[0])
