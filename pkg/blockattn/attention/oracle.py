"""Brute-force reference attention.

Materializes the full score matrix per request and head in double
precision and applies every hook of the variant. Ground truth for the
equivalence checks of the engine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .state import HeadConfig
from .variants import VariantSpec, IndexContext, apply_pipeline, apply_epilogue, check_heads

@dataclass(frozen=True)
class OracleResult:
	output: np.ndarray # (sum l_qo, H_qo, D)
	lse: np.ndarray # (sum l_qo, H_qo), zeros for softmax-free variants

def oracle_attention(
	qo_indptr:np.ndarray,
	kv_indptr:np.ndarray,
	head:HeadConfig,
	q:np.ndarray,
	k:np.ndarray,
	v:np.ndarray,
	variant:VariantSpec,
	kv_positions:np.ndarray|None=None,
	dtype=np.float64,
) -> OracleResult:
	"""Dense attention over ragged inputs.

	Args:
		qo_indptr: Query row offsets per request.
		kv_indptr: KV row offsets per request.
		head: Head configuration; KV head of query head h is h // g.
		q: (sum l_qo, H_qo, D) queries.
		k: (sum l_kv, H_kv, D) keys.
		v: Values, same shape as `k`.
		variant: -
		kv_positions: Optional absolute KV index of every packed KV row; defaults
			to the row's offset within its request. Lets callers feed KV in any order.
		dtype: Evaluation precision.
	"""
	qo_indptr = np.asarray(qo_indptr); kv_indptr = np.asarray(kv_indptr)
	check_heads(variant, head.num_qo_heads)
	if qo_indptr.shape != kv_indptr.shape:
		raise ValueError(f"Batch sizes differ: {qo_indptr.shape[0]-1} query vs {kv_indptr.shape[0]-1} KV requests")
	if q.shape != (qo_indptr[-1], head.num_qo_heads, head.head_dim):
		raise ValueError(f"Query shape {q.shape} does not match indptr/heads")
	expected_kv = (kv_indptr[-1], head.num_kv_heads, head.head_dim)
	if k.shape != expected_kv or v.shape != expected_kv:
		raise ValueError(f"KV shapes {k.shape}/{v.shape}, expected {expected_kv}")

	q = q.astype(dtype); k = k.astype(dtype); v = v.astype(dtype)
	out = np.zeros(q.shape, dtype=dtype)
	lse = np.zeros(q.shape[:2], dtype=dtype)
	g = head.group_size

	for rid in range(len(qo_indptr) - 1):
		q0, q1 = qo_indptr[rid], qo_indptr[rid+1]
		k0, k1 = kv_indptr[rid], kv_indptr[rid+1]
		l_qo, l_kv = q1 - q0, k1 - k0
		if l_qo == 0:
			continue
		if kv_positions is None:
			positions = np.arange(l_kv)
		else:
			positions = np.asarray(kv_positions[k0:k1])
		for h in range(head.num_qo_heads):
			kv_head = h // g
			ctx = IndexContext(
				request_id=rid,
				qo_idx=np.arange(l_qo).reshape(-1, 1),
				kv_idx=positions.reshape(1, -1),
				qo_head=h,
				kv_head=kv_head,
				qo_len=l_qo,
				kv_len=l_kv,
			)
			scored = apply_pipeline(variant, q[q0:q1, h], k[k0:k1, kv_head], v[k0:k1, kv_head], ctx)
			if variant.use_softmax:
				logits = np.where(scored.keep, scored.logits, -np.inf)
				row_max = logits.max(axis=1, initial=-np.inf)
				shift = np.where(np.isneginf(row_max), 0, row_max)
				weights = np.exp(logits - shift[:, None])
				total = weights.sum(axis=1)
				with np.errstate(divide="ignore", invalid="ignore"):
					o = np.where(total[:, None] > 0, (weights @ scored.values) / total[:, None], 0)
					lse[q0:q1, h] = shift + np.log(total)
			else:
				o = np.where(scored.keep, scored.logits, 0) @ scored.values
			out[q0:q1, h] = apply_epilogue(variant, o, ctx)
	return OracleResult(out, lse)
