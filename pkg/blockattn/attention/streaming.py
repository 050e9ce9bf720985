"""Single pass online-softmax attention over a sequence of KV tiles."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .state import AttentionState, ScaleFreeState
from .variants import VariantSpec, IndexContext, transform_query, score_tile

@dataclass(frozen=True)
class KvTile:
	"""Contiguous key/value rows plus their absolute KV indices.

	Rows are (N, D) for one KV head, or (N, H_kv, D) straight out of a gather.
	"""
	keys: np.ndarray
	values: np.ndarray
	kv_idx: np.ndarray

	def __len__(self) -> int:
		return self.keys.shape[0]

	def head(self, kv_head:int) -> "KvTile":
		return KvTile(self.keys[:, kv_head], self.values[:, kv_head], self.kv_idx)

def streaming_tile_attention(
	q_tile:np.ndarray,
	kv_tiles:Iterable[KvTile],
	variant:VariantSpec,
	ctx:IndexContext,
) -> AttentionState|ScaleFreeState:
	"""Attention of a (T, D) query tile over KV streamed tile by tile.

	Keeps a running max, running denominator and unnormalized output per row.
	Masked pairs are skipped rather than pushed through -inf arithmetic, so a
	fully masked tile leaves the running values untouched. The result is the
	pre-epilogue state; the output transform runs after all merging.

	Args:
		q_tile: Raw queries, the variant's query transform is applied here.
		kv_tiles: Tiles in KV order.
		variant: -
		ctx: Query-side indices; each tile substitutes its own `kv_idx`.

	Returns:
		A per-row `AttentionState`, or `ScaleFreeState` when softmax is off.
	"""
	q_tile = np.asarray(q_tile)
	if q_tile.ndim != 2:
		raise ValueError(f"Query tile must be T x D, got shape {q_tile.shape}")
	rows, dim = q_tile.shape
	dtype = q_tile.dtype
	q = transform_query(variant, q_tile, ctx)

	acc = np.zeros((rows, dim), dtype=dtype)
	if not variant.use_softmax:
		for tile in kv_tiles:
			if len(tile) == 0: continue
			scored = score_tile(variant, q, tile.keys, tile.values, ctx.with_kv(tile.kv_idx))
			weights = np.where(scored.keep, scored.logits, 0).astype(dtype, copy=False)
			acc += weights @ scored.values
		return ScaleFreeState(acc)

	row_max = np.full(rows, -np.inf, dtype=dtype)
	denom = np.zeros(rows, dtype=dtype)
	for tile in kv_tiles:
		if len(tile) == 0: continue
		scored = score_tile(variant, q, tile.keys, tile.values, ctx.with_kv(tile.kv_idx))
		logits = np.where(scored.keep, scored.logits, -np.inf).astype(dtype, copy=False)
		new_max = np.maximum(row_max, logits.max(axis=1))
		# Rows with nothing kept so far shift by 0
		shift = np.where(np.isneginf(new_max), 0, new_max)
		p = np.exp(logits - shift[:, None])
		rescale = np.exp(row_max - shift)
		denom = denom * rescale + p.sum(axis=1)
		acc = acc * rescale[:, None] + p @ scored.values
		row_max = new_max

	with np.errstate(divide="ignore", invalid="ignore"):
		output = np.where(denom[:, None] > 0, acc / denom[:, None], 0).astype(dtype, copy=False)
		lse = (np.where(np.isneginf(row_max), 0, row_max) + np.log(denom)).astype(dtype, copy=False)
	return AttentionState(output, lse)
