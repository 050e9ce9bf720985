"""Plan/run engine.

`Engine.plan` turns sequence lengths into a load-balanced plan and loads its
metadata into the preallocated workspace; `Engine.run` executes the plan in
two stages. Stage one drains every CTA queue on a worker pool; each work
item streams its KV chunk through the variant and writes either the final
rows (DIRECT tiles) or a partial slot. Stage two contracts partial slots in
the order recorded by the plan.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blockattn.attention import (
	AttentionState,
	HeadConfig,
	IndexContext,
	KvTile,
	VariantSpec,
	apply_epilogue,
	builtin_vanilla,
	check_heads,
	merge_arrays,
	streaming_tile_attention,
)
from blockattn.attention.variants import identity
from blockattn.config import Defaults
from blockattn.core.utils import resolve_num_workers
from blockattn.layout import (
	BsrMatrix,
	ComposableFormat,
	RaggedTensor,
	RowPositions,
	fuse_head_groups,
	gather_tile,
)
from .scheduler import (
	DIRECT,
	Plan,
	WorkloadSpec,
	WorkspaceBounds,
	build_plan,
	estimate_workspace,
	select_tile_size,
)
from .workspace import PlanCache, Workspace

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class EngineBounds:
	"""Largest batch the engine is built for; sizes the workspace once."""
	max_batch_size: int
	max_total_qo: int
	max_total_kv: int
	num_ctas: int
	max_tile_size: int = max(Defaults.tile_sizes)

	def __post_init__(self):
		if self.max_tile_size not in Defaults.tile_sizes:
			raise ValueError(f"max_tile_size {self.max_tile_size} not in {Defaults.tile_sizes}")

@dataclass(frozen=True)
class PlanHandle:
	plan: Plan

	@property
	def fingerprint(self) -> str:
		return self.plan.fingerprint

@dataclass(frozen=True)
class CompositePlanHandle:
	"""One plan per part of a composable format, in part order."""
	parts: tuple[PlanHandle, ...]

class Engine:
	__slots__ = (
		"head", "bounds", "dtype", "num_workers", "alpha", "beta", "kv_tile_size",
		"layout", "workspace", "cache", "last_addresses",
	)

	def __init__(
		self,
		head:HeadConfig,
		bounds:EngineBounds,
		*,
		dtype=Defaults.engine_dtype,
		num_workers:int|None=None,
		plan_cache_size:int=Defaults.plan_cache_size,
		alpha:float=Defaults.alpha,
		beta:float=Defaults.beta,
		kv_tile_size:int=Defaults.kv_tile_size,
	):
		if kv_tile_size < 1:
			raise ValueError(f"kv_tile_size must be positive, got {kv_tile_size}")
		self.head = head
		self.bounds = bounds
		self.dtype = np.dtype(dtype)
		self.num_workers = resolve_num_workers(num_workers)
		self.alpha = alpha
		self.beta = beta
		self.kv_tile_size = kv_tile_size
		self.layout = estimate_workspace(
			WorkspaceBounds(
				num_ctas=bounds.num_ctas,
				tile_size=bounds.max_tile_size,
				num_qo_heads=head.num_qo_heads,
				head_dim=head.head_dim,
				max_batch_size=bounds.max_batch_size,
				max_qo_tiles=bounds.max_total_qo * head.group_size,
				max_total_qo=bounds.max_total_qo,
			),
			dtype=self.dtype,
		)
		self.workspace = Workspace(self.layout)
		self.cache = PlanCache(plan_cache_size)
		self.last_addresses: dict[str, int] = {}

	## ------ Public API ------ ##
	def plan(
		self,
		qo_lens:Sequence[int],
		kv_lens:Sequence[int],
		*,
		kv_block_size:int=1,
		tile_size:int|None=None,
	) -> PlanHandle:
		"""
		Plan a step from its sequence lengths. Equal lengths return the cached
		handle; either way the plan's metadata is loaded into the workspace.
		"""
		qo_lens = tuple(int(x) for x in qo_lens)
		kv_lens = tuple(int(x) for x in kv_lens)
		self._check_bounds(qo_lens, kv_lens)
		if tile_size is None:
			tile_size = self._select_tile_size(qo_lens)
		elif tile_size > self.bounds.max_tile_size:
			raise ValueError(f"tile_size {tile_size} exceeds the engine bound {self.bounds.max_tile_size}")
		workload = WorkloadSpec(
			qo_lens=qo_lens,
			kv_lens=kv_lens,
			head=self.head,
			num_ctas=self.bounds.num_ctas,
			tile_size=tile_size,
			alpha=self.alpha,
			beta=self.beta,
			kv_block_size=kv_block_size,
		)
		key = workload.fingerprint()
		handle = self.cache.get(key)
		if handle is None:
			handle = PlanHandle(build_plan(workload, self.layout.offsets))
			self.cache.put(key, handle)
		else:
			logger.debug("Plan cache hit %s", key[:12])
		self.workspace.write_metadata(handle.plan)
		return handle

	def plan_for(self, kv:BsrMatrix|ComposableFormat) -> PlanHandle|CompositePlanHandle:
		"""Plan from the lengths a KV layout implies."""
		match kv:
			case ComposableFormat():
				return CompositePlanHandle(tuple(self.plan_for(part.bsr) for part in kv.parts))
			case BsrMatrix():
				return self.plan(
					np.diff(kv.qo_indptr()),
					kv.request_kv_lengths(),
					kv_block_size=kv.block_cols,
				)
			case _:
				raise ValueError(f"Cannot plan for {type(kv).__name__}")

	def run(
		self,
		handle:PlanHandle|CompositePlanHandle,
		q:RaggedTensor,
		kv:BsrMatrix|ComposableFormat,
		variant:VariantSpec|None=None,
		*,
		return_lse:bool=False,
	) -> RaggedTensor|tuple[RaggedTensor, np.ndarray]:
		"""Attention of ragged queries (sum l_qo, H_qo, D) over a planned KV layout.

		Args:
			handle: From `plan`/`plan_for` with the lengths of `kv`.
			q: Queries, one ragged entry per request (per row for composable formats).
			kv: A BSR matrix, or a composable format whose parts are merged per row.
			variant: Defaults to vanilla softmax attention.
			return_lse: Also return the (sum l_qo, H_qo) log-sum-exp.

		Returns:
			Output with the shape and indptr of `q`, plus the lse when requested.
		"""
		variant = variant or builtin_vanilla()
		check_heads(variant, self.head.num_qo_heads)
		data = np.asarray(q.data)
		if data.ndim != 3 or data.shape[1:] != (self.head.num_qo_heads, self.head.head_dim):
			raise ValueError(
				f"Query shape {data.shape} does not match {self.head.num_qo_heads} heads of dim {self.head.head_dim}"
			)
		data = data.astype(self.dtype, copy=False)

		match kv:
			case ComposableFormat():
				if not isinstance(handle, CompositePlanHandle) or len(handle.parts) != len(kv.parts):
					raise ValueError("A composable format needs a composite handle with one plan per part")
				if q.total_rows != kv.num_rows:
					raise ValueError(f"{q.total_rows} query rows for a format of {kv.num_rows} rows")
				rows = kv.num_rows
				positions = RowPositions(
					request=np.arange(rows),
					qo_idx=np.zeros(rows, dtype=np.int64),
					qo_len=np.ones(rows, dtype=np.int64),
					kv_len=np.asarray(kv.kv_lens, dtype=np.int64),
					kv_offset=np.zeros(rows, dtype=np.int64),
				)
				out, lse = self._run_composable(handle, data, kv, variant)
			case BsrMatrix():
				if not isinstance(handle, PlanHandle):
					raise ValueError("A BSR matrix needs a single plan handle")
				if not np.array_equal(q.indptr, kv.qo_indptr()):
					raise ValueError(f"Query indptr {q.indptr.tolist()} does not match the KV layout's query rows")
				positions = RowPositions.from_bsr(kv)
				out, lse = self._run_part(handle, data, kv, positions, variant)
			case _:
				raise ValueError(f"Cannot run over {type(kv).__name__}")

		out = self._epilogue(variant, out, positions)
		if not variant.use_softmax:
			lse = np.zeros_like(lse)
		self.last_addresses = self.workspace.addresses()
		result = RaggedTensor(out, q.indptr)
		return (result, lse) if return_lse else result

	## ------ Internal ------ ##
	def _check_bounds(self, qo_lens:tuple[int, ...], kv_lens:tuple[int, ...]) -> None:
		b = self.bounds
		if len(qo_lens) > b.max_batch_size:
			raise ValueError(f"Batch of {len(qo_lens)} exceeds max_batch_size={b.max_batch_size}")
		if sum(qo_lens) > b.max_total_qo:
			raise ValueError(f"{sum(qo_lens)} query rows exceed max_total_qo={b.max_total_qo}")
		if sum(kv_lens) > b.max_total_kv:
			raise ValueError(f"{sum(kv_lens)} KV tokens exceed max_total_kv={b.max_total_kv}")

	def _select_tile_size(self, qo_lens:tuple[int, ...]) -> int:
		if not qo_lens:
			return min(Defaults.tile_sizes)
		sizing = WorkloadSpec(qo_lens, (0,) * len(qo_lens), self.head)
		allowed = [t for t in Defaults.tile_sizes if t <= self.bounds.max_tile_size]
		return select_tile_size(sizing, allowed)

	def _activate(self, plan:Plan) -> dict[str, np.ndarray]:
		if self.workspace.active != plan.fingerprint:
			logger.debug("Reloading metadata of plan %s", plan.fingerprint[:12])
			self.workspace.write_metadata(plan)
		return self.workspace.read_metadata()

	def _run_composable(
		self,
		handle:CompositePlanHandle,
		data:np.ndarray,
		kv:ComposableFormat,
		variant:VariantSpec,
	) -> tuple[np.ndarray, np.ndarray]:
		acc_out, acc_lse = self.workspace.scratch(kv.num_rows)
		acc_out[:] = 0
		acc_lse[:] = -np.inf if variant.use_softmax else 0
		for part, part_handle in zip(kv.parts, handle.parts):
			rows = part.query_rows
			out, lse = self._run_part(part_handle, data[rows], part.bsr, part.positions, variant)
			if variant.use_softmax:
				acc_out[rows], acc_lse[rows] = merge_arrays(acc_out[rows], acc_lse[rows], out, lse)
			else:
				acc_out[rows] += out
		return acc_out.copy(), acc_lse.copy()

	def _run_part(
		self,
		handle:PlanHandle,
		data:np.ndarray,
		bsr:BsrMatrix,
		positions:RowPositions,
		variant:VariantSpec,
	) -> tuple[np.ndarray, np.ndarray]:
		plan = handle.plan
		qo_indptr = bsr.qo_indptr()
		workload = plan.workload
		if workload.qo_lens != tuple(np.diff(qo_indptr).tolist()) or workload.kv_lens != tuple(bsr.request_kv_lengths().tolist()):
			raise ValueError("KV layout does not match the sequence lengths the plan was built for")
		meta = self._activate(plan)

		fused, fmap = fuse_head_groups(RaggedTensor(data, qo_indptr), self.head)
		heads, dim = self.head.num_kv_heads, self.head.head_dim
		final_out = np.zeros((fused.total_rows, heads, dim), dtype=self.dtype)
		final_lse = np.full((fused.total_rows, heads), -np.inf if variant.use_softmax else 0, dtype=self.dtype)
		tile_rows = _tile_rows(plan, fused.indptr)

		self.workspace.reset_slots()
		queue_indptr = meta["queue_indptr"]
		queues = [meta["work_items"][queue_indptr[c]:queue_indptr[c+1]] for c in range(len(queue_indptr) - 1)]
		with ThreadPoolExecutor(max_workers=self.num_workers) as pool:
			futures = [
				pool.submit(self._drain_queue, items, plan, bsr, positions, fused, fmap, final_out, final_lse, variant)
				for items in queues if len(items)
			]
			for f in futures:
				f.result()

		contraction(self.workspace, meta["merge_indptr"], meta["merge_slots"], tile_rows,
			final_out, final_lse, use_softmax=variant.use_softmax)
		return fmap.scatter(final_out), fmap.scatter(final_lse)

	def _drain_queue(self, items, plan, bsr, positions, fused, fmap, final_out, final_lse, variant) -> None:
		for item in items:
			self._execute(item, plan, bsr, positions, fused, fmap, final_out, final_lse, variant)

	def _execute(
		self,
		item:np.ndarray,
		plan:Plan,
		bsr:BsrMatrix,
		positions:RowPositions,
		fused:RaggedTensor,
		fmap,
		final_out:np.ndarray,
		final_lse:np.ndarray,
		variant:VariantSpec,
	) -> None:
		request, q_tile, kv_start, kv_end, slot = (int(x) for x in item)
		start = int(fused.indptr[request])
		lo = start + q_tile * plan.tile_size
		hi = min(lo + plan.tile_size, int(fused.indptr[request+1]))
		local = np.arange(lo, hi) - start
		rows = int(bsr.qo_indptr()[request]) + fmap.row_of(local)

		row_block = bsr.request_blocks(request)[0]
		offset = int(positions.kv_offset[request])
		tiles = []
		for s in range(kv_start, kv_end, self.kv_tile_size):
			t = gather_tile(bsr, row_block, (s, min(s + self.kv_tile_size, kv_end)))
			tiles.append(KvTile(
				t.keys.astype(self.dtype, copy=False),
				t.values.astype(self.dtype, copy=False),
				t.kv_idx + offset,
			))

		if slot == DIRECT:
			out_view, lse_view = final_out[lo:hi], final_lse[lo:hi]
		else:
			out_view, lse_view = self.workspace.partial_slot(slot, hi - lo, self.head.num_kv_heads)
		for h in range(self.head.num_kv_heads):
			ctx = IndexContext(
				request_id=_uniform(positions.request[rows]),
				qo_idx=positions.qo_idx[rows].reshape(-1, 1),
				kv_idx=np.zeros((1, 0), dtype=np.int64),
				qo_head=fmap.qo_head(local, h).reshape(-1, 1),
				kv_head=h,
				qo_len=_uniform(positions.qo_len[rows]),
				kv_len=_uniform(positions.kv_len[rows]),
			)
			state = streaming_tile_attention(fused.data[lo:hi, h], [t.head(h) for t in tiles], variant, ctx)
			out_view[:, h] = state.output
			lse_view[:, h] = state.lse if isinstance(state, AttentionState) else 0

	def _epilogue(self, variant:VariantSpec, out:np.ndarray, positions:RowPositions) -> np.ndarray:
		if variant.output_transform is identity:
			return out
		g = self.head.group_size
		for h in range(self.head.num_qo_heads):
			ctx = IndexContext(
				request_id=positions.request.reshape(-1, 1),
				qo_idx=positions.qo_idx.reshape(-1, 1),
				kv_idx=np.zeros((1, 0), dtype=np.int64),
				qo_head=h,
				kv_head=h // g,
				qo_len=positions.qo_len.reshape(-1, 1),
				kv_len=positions.kv_len.reshape(-1, 1),
			)
			out[:, h] = apply_epilogue(variant, out[:, h], ctx)
		return out

## ------ Contraction ------ ##
def contraction(
	workspace:Workspace,
	merge_indptr:np.ndarray,
	merge_slots:np.ndarray,
	tile_rows:np.ndarray,
	final_out:np.ndarray,
	final_lse:np.ndarray,
	*,
	use_softmax:bool=True,
) -> int:
	"""
	Fold the partial slots of every split query tile left to right and write
	the result to the tile's final rows. DIRECT tiles have no slots and are
	left alone. Returns the number of tiles contracted.
	"""
	heads = final_out.shape[1]
	contracted = 0
	for t in range(len(merge_indptr) - 1):
		slots = merge_slots[merge_indptr[t]:merge_indptr[t+1]]
		if slots.size == 0:
			continue
		lo, hi = (int(x) for x in tile_rows[t])
		out, lse = workspace.read_slot(int(slots[0]), hi - lo, heads)
		out, lse = out.copy(), lse.copy()
		for s in slots[1:]:
			o, l = workspace.read_slot(int(s), hi - lo, heads)
			if use_softmax:
				out, lse = merge_arrays(out, lse, o, l)
			else:
				out = out + o
		final_out[lo:hi] = out
		final_lse[lo:hi] = lse if use_softmax else 0
		contracted += 1
	return contracted

def _tile_rows(plan:Plan, fused_indptr:np.ndarray) -> np.ndarray:
	"""[lo, hi) fused rows of every query tile, in merge map order."""
	spans = np.zeros((len(plan.merge_map), 2), dtype=np.int64)
	for i, entry in enumerate(plan.merge_map):
		lo = int(fused_indptr[entry.request]) + entry.q_tile * plan.tile_size
		spans[i] = lo, min(lo + plan.tile_size, int(fused_indptr[entry.request+1]))
	return spans

def _uniform(values:np.ndarray) -> np.ndarray|int:
	"""A scalar when every query row agrees, else a (T, 1) column."""
	if values.size and np.all(values == values[0]):
		return int(values[0])
	return values.reshape(-1, 1)
