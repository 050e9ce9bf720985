"""Load-balanced planning.

Query tiles whose KV is long get split into chunks of at most L_kv tokens,
chunks are handed longest-first to the currently cheapest CTA queue, and
every split tile records the ordered list of partial-output slots its
chunks write. No atomics: contraction order is fixed by the plan, so equal
sequence lengths always give the same plan and the same bits.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from blockattn.attention import HeadConfig
from blockattn.config import Defaults
from blockattn.core.utils import fingerprint

logger = logging.getLogger(__name__)

# Slot value of a query tile written straight to the final output
DIRECT = -1
# Columns of the work item metadata section
WORK_ITEM_FIELDS = ("request", "q_tile", "kv_start", "kv_end", "slot")

@dataclass(frozen=True)
class WorkloadSpec:
	qo_lens: tuple[int, ...]
	kv_lens: tuple[int, ...]
	head: HeadConfig
	num_ctas: int = 1
	tile_size: int|None = None # None => select_tile_size
	alpha: float = Defaults.alpha
	beta: float = Defaults.beta
	kv_block_size: int = 1 # chunk boundaries stay multiples of this

	def __post_init__(self):
		qo = tuple(int(x) for x in self.qo_lens)
		kv = tuple(int(x) for x in self.kv_lens)
		if len(qo) != len(kv):
			raise ValueError(f"{len(qo)} query lengths vs {len(kv)} KV lengths")
		if any(x < 0 for x in qo + kv):
			raise ValueError("Sequence lengths must be nonnegative")
		if self.num_ctas < 1:
			raise ValueError(f"num_ctas must be positive, got {self.num_ctas}")
		if self.tile_size is not None and self.tile_size not in Defaults.tile_sizes:
			raise ValueError(f"tile_size {self.tile_size} not in {Defaults.tile_sizes}")
		if self.kv_block_size < 1:
			raise ValueError(f"kv_block_size must be positive, got {self.kv_block_size}")
		object.__setattr__(self, "qo_lens", qo)
		object.__setattr__(self, "kv_lens", kv)

	@property
	def batch_size(self) -> int:
		return len(self.qo_lens)

	@property
	def fused_qo_lens(self) -> tuple[int, ...]:
		"""Query lengths with the head group folded into the rows."""
		g = self.head.group_size
		return tuple(l * g for l in self.qo_lens)

	def fingerprint(self) -> str:
		return fingerprint(
			self.qo_lens, self.kv_lens, self.head, self.num_ctas,
			self.tile_size, self.alpha, self.beta, self.kv_block_size,
		)

@dataclass(frozen=True)
class WorkItem:
	request: int
	q_tile: int
	kv_start: int
	kv_end: int
	work_index: int
	slot: int = DIRECT

	@property
	def kv_len(self) -> int:
		return self.kv_end - self.kv_start

@dataclass(frozen=True)
class MergeEntry:
	"""Partial slots of one query tile in ascending chunk order; empty when DIRECT."""
	request: int
	q_tile: int
	slots: tuple[int, ...] = ()

	@property
	def is_direct(self) -> bool:
		return len(self.slots) == 0

@dataclass(frozen=True)
class Plan:
	fingerprint: str
	workload: WorkloadSpec
	tile_size: int
	kv_chunk_limit: int
	queues: tuple[tuple[WorkItem, ...], ...]
	merge_map: tuple[MergeEntry, ...]
	num_slots: int
	cta_costs: tuple[float, ...]
	section_offsets: Mapping[str, int] = field(default_factory=dict)

	@property
	def num_work_items(self) -> int:
		return sum(len(q) for q in self.queues)

	@property
	def makespan(self) -> float:
		return max(self.cta_costs)

	def items(self) -> list[WorkItem]:
		return [item for queue in self.queues for item in queue]

	def chunk_cost(self, item:WorkItem) -> float:
		return self.workload.alpha * self.tile_size + self.workload.beta * item.kv_len

	def to_metadata(self) -> dict[str, np.ndarray]:
		"""Flat int64 arrays in the layout of the workspace metadata sections."""
		items = self.items()
		work_items = np.asarray(
			[[it.request, it.q_tile, it.kv_start, it.kv_end, it.slot] for it in items],
			dtype=np.int64,
		).reshape(-1, len(WORK_ITEM_FIELDS))
		queue_indptr = np.concatenate([[0], np.cumsum([len(q) for q in self.queues])]).astype(np.int64)
		merge_indptr = np.concatenate([[0], np.cumsum([len(e.slots) for e in self.merge_map])]).astype(np.int64)
		merge_slots = np.asarray([s for e in self.merge_map for s in e.slots], dtype=np.int64)
		return {
			"work_items": work_items,
			"queue_indptr": queue_indptr,
			"merge_indptr": merge_indptr,
			"merge_slots": merge_slots,
		}

	def to_dict(self) -> dict[str, Any]:
		return {
			"fingerprint": self.fingerprint,
			"tile_size": self.tile_size,
			"kv_chunk_limit": self.kv_chunk_limit,
			"num_slots": self.num_slots,
			"cta_costs": list(self.cta_costs),
			"queues": [
				[{
					"request": it.request,
					"q_tile": it.q_tile,
					"kv_span": [it.kv_start, it.kv_end],
					"work_index": it.work_index,
					"slot": "DIRECT" if it.slot == DIRECT else it.slot,
				} for it in queue]
				for queue in self.queues
			],
			"merge_map": [
				{"request": e.request, "q_tile": e.q_tile, "slots": "DIRECT" if e.is_direct else list(e.slots)}
				for e in self.merge_map
			],
			"section_offsets": dict(self.section_offsets),
		}

## ------ Tile size and chunking ------ ##
def select_tile_size(workload:WorkloadSpec, candidates:Sequence[int]=Defaults.tile_sizes) -> int:
	"""Smallest candidate at least the mean fused query length, else the largest."""
	if workload.batch_size == 0:
		raise ValueError("Cannot select a tile size for an empty batch")
	average = float(np.mean(workload.fused_qo_lens))
	for size in sorted(candidates):
		if size >= average:
			return size
	return max(candidates)

def compute_kv_chunk_limit(workload:WorkloadSpec, tile_size:int|None=None) -> int:
	"""L_kv = ceil(sum_i ceil(l_qo(i) / T_q) * l_kv(i) / #CTA), at least 1."""
	tile = tile_size or workload.tile_size or select_tile_size(workload)
	total = sum(math.ceil(q / tile) * kv for q, kv in zip(workload.fused_qo_lens, workload.kv_lens))
	return max(1, math.ceil(total / workload.num_ctas))

def _chunk_starts(kv_len:int, limit:int) -> list[int]:
	return list(range(0, kv_len, limit)) or [0]

## ------ Plan ------ ##
def build_plan(workload:WorkloadSpec, section_offsets:Mapping[str, int]|None=None) -> Plan:
	"""
	Split, sort longest first (ties by work index) and greedily assign each chunk
	to the cheapest CTA (ties by lowest CTA id).
	"""
	tile = workload.tile_size or select_tile_size(workload)
	raw_limit = compute_kv_chunk_limit(workload, tile)
	# Rounded up to whole KV blocks so no block straddles two CTAs
	b_c = workload.kv_block_size
	limit = -(-raw_limit // b_c) * b_c

	work: list[WorkItem] = []
	merge_map: list[MergeEntry] = []
	next_slot = 0
	for rid, (l_qo, l_kv) in enumerate(zip(workload.fused_qo_lens, workload.kv_lens)):
		for t in range(math.ceil(l_qo / tile)):
			starts = _chunk_starts(l_kv, limit)
			split = len(starts) > 1
			slots = tuple(range(next_slot, next_slot + len(starts))) if split else ()
			next_slot += len(slots)
			for i, s in enumerate(starts):
				work.append(WorkItem(
					request=rid,
					q_tile=t,
					kv_start=s,
					kv_end=min(s + limit, l_kv),
					work_index=len(work),
					slot=slots[i] if split else DIRECT,
				))
			merge_map.append(MergeEntry(rid, t, slots))

	order = sorted(work, key=lambda w: (-w.kv_len, w.work_index))
	heap = [(0.0, c) for c in range(workload.num_ctas)]
	queues: list[list[WorkItem]] = [[] for _ in range(workload.num_ctas)]
	for item in order:
		cost, cta = heapq.heappop(heap)
		queues[cta].append(item)
		heapq.heappush(heap, (cost + workload.alpha * tile + workload.beta * item.kv_len, cta))
	cta_costs = [0.0] * workload.num_ctas
	for cost, cta in heap:
		cta_costs[cta] = cost

	plan = Plan(
		fingerprint=workload.fingerprint(),
		workload=workload,
		tile_size=tile,
		kv_chunk_limit=limit,
		queues=tuple(tuple(q) for q in queues),
		merge_map=tuple(merge_map),
		num_slots=next_slot,
		cta_costs=tuple(cta_costs),
		section_offsets=dict(section_offsets or {}),
	)
	logger.debug("Planned %d requests: T_q=%d L_kv=%d items=%d slots=%d makespan=%.1f",
		workload.batch_size, tile, limit, len(work), next_slot, plan.makespan)
	return plan

def baseline_schedule(workload:WorkloadSpec) -> tuple[float, ...]:
	"""
	Per-CTA cost of the no-split schedule: request i runs whole on CTA i mod #CTA.
	"""
	tile = workload.tile_size or select_tile_size(workload)
	costs = [0.0] * workload.num_ctas
	for rid, (l_qo, l_kv) in enumerate(zip(workload.fused_qo_lens, workload.kv_lens)):
		tiles = math.ceil(l_qo / tile)
		costs[rid % workload.num_ctas] += tiles * (workload.alpha * tile + workload.beta * l_kv)
	return tuple(costs)

## ------ Workspace ------ ##
@dataclass(frozen=True)
class WorkspaceBounds:
	"""Upper bounds a workspace is sized for; fixed for the engine's lifetime."""
	num_ctas: int
	tile_size: int
	num_qo_heads: int
	head_dim: int
	max_batch_size: int
	max_qo_tiles: int
	max_total_qo: int

	def __post_init__(self):
		for name, value in vars(self).items():
			if value < 1:
				raise ValueError(f"Workspace bound {name} must be positive, got {value}")

@dataclass(frozen=True)
class Section:
	name: str
	offset: int # bytes from the start of the buffer
	size: int # elements
	dtype: np.dtype

	@property
	def nbytes(self) -> int:
		return self.size * np.dtype(self.dtype).itemsize

@dataclass(frozen=True)
class WorkspaceLayout:
	bounds: WorkspaceBounds
	sections: tuple[Section, ...]
	nbytes: int

	def __getitem__(self, name:str) -> Section:
		for s in self.sections:
			if s.name == name:
				return s
		raise KeyError(name)

	@property
	def offsets(self) -> dict[str, int]:
		return {s.name: s.offset for s in self.sections}

	@property
	def slot_elements(self) -> int:
		"""T_q * H_qo * (D + 1): one partial output tile plus its lse."""
		b = self.bounds
		return b.tile_size * b.num_qo_heads * (b.head_dim + 1)

def estimate_workspace(bounds:WorkspaceBounds, dtype=np.float32, alignment:int=64) -> WorkspaceLayout:
	"""
	Section sizes from the bounds; the partial-output section holds
	2 * #CTA * T_q * H_qo * (D + 1) elements.
	"""
	index = np.dtype(np.int64)
	value = np.dtype(dtype)
	max_items = bounds.max_qo_tiles + 2 * bounds.num_ctas
	specs = [
		("work_items", max_items * len(WORK_ITEM_FIELDS), index),
		("queue_indptr", bounds.num_ctas + 1, index),
		("merge_indptr", bounds.max_qo_tiles + 1, index),
		("merge_slots", 2 * bounds.num_ctas, index),
		("partial", 2 * bounds.num_ctas * bounds.tile_size * bounds.num_qo_heads * (bounds.head_dim + 1), value),
		("scratch", bounds.max_total_qo * bounds.num_qo_heads * (bounds.head_dim + 1), value),
	]
	sections = []
	offset = 0
	for name, size, dt in specs:
		offset = -(-offset // alignment) * alignment
		section = Section(name, offset, size, dt)
		sections.append(section)
		offset += section.nbytes
	return WorkspaceLayout(bounds=bounds, sections=tuple(sections), nbytes=offset)
