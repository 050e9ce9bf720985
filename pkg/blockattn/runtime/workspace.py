"""Preallocated workspace and plan cache.

One byte buffer is allocated per engine and carved into fixed sections
(`estimate_workspace`). Plans only ever write into those sections, so the
addresses kernels see never change between steps.
"""
from __future__ import annotations

import logging
from collections import OrderedDict

import numpy as np

from .scheduler import Plan, WorkspaceLayout, WORK_ITEM_FIELDS

logger = logging.getLogger(__name__)

class Workspace:
	__slots__ = ("layout", "buffer", "active", "_views", "_counts", "_written")

	def __init__(self, layout:WorkspaceLayout):
		self.layout = layout
		self.buffer = np.zeros(layout.nbytes, dtype=np.uint8)
		self.active: str|None = None # fingerprint of the plan whose metadata is loaded
		self._views = {
			s.name: self.buffer[s.offset:s.offset + s.nbytes].view(s.dtype)
			for s in layout.sections
		}
		self._counts: dict[str, int] = {}
		self._written = np.zeros(2 * layout.bounds.num_ctas, dtype=bool)
		logger.debug("Allocated workspace of %d bytes: %s", layout.nbytes, layout.offsets)

	## ------ Public API ------ ##
	def section(self, name:str) -> np.ndarray:
		try:
			return self._views[name]
		except KeyError:
			raise KeyError(f"Unknown workspace section {name!r}. Allowed: {list(self._views)}") from None

	def addresses(self) -> dict[str, int]:
		"""Data pointer of every section."""
		return {name: view.ctypes.data for name, view in self._views.items()}

	def write_metadata(self, plan:Plan) -> None:
		"""Copy a plan's index arrays into the metadata sections and make it active."""
		if plan.tile_size > self.layout.bounds.tile_size:
			raise ValueError(f"Plan tile size {plan.tile_size} exceeds the workspace bound {self.layout.bounds.tile_size}")
		for name, data in plan.to_metadata().items():
			flat = data.reshape(-1)
			view = self._views[name]
			if flat.size > view.size:
				raise ValueError(f"Plan needs {flat.size} entries in section {name!r}, capacity is {view.size}")
			view[:flat.size] = flat
			self._counts[name] = flat.size
		self.active = plan.fingerprint

	def read_metadata(self) -> dict[str, np.ndarray]:
		"""Views of the active plan's metadata."""
		if self.active is None:
			raise RuntimeError("No plan metadata loaded")
		out = {name: self._views[name][:count] for name, count in self._counts.items()}
		out["work_items"] = out["work_items"].reshape(-1, len(WORK_ITEM_FIELDS))
		return out

	def reset_slots(self) -> None:
		self._written[:] = False

	def partial_slot(self, slot:int, rows:int, heads:int) -> tuple[np.ndarray, np.ndarray]:
		"""(rows, heads, D) output and (rows, heads) lse views of one partial slot."""
		out, lse = self._slot_views(slot, rows, heads)
		self._written[slot] = True
		return out, lse

	def read_slot(self, slot:int, rows:int, heads:int) -> tuple[np.ndarray, np.ndarray]:
		if not self._written[slot]:
			raise RuntimeError(f"Partial slot {slot} read before any work item wrote it")
		return self._slot_views(slot, rows, heads)

	def scratch(self, rows:int) -> tuple[np.ndarray, np.ndarray]:
		"""(rows, H_qo, D) output and (rows, H_qo) lse accumulators."""
		b = self.layout.bounds
		if rows > b.max_total_qo:
			raise ValueError(f"{rows} query rows exceed the workspace bound {b.max_total_qo}")
		view = self._views["scratch"]
		n_out = rows * b.num_qo_heads * b.head_dim
		out = view[:n_out].reshape(rows, b.num_qo_heads, b.head_dim)
		lse = view[n_out:n_out + rows * b.num_qo_heads].reshape(rows, b.num_qo_heads)
		return out, lse

	## ------ Internal ------ ##
	def _slot_views(self, slot:int, rows:int, heads:int) -> tuple[np.ndarray, np.ndarray]:
		b = self.layout.bounds
		if not 0 <= slot < self._written.size:
			raise ValueError(f"Partial slot {slot} outside [0, {self._written.size})")
		if rows > b.tile_size or heads > b.num_qo_heads:
			raise ValueError(f"Slot tile {rows}x{heads} exceeds {b.tile_size}x{b.num_qo_heads}")
		view = self._views["partial"]
		base = slot * self.layout.slot_elements
		lse_base = base + b.tile_size * b.num_qo_heads * b.head_dim
		out = view[base:base + rows * heads * b.head_dim].reshape(rows, heads, b.head_dim)
		lse = view[lse_base:lse_base + rows * heads].reshape(rows, heads)
		return out, lse

class PlanCache:
	"""LRU of plans keyed by workload fingerprint."""
	__slots__ = ("capacity", "hits", "misses", "_entries")

	def __init__(self, capacity:int):
		if capacity < 1:
			raise ValueError(f"Plan cache capacity must be positive, got {capacity}")
		self.capacity = capacity
		self.hits = 0
		self.misses = 0
		self._entries: OrderedDict[str, object] = OrderedDict()

	def __len__(self) -> int:
		return len(self._entries)

	def __contains__(self, key:str) -> bool:
		return key in self._entries

	def get(self, key:str):
		if key in self._entries:
			self._entries.move_to_end(key)
			self.hits += 1
			return self._entries[key]
		self.misses += 1
		return None

	def put(self, key:str, value) -> None:
		self._entries[key] = value
		self._entries.move_to_end(key)
		while len(self._entries) > self.capacity:
			evicted, _ = self._entries.popitem(last=False)
			logger.debug("Evicted plan %s", evicted[:12])
