from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bsr import BsrMatrix, KvPool, tile_query_rows

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class RequestPages:
	"""Page table entry of one request."""
	pages: tuple[int, ...]
	last_page_len: int
	qo_len: int = 1

	def kv_len(self, page_size:int) -> int:
		if not self.pages:
			return 0
		return (len(self.pages) - 1) * page_size + self.last_page_len

class PagedKvCache:
	"""
	Fixed-size pages in a (page, token-in-page, head, dim) pool.

	Pages come from a bump allocator, so each request's page list is strictly
	increasing. Appending is single-writer; readers only see the pool through
	`page_table_to_bsr`.
	"""
	__slots__ = ("page_size", "num_kv_heads", "head_dim", "k_pool", "v_pool",
		"_pages", "_lengths", "_next_page")

	def __init__(
		self,
		num_pages:int,
		page_size:int,
		num_kv_heads:int,
		head_dim:int,
		dtype=np.float32,
	):
		if num_pages < 1 or page_size < 1:
			raise ValueError(f"num_pages and page_size must be positive, got {num_pages}, {page_size}")
		self.page_size: int = page_size
		self.num_kv_heads: int = num_kv_heads
		self.head_dim: int = head_dim
		self.k_pool: np.ndarray = np.zeros((num_pages, page_size, num_kv_heads, head_dim), dtype=dtype)
		self.v_pool: np.ndarray = np.zeros_like(self.k_pool)
		# Request id -> page ids, in logical order
		self._pages: dict[int, list[int]] = {}
		self._lengths: dict[int, int] = {}
		self._next_page: int = 0

	## ------ Public API ------ ##
	@property
	def num_pages(self) -> int:
		return self.k_pool.shape[0]

	@property
	def pool(self) -> KvPool:
		return KvPool(self.k_pool, self.v_pool)

	@property
	def requests(self) -> list[int]:
		return list(self._pages)

	def add_request(self, request:int|None=None) -> int:
		"""Register an empty request and return its id."""
		rid = len(self._pages) if request is None else request
		if rid in self._pages:
			raise ValueError(f"Request {rid} already exists")
		self._pages[rid] = []
		self._lengths[rid] = 0
		return rid

	def append(self, request:int, keys:np.ndarray, values:np.ndarray) -> None:
		"""
		Append (n, H_kv, D) tokens to a request, allocating pages as needed.
		"""
		if request not in self._pages:
			raise ValueError(f"Unknown request {request}")
		expected = (self.num_kv_heads, self.head_dim)
		if keys.shape != values.shape or keys.shape[1:] != expected:
			raise ValueError(f"Tokens must be (n, {expected[0]}, {expected[1]}), got {keys.shape} and {values.shape}")

		pages = self._pages[request]
		pos = self._lengths[request]
		written = 0
		while written < keys.shape[0]:
			offset = pos % self.page_size
			if offset == 0:
				pages.append(self._allocate())
			take = min(self.page_size - offset, keys.shape[0] - written)
			self.k_pool[pages[-1], offset:offset + take] = keys[written:written + take]
			self.v_pool[pages[-1], offset:offset + take] = values[written:written + take]
			pos += take
			written += take
		self._lengths[request] = pos

	def seq_len(self, request:int) -> int:
		return self._lengths[request]

	def pages(self, request:int) -> tuple[int, ...]:
		return tuple(self._pages[request])

	def last_page_len(self, request:int) -> int:
		n = self._lengths[request]
		if n == 0:
			return 0
		return (n - 1) % self.page_size + 1

	def request_pages(self, request:int, qo_len:int=1) -> RequestPages:
		return RequestPages(self.pages(request), self.last_page_len(request), qo_len)

	## ------ Internal ------ ##
	def _allocate(self) -> int:
		if self._next_page >= self.num_pages:
			raise RuntimeError(f"Page pool exhausted ({self.num_pages} pages)")
		page = self._next_page
		self._next_page += 1
		return page

def page_table_to_bsr(cache:PagedKvCache, requests:Sequence[RequestPages], block_rows:int) -> BsrMatrix:
	"""
	View a page table as BSR with B_c = page_size. Every query tile of a request
	becomes one row block listing that request's pages; the partially filled last
	page is carried as the row's `last_block_len`.
	"""
	for rid, req in enumerate(requests):
		if not req.pages:
			if req.last_page_len != 0:
				raise ValueError(f"Request {rid} has no pages but claims {req.last_page_len} tokens")
			continue
		pages = np.asarray(req.pages)
		if pages.min() < 0 or pages.max() >= cache.num_pages:
			raise ValueError(f"Request {rid} references a page outside [0, {cache.num_pages})")
		if np.any(np.diff(pages) <= 0):
			raise ValueError(f"Request {rid} page list {req.pages} is not strictly increasing")
		if not 1 <= req.last_page_len <= cache.page_size:
			raise ValueError(f"Request {rid} last page length {req.last_page_len} outside [1, {cache.page_size}]")

	row_offsets, row_request = tile_query_rows([r.qo_len for r in requests], block_rows)
	indptr, indices, last = [0], [], []
	for rid in row_request:
		req = requests[rid]
		indices.extend(req.pages)
		indptr.append(indptr[-1] + len(req.pages))
		last.append(req.last_page_len)
	logger.debug("Page table of %d requests -> %d row blocks, %d nonzero blocks",
		len(requests), len(row_request), len(indices))
	return BsrMatrix(
		block_rows=block_rows,
		indptr=np.asarray(indptr, dtype=np.int64),
		indices=np.asarray(indices, dtype=np.int64),
		last_block_len=np.asarray(last, dtype=np.int64),
		pool=cache.pool,
		row_offsets=row_offsets,
		row_request=row_request,
		batch_size=len(requests),
	)
