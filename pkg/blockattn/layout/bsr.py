"""Block sparse row view of the KV cache.

Row blocks are query tiles, column blocks are KV blocks of B_c tokens in a
backing pool laid out (block, token-in-block, head, dim) so the head dim
stays contiguous. A row's KV sequence is its blocks in `indices` order; the
final block of a row may be partially filled (`last_block_len`).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blockattn.attention import KvTile
from .ragged import RaggedTensor, _validate_indptr

@dataclass(frozen=True)
class KvPool:
	keys: np.ndarray # (num_blocks, B_c, H_kv, D)
	values: np.ndarray

	def __post_init__(self):
		if self.keys.ndim != 4 or self.keys.shape != self.values.shape:
			raise ValueError(f"Pool keys {self.keys.shape} and values {self.values.shape} must match and be 4d")

	@property
	def num_blocks(self) -> int:
		return self.keys.shape[0]

	@property
	def block_size(self) -> int:
		return self.keys.shape[1]

	@property
	def num_kv_heads(self) -> int:
		return self.keys.shape[2]

	@property
	def head_dim(self) -> int:
		return self.keys.shape[3]

@dataclass(frozen=True)
class BsrMatrix:
	block_rows: int
	indptr: np.ndarray # (rows_blocks + 1,)
	indices: np.ndarray # column block ids, strictly increasing within each row
	last_block_len: np.ndarray # (rows_blocks,) occupancy of each row's final block, 0 for empty rows
	pool: KvPool
	row_offsets: np.ndarray # (rows_blocks + 1,) query rows owned by each row block
	row_request: np.ndarray # (rows_blocks,) request of each row block, nondecreasing
	batch_size: int|None = None # requests in the batch, including trailing ones without query rows

	def __post_init__(self):
		if self.block_rows < 1:
			raise ValueError(f"block_rows must be positive, got {self.block_rows}")
		indices = np.asarray(self.indices, dtype=np.int64)
		indptr = _validate_indptr(self.indptr, indices.shape[0])
		rows_blocks = indptr.shape[0] - 1
		last = np.asarray(self.last_block_len, dtype=np.int64)
		row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
		row_request = np.asarray(self.row_request, dtype=np.int64)
		for name, arr, size in (("last_block_len", last, rows_blocks), ("row_request", row_request, rows_blocks)):
			if arr.shape != (rows_blocks,):
				raise ValueError(f"{name} must have {rows_blocks} entries, got shape {arr.shape}")
		row_offsets = _validate_indptr(row_offsets, row_offsets[-1] if row_offsets.size else 0, "row_offsets")
		if row_offsets.shape[0] != rows_blocks + 1:
			raise ValueError(f"row_offsets must have {rows_blocks + 1} entries, got {row_offsets.shape[0]}")
		if np.any(np.diff(row_offsets) > self.block_rows):
			raise ValueError(f"A row block owns more than block_rows={self.block_rows} query rows")
		if np.any(np.diff(row_request) < 0) or (row_request.size and row_request[0] < 0):
			raise ValueError("row_request must be nonnegative and nondecreasing")
		owners = int(row_request[-1]) + 1 if row_request.size else 0
		if self.batch_size is None:
			object.__setattr__(self, "batch_size", owners)
		elif self.batch_size < owners:
			raise ValueError(f"batch_size={self.batch_size} but row blocks reference request {owners - 1}")

		if indices.size:
			if indices.min() < 0 or indices.max() >= self.pool.num_blocks:
				raise ValueError(f"Block id outside the pool of {self.pool.num_blocks} blocks")
			step = np.diff(indices)
			within_row = np.ones(step.shape, dtype=bool)
			starts = indptr[1:-1]
			starts = starts[(starts > 0) & (starts < indices.size)]
			within_row[starts - 1] = False
			if np.any(step[within_row] <= 0):
				raise ValueError("indices must be strictly increasing within each row")
		nnz = np.diff(indptr)
		if np.any(last[nnz == 0] != 0):
			raise ValueError("Empty rows must have last_block_len 0")
		full = last[nnz > 0]
		if np.any((full < 1) | (full > self.block_cols)):
			raise ValueError(f"last_block_len must lie in [1, {self.block_cols}] for non-empty rows")

		for name, arr in (("indices", indices), ("indptr", indptr), ("last_block_len", last),
				("row_offsets", row_offsets), ("row_request", row_request)):
			arr.setflags(write=False)
			object.__setattr__(self, name, arr)

	@property
	def block_cols(self) -> int:
		return self.pool.block_size

	@property
	def rows_blocks(self) -> int:
		return self.indptr.shape[0] - 1

	@property
	def cols_blocks(self) -> int:
		return self.pool.num_blocks

	@property
	def num_requests(self) -> int:
		return int(self.batch_size)

	def row_indices(self, row_block:int) -> np.ndarray:
		return self.indices[self.indptr[row_block]:self.indptr[row_block+1]]

	def kv_lengths(self) -> np.ndarray:
		"""Logical KV length of every row block."""
		nnz = np.diff(self.indptr)
		return np.where(nnz > 0, (nnz - 1) * self.block_cols + self.last_block_len, 0)

	def kv_len(self, row_block:int) -> int:
		return int(self.kv_lengths()[row_block])

	def request_blocks(self, request:int) -> range:
		lo, hi = np.searchsorted(self.row_request, [request, request + 1])
		return range(int(lo), int(hi))

	def qo_indptr(self) -> np.ndarray:
		"""Query row offsets per request."""
		firsts = np.searchsorted(self.row_request, np.arange(self.num_requests + 1))
		return self.row_offsets[firsts]

	def request_kv_lengths(self) -> np.ndarray:
		"""KV length per request, read from its first row block (0 for requests without rows)."""
		lengths = self.kv_lengths()
		out = np.zeros(self.num_requests, dtype=np.int64)
		firsts = np.searchsorted(self.row_request, np.arange(self.num_requests))
		has_rows = firsts < self.rows_blocks
		has_rows[has_rows] = self.row_request[firsts[has_rows]] == np.arange(self.num_requests)[has_rows]
		out[has_rows] = lengths[firsts[has_rows]]
		return out

	def materialize(self, row_block:int) -> KvTile:
		return gather_tile(self, row_block, (0, self.kv_len(row_block)))

	def token_ids(self, row_block:int) -> np.ndarray:
		"""Flat pool token id (block * B_c + offset) of every KV position of a row."""
		pos = np.arange(self.kv_len(row_block))
		return self.row_indices(row_block)[pos // self.block_cols] * self.block_cols + pos % self.block_cols

## ------ Gathering ------ ##
def gather_tile(bsr:BsrMatrix, row_block:int, tile_span:tuple[int, int]) -> KvTile:
	"""Copy KV positions [start, stop) of a row into contiguous (n, H_kv, D) buffers.

	Rows whose blocks are consecutive in the pool take the affine path (a plain
	slice of the flattened pool); otherwise each token's address is resolved
	through `indices`.
	"""
	if not 0 <= row_block < bsr.rows_blocks:
		raise ValueError(f"Row block {row_block} outside [0, {bsr.rows_blocks})")
	start, stop = tile_span
	length = bsr.kv_len(row_block)
	if not 0 <= start <= stop <= length:
		raise ValueError(f"Span [{start}, {stop}) outside the row's KV length {length}")

	blocks = bsr.row_indices(row_block)
	b_c = bsr.block_cols
	pool = bsr.pool
	if blocks.size and blocks[-1] - blocks[0] == blocks.size - 1:
		base = int(blocks[0]) * b_c
		flat_k = pool.keys.reshape(-1, pool.num_kv_heads, pool.head_dim)
		flat_v = pool.values.reshape(-1, pool.num_kv_heads, pool.head_dim)
		keys = flat_k[base + start:base + stop]
		values = flat_v[base + start:base + stop]
	else:
		pos = np.arange(start, stop)
		blk = blocks[pos // b_c]
		off = pos % b_c
		keys = pool.keys[blk, off]
		values = pool.values[blk, off]
	return KvTile(keys, values, np.arange(start, stop))

## ------ Builders ------ ##
def tile_query_rows(qo_lens:Sequence[int], block_rows:int) -> tuple[np.ndarray, np.ndarray]:
	"""
	Split each request's query rows into row blocks of at most `block_rows`.
	Returns (row_offsets, row_request).
	"""
	if block_rows < 1:
		raise ValueError(f"block_rows must be positive, got {block_rows}")
	sizes, owners = [], []
	for rid, l_qo in enumerate(qo_lens):
		if l_qo < 0:
			raise ValueError(f"Negative query length {l_qo} for request {rid}")
		full, rem = divmod(int(l_qo), block_rows)
		sizes += [block_rows] * full + ([rem] if rem else [])
		owners += [rid] * (full + (1 if rem else 0))
	row_offsets = np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.int64))])
	return row_offsets, np.asarray(owners, dtype=np.int64)

def bsr_from_ragged(
	k:RaggedTensor,
	v:RaggedTensor,
	qo_lens:Sequence[int],
	block_rows:int=1,
) -> BsrMatrix:
	"""
	Dense KV as a vector-sparse (B_c = 1) BSR whose rows reference consecutive
	tokens, so gathering takes the affine path. No KV data is copied.
	"""
	if k.data.shape != v.data.shape or not np.array_equal(k.indptr, v.indptr):
		raise ValueError("Keys and values must share shape and indptr")
	if len(qo_lens) != k.batch_size:
		raise ValueError(f"{len(qo_lens)} query lengths for {k.batch_size} KV requests")
	total, heads, dim = k.data.shape
	pool = KvPool(k.data.reshape(total, 1, heads, dim), v.data.reshape(total, 1, heads, dim))
	row_offsets, row_request = tile_query_rows(qo_lens, block_rows)

	indptr, indices, last = [0], [], []
	for rid in row_request:
		k0, k1 = k.indptr[rid], k.indptr[rid+1]
		indices.append(np.arange(k0, k1))
		indptr.append(indptr[-1] + (k1 - k0))
		last.append(1 if k1 > k0 else 0)
	return BsrMatrix(
		block_rows=block_rows,
		indptr=np.asarray(indptr, dtype=np.int64),
		indices=np.concatenate(indices) if indices else np.zeros(0, dtype=np.int64),
		last_block_len=np.asarray(last, dtype=np.int64),
		pool=pool,
		row_offsets=row_offsets,
		row_request=row_request,
		batch_size=len(qo_lens),
	)
