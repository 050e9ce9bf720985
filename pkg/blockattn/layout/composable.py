"""Composable formats: one logical KV matrix stored as several BSR parts.

Requests that share a prefix read it through a part with a larger B_r,
the rest of each request's KV through a B_r = 1 part. Only index arrays are
built; the KV pool is shared and never copied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bsr import BsrMatrix, KvPool

class FormatRoles:
	SHARED_PREFIX = "shared-prefix"
	UNIQUE_SUFFIX = "unique-suffix"
	ALL = [SHARED_PREFIX, UNIQUE_SUFFIX]

@dataclass(frozen=True)
class RowPositions:
	"""Where each query row of a BSR sits in its original request.

	Per query row: original request id, query index and the request's full
	query/KV lengths. Per BSR request: the position of its first KV token in
	the original request's KV sequence.
	"""
	request: np.ndarray
	qo_idx: np.ndarray
	qo_len: np.ndarray
	kv_len: np.ndarray
	kv_offset: np.ndarray

	@classmethod
	def from_bsr(cls, bsr:BsrMatrix) -> "RowPositions":
		"""Positions of a BSR that is its own logical format."""
		qo_indptr = bsr.qo_indptr()
		rows = int(qo_indptr[-1])
		qo_lens = np.diff(qo_indptr)
		request = np.repeat(np.arange(bsr.num_requests), qo_lens)
		return cls(
			request=request,
			qo_idx=np.arange(rows) - qo_indptr[request],
			qo_len=qo_lens[request],
			kv_len=bsr.request_kv_lengths()[request],
			kv_offset=np.zeros(bsr.num_requests, dtype=np.int64),
		)

@dataclass(frozen=True)
class ComposablePart:
	bsr: BsrMatrix
	role: str
	query_rows: np.ndarray # part-local query row -> global query row
	positions: RowPositions

	def __post_init__(self):
		if self.role not in FormatRoles.ALL:
			raise ValueError(f"Unknown part role {self.role!r}. Allowed: {FormatRoles.ALL}")

	def coverage(self, row:int) -> np.ndarray:
		"""Pool token ids this part contributes to a global query row."""
		local = np.flatnonzero(self.query_rows == row)
		if local.size == 0:
			return np.zeros(0, dtype=np.int64)
		block = int(np.searchsorted(self.bsr.row_offsets, local[0], side="right") - 1)
		return self.bsr.token_ids(block)

@dataclass(frozen=True)
class ComposableFormat:
	"""
	Parts over a shared token pool (B_c = 1). Every global query row is its
	own request with a single query token, as in parallel decoding.
	"""
	parts: tuple[ComposablePart, ...]
	kv_lens: np.ndarray # full KV length of every global query row

	@property
	def num_rows(self) -> int:
		return self.kv_lens.shape[0]

	def coverage(self, row:int) -> list[np.ndarray]:
		return [part.coverage(row) for part in self.parts]

	def row_kv_set(self, row:int) -> np.ndarray:
		return np.concatenate(self.coverage(row))

	def check_partition(self) -> None:
		"""
		Raise if a row's parts overlap or do not add up to its KV length.
		"""
		for row in range(self.num_rows):
			cover = self.coverage(row)
			union = np.concatenate(cover)
			if np.unique(union).size != union.size:
				raise ValueError(f"Parts overlap on query row {row}")
			if union.size != self.kv_lens[row]:
				raise ValueError(f"Parts cover {union.size} tokens of row {row}, expected {self.kv_lens[row]}")

	def to_single_format(self) -> BsrMatrix:
		"""The same KV as one B_r = 1 BSR, rows in global order."""
		pool = self.parts[0].bsr.pool
		rows = [np.sort(self.row_kv_set(r)) for r in range(self.num_rows)]
		return _vector_sparse_bsr(pool, rows, block_rows=1, rows_per_block=[1] * self.num_rows)

def _vector_sparse_bsr(
	pool:KvPool,
	token_rows:Sequence[np.ndarray],
	block_rows:int,
	rows_per_block:Sequence[int],
) -> BsrMatrix:
	indptr = np.concatenate([[0], np.cumsum([len(t) for t in token_rows])]).astype(np.int64)
	indices = np.concatenate(token_rows).astype(np.int64) if token_rows else np.zeros(0, dtype=np.int64)
	return BsrMatrix(
		block_rows=block_rows,
		indptr=indptr,
		indices=indices,
		last_block_len=np.asarray([1 if len(t) else 0 for t in token_rows], dtype=np.int64),
		pool=pool,
		row_offsets=np.concatenate([[0], np.cumsum(rows_per_block)]).astype(np.int64),
		row_request=np.arange(len(token_rows), dtype=np.int64),
		batch_size=len(token_rows),
	)

def decompose_shared_prefix(
	pool:KvPool,
	groups:Sequence[tuple[Sequence[int], tuple[int, int]]],
	suffixes:Sequence[tuple[int, int]],
) -> ComposableFormat:
	"""Split shared prefixes from unique suffixes.

	Args:
		pool: Token pool with B_c = 1.
		groups: (query rows, prefix token span) per sharing group. Rows of a group
			are contiguous and all groups have the same size, which becomes the
			prefix part's B_r.
		suffixes: Unique token span of every query row, after its prefix in the pool.

	Returns:
		A shared-prefix part (one row block per group) and a unique-suffix part
		(B_r = 1, one row block per query row).
	"""
	if pool.block_size != 1:
		raise ValueError(f"Composable parts index single tokens, got pool block size {pool.block_size}")
	num_rows = len(suffixes)
	tokens = pool.num_blocks

	def _check_span(span:tuple[int, int], what:str) -> None:
		start, stop = span
		if not 0 <= start <= stop <= tokens:
			raise ValueError(f"{what} span {span} outside the pool of {tokens} tokens")

	prefix_of = np.full((num_rows, 2), 0, dtype=np.int64)
	grouped = np.zeros(num_rows, dtype=bool)
	group_rows = []
	for gi, (rows, span) in enumerate(groups):
		rows = np.asarray(rows, dtype=np.int64)
		if rows.size == 0 or np.any(np.diff(rows) != 1):
			raise ValueError(f"Group {gi} rows {rows.tolist()} are not contiguous")
		if rows[0] < 0 or rows[-1] >= num_rows:
			raise ValueError(f"Group {gi} rows outside [0, {num_rows})")
		if np.any(grouped[rows]):
			raise ValueError(f"Group {gi} overlaps another group")
		_check_span(span, f"Group {gi} prefix")
		grouped[rows] = True
		prefix_of[rows] = span
		group_rows.append(rows)
	sizes = {len(r) for r in group_rows}
	if len(sizes) > 1:
		raise ValueError(f"All groups must have the same size to share one block_rows, got sizes {sorted(sizes)}")
	group_size = sizes.pop() if sizes else 1

	suffix_span = np.asarray(suffixes, dtype=np.int64).reshape(num_rows, 2)
	for row in range(num_rows):
		_check_span(tuple(suffix_span[row]), f"Row {row} suffix")
		p0, p1 = prefix_of[row]
		s0, s1 = suffix_span[row]
		if p1 > p0 and s1 > s0 and s0 < p1:
			raise ValueError(f"Row {row} suffix {tuple(suffix_span[row])} overlaps or precedes its prefix {(p0, p1)}")

	prefix_len = prefix_of[:, 1] - prefix_of[:, 0]
	suffix_len = suffix_span[:, 1] - suffix_span[:, 0]
	kv_lens = prefix_len + suffix_len
	ones = np.ones(num_rows, dtype=np.int64)

	# Shared prefixes: one row block per group, B_r = group size
	prefix_rows = np.concatenate(group_rows) if group_rows else np.zeros(0, dtype=np.int64)
	prefix_bsr = _vector_sparse_bsr(
		pool,
		[np.arange(*prefix_of[rows[0]]) for rows in group_rows],
		block_rows=group_size,
		rows_per_block=[len(rows) for rows in group_rows],
	)
	prefix = ComposablePart(
		bsr=prefix_bsr,
		role=FormatRoles.SHARED_PREFIX,
		query_rows=prefix_rows,
		positions=RowPositions(
			request=prefix_rows,
			qo_idx=np.zeros(prefix_rows.size, dtype=np.int64),
			qo_len=ones[prefix_rows],
			kv_len=kv_lens[prefix_rows],
			kv_offset=np.zeros(len(group_rows), dtype=np.int64),
		),
	)

	# Unique suffixes: B_r = 1, positions continue after the prefix
	all_rows = np.arange(num_rows, dtype=np.int64)
	suffix_bsr = _vector_sparse_bsr(
		pool,
		[np.arange(*suffix_span[r]) for r in range(num_rows)],
		block_rows=1,
		rows_per_block=ones.tolist(),
	)
	suffix = ComposablePart(
		bsr=suffix_bsr,
		role=FormatRoles.UNIQUE_SUFFIX,
		query_rows=all_rows,
		positions=RowPositions(
			request=all_rows,
			qo_idx=np.zeros(num_rows, dtype=np.int64),
			qo_len=ones,
			kv_len=kv_lens,
			kv_offset=prefix_len,
		),
	)
	return ComposableFormat(parts=(prefix, suffix), kv_lens=kv_lens)
