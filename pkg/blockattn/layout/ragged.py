from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from blockattn.attention import HeadConfig

def _validate_indptr(indptr:np.ndarray, total:int, name:str="indptr") -> np.ndarray:
	indptr = np.asarray(indptr, dtype=np.int64)
	if indptr.ndim != 1 or indptr.size == 0:
		raise ValueError(f"{name} must be a non-empty 1d array, got shape {indptr.shape}")
	if indptr[0] != 0:
		raise ValueError(f"{name}[0] must be 0, got {indptr[0]}")
	if np.any(np.diff(indptr) < 0):
		raise ValueError(f"{name} must be nondecreasing")
	if indptr[-1] != total:
		raise ValueError(f"{name}[-1]={indptr[-1]} does not match {total} rows")
	return indptr

@dataclass(frozen=True)
class RaggedTensor:
	"""Variable-length rows packed without padding; request i owns data[indptr[i]:indptr[i+1]]."""
	data: np.ndarray
	indptr: np.ndarray

	def __post_init__(self):
		data = np.asarray(self.data)
		object.__setattr__(self, "data", data)
		object.__setattr__(self, "indptr", _validate_indptr(self.indptr, data.shape[0]))

	@classmethod
	def from_lengths(cls, data:np.ndarray, lengths:Sequence[int]) -> "RaggedTensor":
		indptr = np.concatenate([[0], np.cumsum(np.asarray(lengths, dtype=np.int64))])
		return cls(data, indptr)

	@property
	def batch_size(self) -> int:
		return self.indptr.shape[0] - 1

	@property
	def lengths(self) -> np.ndarray:
		return np.diff(self.indptr)

	@property
	def total_rows(self) -> int:
		return int(self.indptr[-1])

	def __getitem__(self, i:int) -> np.ndarray:
		return self.data[self.indptr[i]:self.indptr[i+1]]

@dataclass(frozen=True)
class FusionMap:
	"""Fused row r <-> (original row r // g, head-in-group r % g), head-major within each row."""
	group_size: int
	num_kv_heads: int

	def row_of(self, fused_row:np.ndarray|int) -> np.ndarray|int:
		return fused_row // self.group_size

	def head_in_group(self, fused_row:np.ndarray|int) -> np.ndarray|int:
		return fused_row % self.group_size

	def qo_head(self, fused_row:np.ndarray|int, kv_head:int) -> np.ndarray|int:
		return kv_head * self.group_size + fused_row % self.group_size

	def fuse(self, data:np.ndarray) -> np.ndarray:
		"""(N, H_qo, ...) -> (N*g, H_kv, ...)"""
		n, rest = data.shape[0], data.shape[2:]
		g = self.group_size
		return data.reshape(n, self.num_kv_heads, g, *rest).swapaxes(1, 2).reshape(n * g, self.num_kv_heads, *rest)

	def scatter(self, fused:np.ndarray) -> np.ndarray:
		"""(N*g, H_kv, ...) -> (N, H_qo, ...), the inverse of `fuse`."""
		g = self.group_size
		if fused.shape[0] % g:
			raise ValueError(f"{fused.shape[0]} fused rows is not a multiple of the group size {g}")
		n, rest = fused.shape[0] // g, fused.shape[2:]
		return fused.reshape(n, g, self.num_kv_heads, *rest).swapaxes(1, 2).reshape(n, g * self.num_kv_heads, *rest)

def fuse_head_groups(q:RaggedTensor, cfg:HeadConfig) -> tuple[RaggedTensor, FusionMap]:
	"""
	Pack each group of g query heads sharing a KV head into the row dimension.
	Request i ends up with l_qo(i)*g rows of shape (H_kv, D).
	"""
	if q.data.ndim != 3 or q.data.shape[1:] != (cfg.num_qo_heads, cfg.head_dim):
		raise ValueError(
			f"Query shape {q.data.shape} does not match {cfg.num_qo_heads} heads of dim {cfg.head_dim}"
		)
	fmap = FusionMap(cfg.group_size, cfg.num_kv_heads)
	return RaggedTensor(fmap.fuse(q.data), q.indptr * cfg.group_size), fmap
