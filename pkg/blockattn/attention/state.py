"""Attention states and the merge operator.

An attention state over an index set I is the pair (O(I), LSE(I)): the
softmax-weighted value average and the log-sum-exp of the raw scores. Two
states over disjoint sets merge into the state over their union, which is
what lets the runtime split long KV ranges and contract the pieces later.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

@dataclass(frozen=True)
class AttentionState:
	"""(output, lse) for one or more query rows.

	`output` has shape (..., D) and `lse` shape (...). A row with lse = -inf
	covers the empty index set and carries a zero output.
	"""
	output: np.ndarray
	lse: np.ndarray

	def __post_init__(self):
		output = np.asarray(self.output)
		lse = np.asarray(self.lse)
		if output.ndim < 1:
			raise ValueError("AttentionState output needs a trailing head dimension")
		if output.shape[:-1] != lse.shape:
			raise ValueError(f"Output shape {output.shape} does not match lse shape {lse.shape}")
		object.__setattr__(self, "output", output)
		object.__setattr__(self, "lse", lse)

	@classmethod
	def empty(cls, dim:int, rows:tuple[int, ...]=(), dtype=np.float32) -> "AttentionState":
		"""The identity of the merge: zero output, lse = -inf."""
		return cls(
			np.zeros((*rows, dim), dtype=dtype),
			np.full(rows, -np.inf, dtype=dtype),
		)

	@property
	def dim(self) -> int:
		return self.output.shape[-1]

	@property
	def is_empty(self) -> np.ndarray:
		return np.isneginf(self.lse)

@dataclass(frozen=True)
class ScaleFreeState:
	"""Running weighted sum for variants that skip softmax. Merges by addition."""
	output: np.ndarray

	def __post_init__(self):
		object.__setattr__(self, "output", np.asarray(self.output))

	@classmethod
	def empty(cls, dim:int, rows:tuple[int, ...]=(), dtype=np.float32) -> "ScaleFreeState":
		return cls(np.zeros((*rows, dim), dtype=dtype))

	@property
	def dim(self) -> int:
		return self.output.shape[-1]

@dataclass(frozen=True)
class HeadConfig:
	num_qo_heads: int
	num_kv_heads: int
	head_dim: int

	def __post_init__(self):
		if self.num_qo_heads < 1 or self.num_kv_heads < 1 or self.head_dim < 1:
			raise ValueError(f"Head counts and head_dim must be positive, got {self}")
		if self.num_qo_heads % self.num_kv_heads != 0:
			raise ValueError(
				f"num_qo_heads={self.num_qo_heads} is not a multiple of num_kv_heads={self.num_kv_heads}"
			)

	@property
	def group_size(self) -> int:
		return self.num_qo_heads // self.num_kv_heads

	def kv_head_of(self, qo_head:int) -> int:
		return qo_head // self.group_size

## ------ Operations ------ ##
def lse_of_scores(scores:Sequence[float]|np.ndarray) -> float:
	"""log(sum(exp(s))), max-shifted. The empty list gives -inf."""
	s = np.asarray(scores, dtype=np.float64)
	if s.size == 0:
		return -math.inf
	return float(logsumexp(s))

def attention_state(q:np.ndarray, keys:np.ndarray, values:np.ndarray) -> AttentionState:
	"""
	Exact state of one query over all (key, value) rows. No scaling is applied;
	variants put 1/sqrt(D) into their query transform.
	"""
	q = np.asarray(q); keys = np.asarray(keys); values = np.asarray(values)
	if q.ndim != 1:
		raise ValueError(f"Query must be a vector, got shape {q.shape}")
	dim = q.shape[0]
	if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
		raise ValueError(f"Keys {keys.shape} and values {values.shape} must be n x D with matching n")
	if keys.shape[1] != dim or values.shape[1] != dim:
		raise ValueError(f"Expected head dim {dim}, got keys {keys.shape} and values {values.shape}")

	dtype = np.result_type(q, keys, values)
	if keys.shape[0] == 0:
		return AttentionState.empty(dim, dtype=dtype)
	scores = keys @ q
	lse = logsumexp(scores)
	weights = np.exp(scores - lse)
	return AttentionState(weights @ values, np.asarray(lse, dtype=dtype))

def merge(a:AttentionState|ScaleFreeState, b:AttentionState|ScaleFreeState) -> AttentionState|ScaleFreeState:
	"""
	Compose two states over disjoint index sets.
	Softmax states use the max-shifted form of the merge, scale-free states add.
	"""
	if type(a) is not type(b):
		raise ValueError(f"Cannot merge {type(a).__name__} with {type(b).__name__}")
	if a.output.shape != b.output.shape:
		raise ValueError(f"State shapes differ: {a.output.shape} vs {b.output.shape}")
	match a:
		case ScaleFreeState():
			return ScaleFreeState(a.output + b.output)
		case AttentionState():
			output, lse = merge_arrays(a.output, a.lse, b.output, b.lse)
			return AttentionState(output, lse)
		case _:
			raise ValueError(f"Unknown state type {type(a).__name__}")

def merge_arrays(
	out_a:np.ndarray,
	lse_a:np.ndarray,
	out_b:np.ndarray,
	lse_b:np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
	"""
	Row-wise merge on raw arrays. Shared by `merge` and the contraction stage.
	Merging with an empty row returns the other row bit-exactly.
	"""
	lse_a = np.asarray(lse_a); lse_b = np.asarray(lse_b)
	m = np.maximum(lse_a, lse_b)
	# Rows where both sides are empty keep m = -inf, shift by 0 there
	shift = np.where(np.isneginf(m), 0, m)
	w_a = np.exp(lse_a - shift)
	w_b = np.exp(lse_b - shift)
	denom = w_a + w_b
	with np.errstate(divide="ignore", invalid="ignore"):
		output = (w_a[..., None] * out_a + w_b[..., None] * out_b) / denom[..., None]
		lse = shift + np.log(denom)
	output = np.where(denom[..., None] > 0, output, 0)
	return output.astype(out_a.dtype, copy=False), lse.astype(lse_a.dtype, copy=False)

def merge_all(states:Sequence[AttentionState|ScaleFreeState]) -> AttentionState|ScaleFreeState:
	"""Left fold of `merge` in the given order."""
	if len(states) == 0:
		raise ValueError("merge_all needs at least one state")
	return reduce(merge, states)

def operational_intensity(l_qo:int, l_kv:int, group_size:int=1) -> float:
	"""
	g / (1/l_qo + 1/l_kv): flops per element of memory traffic, up to a constant.
	"""
	if l_qo < 1 or l_kv < 1:
		raise ValueError(f"Lengths must be positive, got l_qo={l_qo}, l_kv={l_kv}")
	if group_size < 1:
		raise ValueError(f"Group size must be positive, got {group_size}")
	return group_size / (1.0 / l_qo + 1.0 / l_kv)
