"""Seeded workload generation: sequence lengths, random Q/K/V and a paged KV cache."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.stats import zipfian

from blockattn.attention import HeadConfig
from blockattn.config import Defaults
from blockattn.layout import (
	BsrMatrix,
	PagedKvCache,
	RaggedTensor,
	page_table_to_bsr,
)
from blockattn.runtime import WorkloadSpec

logger = logging.getLogger(__name__)

## --- Names --- ##
class Distributions:
	CONSTANT = "constant"
	UNIFORM = "uniform"
	ZIPF = "zipf"
	ALL = [
		CONSTANT,
		UNIFORM,
		ZIPF,
	]

class Modes:
	DECODE = "decode"
	PREFILL_CAUSAL = "prefill-causal"
	INCREMENTAL_PREFILL = "incremental-prefill"
	ALL = [
		DECODE,
		PREFILL_CAUSAL,
		INCREMENTAL_PREFILL,
	]
	# Modes whose queries attend causally
	CAUSAL = [PREFILL_CAUSAL, INCREMENTAL_PREFILL]

@dataclass(frozen=True)
class WorkloadProfile:
	"""What to generate.

	`params` holds the distribution parameters: `length` for constant,
	`lo`/`hi` (inclusive) for uniform, `mean` plus optional `exponent` and
	`support` for zipf, plus an optional `fraction` (query share of the KV
	length) for incremental prefill.
	"""
	distribution: str = Distributions.CONSTANT
	params: Mapping[str, float] = field(default_factory=lambda: {"length": 1024})
	batch_size: int = 16
	mode: str = Modes.DECODE
	seed: int = Defaults.seed
	num_qo_heads: int = 1
	num_kv_heads: int = 1
	head_dim: int = 64
	page_size: int = Defaults.page_size
	block_rows: int = Defaults.block_rows

	def __post_init__(self):
		if self.distribution not in Distributions.ALL:
			raise KeyError(f"Unknown distribution {self.distribution!r}. Allowed: {Distributions.ALL}")
		if self.mode not in Modes.ALL:
			raise KeyError(f"Unknown mode {self.mode!r}. Allowed: {Modes.ALL}")
		if self.batch_size < 1:
			raise ValueError(f"batch_size must be positive, got {self.batch_size}")
		if self.page_size < 1 or self.block_rows < 1:
			raise ValueError(f"page_size and block_rows must be positive, got {self.page_size}, {self.block_rows}")
		object.__setattr__(self, "params", dict(self.params))

	@property
	def head(self) -> HeadConfig:
		return HeadConfig(self.num_qo_heads, self.num_kv_heads, self.head_dim)

	@classmethod
	def from_dict(cls, data:Mapping[str, Any]) -> "WorkloadProfile":
		known = set(cls.__dataclass_fields__)
		unknown = set(data) - known
		if unknown:
			raise ValueError(f"Unknown profile fields {sorted(unknown)}. Allowed: {sorted(known)}")
		return cls(**data)

	def to_dict(self) -> dict[str, Any]:
		return {name: getattr(self, name) for name in self.__dataclass_fields__}

@dataclass(frozen=True)
class Workload:
	"""Generated lengths and tensors.

	`k`/`v` hold each request's logical KV sequence densely (for the oracle);
	`kv` is the same data read through the paged cache as BSR.
	"""
	profile: WorkloadProfile
	qo_lens: np.ndarray
	kv_lens: np.ndarray
	q: RaggedTensor
	k: RaggedTensor
	v: RaggedTensor
	cache: PagedKvCache
	kv: BsrMatrix

	@property
	def head(self) -> HeadConfig:
		return self.profile.head

	def spec(self, num_ctas:int=1, alpha:float=Defaults.alpha, beta:float=Defaults.beta) -> WorkloadSpec:
		return WorkloadSpec(
			qo_lens=tuple(self.qo_lens.tolist()),
			kv_lens=tuple(self.kv_lens.tolist()),
			head=self.head,
			num_ctas=num_ctas,
			alpha=alpha,
			beta=beta,
			kv_block_size=self.kv.block_cols,
		)

## ------ Lengths ------ ##
def _param(profile:WorkloadProfile, name:str) -> float:
	try:
		return profile.params[name]
	except KeyError:
		raise KeyError(f"Distribution {profile.distribution!r} needs parameter {name!r}, got {sorted(profile.params)}") from None

def sample_lengths(profile:WorkloadProfile, rng:np.random.Generator) -> np.ndarray:
	"""KV lengths for every request of the profile, all at least 1."""
	n = profile.batch_size
	match profile.distribution:
		case Distributions.CONSTANT:
			length = int(_param(profile, "length"))
			if length < 1:
				raise ValueError(f"Constant length must be positive, got {length}")
			return np.full(n, length, dtype=np.int64)
		case Distributions.UNIFORM:
			lo, hi = int(_param(profile, "lo")), int(_param(profile, "hi"))
			if not 1 <= lo <= hi:
				raise ValueError(f"Uniform range needs 1 <= lo <= hi, got [{lo}, {hi}]")
			return rng.integers(lo, hi + 1, size=n, dtype=np.int64)
		case Distributions.ZIPF:
			mean = float(_param(profile, "mean"))
			exponent = float(profile.params.get("exponent", Defaults.zipf_exponent))
			support = int(profile.params.get("support", Defaults.zipf_support))
			if mean < 1 or exponent <= 0 or support < 1:
				raise ValueError(f"Zipf needs mean >= 1, exponent > 0, support >= 1; got {mean}, {exponent}, {support}")
			ranks = zipfian.rvs(exponent, support, size=n, random_state=rng).astype(np.float64)
			# Rank law gives the shape, the rescale pins the mean
			return np.maximum(1, np.rint(ranks * mean / ranks.mean())).astype(np.int64)
		case _:
			raise KeyError(f"Unknown distribution {profile.distribution!r}")

def query_lengths(profile:WorkloadProfile, kv_lens:np.ndarray) -> np.ndarray:
	match profile.mode:
		case Modes.DECODE:
			return np.ones_like(kv_lens)
		case Modes.PREFILL_CAUSAL:
			return kv_lens.copy()
		case Modes.INCREMENTAL_PREFILL:
			fraction = float(profile.params.get("fraction", Defaults.incremental_fraction))
			if not 0 < fraction <= 1:
				raise ValueError(f"Incremental prefill fraction must lie in (0, 1], got {fraction}")
			return np.clip(np.rint(kv_lens * fraction), 1, kv_lens).astype(np.int64)
		case _:
			raise KeyError(f"Unknown mode {profile.mode!r}")

## ------ Data ------ ##
def generate_workload(profile:WorkloadProfile, dtype=np.float32) -> Workload:
	"""
	Lengths and standard-normal Q/K/V from `profile.seed`. KV is appended to a
	paged cache one page per request per round, so requests interleave in
	the pool and their pages are scattered.
	"""
	rng = np.random.default_rng(profile.seed)
	head = profile.head
	kv_lens = sample_lengths(profile, rng)
	qo_lens = query_lengths(profile, kv_lens)

	q = rng.standard_normal((int(qo_lens.sum()), head.num_qo_heads, head.head_dim)).astype(dtype)
	kv_shape = (int(kv_lens.sum()), head.num_kv_heads, head.head_dim)
	k = rng.standard_normal(kv_shape).astype(dtype)
	v = rng.standard_normal(kv_shape).astype(dtype)
	k_ragged = RaggedTensor.from_lengths(k, kv_lens)
	v_ragged = RaggedTensor.from_lengths(v, kv_lens)

	ps = profile.page_size
	num_pages = int(sum(math.ceil(l / ps) for l in kv_lens))
	cache = PagedKvCache(num_pages, ps, head.num_kv_heads, head.head_dim, dtype=dtype)
	for _ in range(profile.batch_size):
		cache.add_request()
	for start in range(0, int(kv_lens.max()), ps):
		for rid in range(profile.batch_size):
			stop = min(start + ps, int(kv_lens[rid]))
			if start < stop:
				cache.append(rid, k_ragged[rid][start:stop], v_ragged[rid][start:stop])

	requests = [cache.request_pages(rid, int(qo_lens[rid])) for rid in range(profile.batch_size)]
	kv = page_table_to_bsr(cache, requests, profile.block_rows)
	logger.debug("Generated %s/%s workload: batch=%d sum(l_qo)=%d sum(l_kv)=%d pages=%d",
		profile.distribution, profile.mode, profile.batch_size, q.shape[0], kv_shape[0], num_pages)
	return Workload(
		profile=profile,
		qo_lens=qo_lens,
		kv_lens=kv_lens,
		q=RaggedTensor.from_lengths(q, qo_lens),
		k=k_ragged,
		v=v_ragged,
		cache=cache,
		kv=kv,
	)
