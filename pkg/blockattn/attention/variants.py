"""Attention variants as hook pipelines.

A variant evaluates

	epilogue(scan(logits(f_q(Q) . f_k(K))) . f_v(V))

where `scan` is softmax, or a plain weighted sum when softmax is disabled.
Hooks are vectorized over a tile: they receive whole blocks plus an
`IndexContext` whose index fields broadcast against the (T, N) logits tile,
so every hook still acts pointwise on (query, key, head) positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

## --- Variant names --- ##
class VariantNames:
	VANILLA = "vanilla"
	CAUSAL = "causal"
	SOFTCAP = "softcap"
	SLIDING_WINDOW = "sliding_window"
	ALIBI = "alibi"
	SIGMOID = "sigmoid"
	ROPE = "rope"
	ALL = [
		VANILLA,
		CAUSAL,
		SOFTCAP,
		SLIDING_WINDOW,
		ALIBI,
		SIGMOID,
		ROPE,
	]

@dataclass(frozen=True)
class IndexContext:
	"""Positions seen by the hooks of one tile.

	Query-side fields (`qo_idx`, `qo_head`, and `qo_len`/`kv_len` when rows
	come from different requests) have shape (T, 1); `kv_idx` has shape (1, N).
	`qo_idx` counts query rows within the request, `kv_idx` KV tokens.
	"""
	request_id: np.ndarray|int
	qo_idx: np.ndarray
	kv_idx: np.ndarray
	qo_head: np.ndarray|int
	kv_head: int
	qo_len: np.ndarray|int
	kv_len: np.ndarray|int

	def __post_init__(self):
		qo_idx = np.asarray(self.qo_idx)
		kv_idx = np.asarray(self.kv_idx)
		if qo_idx.size and (qo_idx.min() < 0 or np.any(qo_idx >= self.qo_len)):
			raise ValueError(f"Query index outside [0, {self.qo_len}) for request {self.request_id}")
		if kv_idx.size and (kv_idx.min() < 0 or np.any(kv_idx >= self.kv_len)):
			raise ValueError(f"KV index outside [0, {self.kv_len}) for request {self.request_id}")

	@property
	def qo_pos(self) -> np.ndarray:
		"""Query position in KV coordinates: queries sit at the end of the KV sequence."""
		return self.qo_idx + self.kv_len - self.qo_len

	def with_kv(self, kv_idx:np.ndarray) -> "IndexContext":
		return replace(self, kv_idx=np.asarray(kv_idx).reshape(1, -1))

TensorHook = Callable[[np.ndarray, IndexContext, Mapping[str, Any]], np.ndarray]
MaskHook = Callable[[IndexContext, Mapping[str, Any]], np.ndarray|bool]

## ------ Default hooks ------ ##
def identity(x:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	return x

def scale_query(q:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	"""q / sqrt(D), or q * params["sm_scale"] when given."""
	scale = params.get("sm_scale")
	if scale is None:
		scale = 1.0 / math.sqrt(q.shape[-1])
	return q * np.asarray(scale, dtype=q.dtype)

def keep_all(ctx:IndexContext, params:Mapping[str, Any]) -> bool:
	return True

@dataclass(frozen=True)
class VariantSpec:
	name: str = VariantNames.VANILLA
	query_transform: TensorHook = scale_query
	key_transform: TensorHook = identity
	value_transform: TensorHook = identity
	output_transform: TensorHook = identity
	logits_transform: TensorHook = identity
	logits_mask: MaskHook = keep_all
	use_softmax: bool = True
	params: Mapping[str, Any] = field(default_factory=dict)

	def __post_init__(self):
		# Read-only view so a spec can be shared across threads
		object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

@dataclass(frozen=True)
class ScoredTile:
	"""Transformed logits, the keep mask and transformed values of one tile."""
	logits: np.ndarray
	keep: np.ndarray
	values: np.ndarray

## ------ Pipeline ------ ##
def transform_query(spec:VariantSpec, q:np.ndarray, ctx:IndexContext) -> np.ndarray:
	return spec.query_transform(q, ctx, spec.params)

def score_tile(spec:VariantSpec, q:np.ndarray, k:np.ndarray, v:np.ndarray, ctx:IndexContext) -> ScoredTile:
	"""
	Score an already transformed (T, D) query block against a (N, D) KV block.
	"""
	if q.shape[-1] != k.shape[-1] or k.shape != v.shape:
		raise ValueError(f"Tile dimension mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
	k = spec.key_transform(k, ctx, spec.params)
	v = spec.value_transform(v, ctx, spec.params)
	logits = spec.logits_transform(q @ k.T, ctx, spec.params)
	keep = np.broadcast_to(np.asarray(spec.logits_mask(ctx, spec.params), dtype=bool), logits.shape)
	return ScoredTile(logits, keep, v)

def apply_pipeline(spec:VariantSpec, q:np.ndarray, k:np.ndarray, v:np.ndarray, ctx:IndexContext) -> ScoredTile:
	"""
	Run the hooks up to the scan for a raw (T, D) query block.
	Pairs with keep = False contribute nothing downstream.
	"""
	return score_tile(spec, transform_query(spec, q, ctx), k, v, ctx)

def check_heads(spec:VariantSpec, num_qo_heads:int) -> None:
	"""Raise if per-head parameters (ALiBi slopes) do not cover every query head."""
	slopes = spec.params.get("slopes")
	if slopes is not None and len(slopes) < num_qo_heads:
		raise ValueError(f"Variant {spec.name!r} has {len(slopes)} slopes for {num_qo_heads} query heads")

def apply_epilogue(spec:VariantSpec, output:np.ndarray, ctx:IndexContext) -> np.ndarray:
	return spec.output_transform(output, ctx, spec.params)

## ------ Masks and transforms of the built-ins ------ ##
def causal_mask(ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	return ctx.kv_idx <= ctx.qo_pos

def sliding_window_mask(ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	pos = ctx.qo_pos
	return (ctx.kv_idx <= pos) & (ctx.kv_idx > pos - params["window"])

def softcap_logits(s:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	cap = params["cap"]
	return cap * np.tanh(s / cap)

def alibi_logits(s:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	slopes = params["slopes"]
	slope = slopes[np.asarray(ctx.qo_head)]
	return s + (slope * (ctx.kv_idx - ctx.qo_pos)).astype(s.dtype)

def sigmoid_logits(s:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	return expit(s + np.asarray(params["bias"], dtype=s.dtype))

def rotate(x:np.ndarray, positions:np.ndarray, theta:float) -> np.ndarray:
	"""
	Rotary embedding of (n, D) rows at (n, 1) positions, pairing dims (i, i + D/2).
	Angles are evaluated in double precision.
	"""
	dim = x.shape[-1]
	if dim % 2:
		raise ValueError(f"Rotary embedding needs an even head dim, got {dim}")
	half = dim // 2
	inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
	angles = np.asarray(positions, dtype=np.float64).reshape(-1, 1) * inv_freq
	cos = np.cos(angles).astype(x.dtype)
	sin = np.sin(angles).astype(x.dtype)
	x1, x2 = x[..., :half], x[..., half:]
	return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

def _rope_offset(ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray|int:
	offsets = params.get("positions")
	if offsets is None:
		return 0
	return np.asarray(offsets, dtype=np.int64)[np.asarray(ctx.request_id)]

def rope_query(q:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	pos = np.broadcast_to(ctx.qo_pos, (q.shape[0], 1)) + _rope_offset(ctx, params)
	return scale_query(rotate(q, pos, params["theta"]), ctx, params)

def rope_key(k:np.ndarray, ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
	offset = np.unique(_rope_offset(ctx, params))
	if offset.size > 1:
		raise ValueError("Keys shared by requests with different rotary offsets")
	pos = np.asarray(ctx.kv_idx).reshape(-1, 1) + int(offset[0])
	return rotate(k, pos, params["theta"])

## ------ Built-in variants ------ ##
def builtin_vanilla() -> VariantSpec:
	return VariantSpec()

def builtin_causal() -> VariantSpec:
	"""Right-aligned causal mask: kv_idx <= l_kv - l_qo + q_idx."""
	return VariantSpec(name=VariantNames.CAUSAL, logits_mask=causal_mask)

def builtin_softcap(cap:float) -> VariantSpec:
	if not cap > 0:
		raise ValueError(f"Soft-cap must be positive, got {cap}")
	return VariantSpec(name=VariantNames.SOFTCAP, logits_transform=softcap_logits, params={"cap": float(cap)})

def builtin_sliding_window(window:int) -> VariantSpec:
	if window < 1:
		raise ValueError(f"Window must be at least one token, got {window}")
	return VariantSpec(
		name=VariantNames.SLIDING_WINDOW,
		logits_mask=sliding_window_mask,
		params={"window": int(window)},
	)

def builtin_alibi(slopes:Sequence[float]) -> VariantSpec:
	"""Adds slope(head) * (kv_idx - query position) to the logits."""
	slopes = np.asarray(slopes, dtype=np.float64)
	if slopes.ndim != 1 or slopes.size == 0:
		raise ValueError(f"Expected one slope per query head, got shape {slopes.shape}")
	slopes.setflags(write=False)
	return VariantSpec(name=VariantNames.ALIBI, logits_transform=alibi_logits, params={"slopes": slopes})

def alibi_slopes(num_heads:int) -> np.ndarray:
	"""
	Geometric slopes 2^(-8i/n); non powers of two interleave the next power's slopes.
	"""
	if num_heads < 1:
		raise ValueError(f"num_heads must be positive, got {num_heads}")
	def _pow2(n:int) -> list[float]:
		start = 2.0 ** (-8.0 / n)
		return [start ** (i + 1) for i in range(n)]
	closest = 2 ** int(math.floor(math.log2(num_heads)))
	slopes = _pow2(closest)
	if closest < num_heads:
		slopes += _pow2(2 * closest)[0::2][:num_heads - closest]
	return np.asarray(slopes, dtype=np.float64)

def builtin_sigmoid(bias:float) -> VariantSpec:
	"""Weights sigmoid(s + bias); no softmax, partial results add up."""
	return VariantSpec(
		name=VariantNames.SIGMOID,
		logits_transform=sigmoid_logits,
		use_softmax=False,
		params={"bias": float(bias)},
	)

def builtin_fused_rope(theta:float=1e4, positions:Sequence[int]|None=None) -> VariantSpec:
	"""
	Rotary embedding fused into the query/key transforms.
	`positions` optionally shifts every position of request i by positions[i].
	"""
	if not theta > 0:
		raise ValueError(f"RoPE base must be positive, got {theta}")
	params = {"theta": float(theta)}
	if positions is not None:
		offsets = np.asarray(positions, dtype=np.int64)
		offsets.setflags(write=False)
		params["positions"] = offsets
	return VariantSpec(
		name=VariantNames.ROPE,
		query_transform=rope_query,
		key_transform=rope_key,
		params=params,
	)

def with_causal(spec:VariantSpec) -> VariantSpec:
	"""Conjoin the causal mask onto a variant's own mask."""
	if spec.logits_mask in (causal_mask, sliding_window_mask):
		return spec
	if spec.logits_mask is keep_all:
		return replace(spec, logits_mask=causal_mask)
	base = spec.logits_mask
	def _mask(ctx:IndexContext, params:Mapping[str, Any]) -> np.ndarray:
		return np.logical_and(base(ctx, params), causal_mask(ctx, params))
	return replace(spec, logits_mask=_mask)

def variant_from_params(params:Mapping[str, Any], num_qo_heads:int|None=None) -> VariantSpec:
	"""
	Build a built-in from CLI style JSON, e.g. {"variant": "softcap", "cap": 30.0}.
	"""
	params = dict(params)
	name = params.pop("variant", VariantNames.VANILLA)
	try:
		match name:
			case VariantNames.VANILLA:
				spec = builtin_vanilla()
			case VariantNames.CAUSAL:
				spec = builtin_causal()
			case VariantNames.SOFTCAP:
				spec = builtin_softcap(params.pop("cap"))
			case VariantNames.SLIDING_WINDOW:
				spec = builtin_sliding_window(params.pop("window"))
			case VariantNames.ALIBI:
				slopes = params.pop("slopes", None)
				if slopes is None:
					if num_qo_heads is None:
						raise ValueError("ALiBi needs explicit slopes or a head count")
					slopes = alibi_slopes(num_qo_heads)
				spec = builtin_alibi(slopes)
			case VariantNames.SIGMOID:
				spec = builtin_sigmoid(params.pop("bias"))
			case VariantNames.ROPE:
				spec = builtin_fused_rope(params.pop("theta", 1e4), params.pop("positions", None))
			case _:
				raise KeyError(f"Unknown variant {name!r}. Allowed: {VariantNames.ALL}")
	except KeyError as e:
		if name in VariantNames.ALL:
			raise KeyError(f"Variant {name!r} is missing parameter {e}") from e
		raise
	if "sm_scale" in params:
		spec = replace(spec, params={**spec.params, "sm_scale": float(params.pop("sm_scale"))})
	if params:
		raise ValueError(f"Unused parameters for variant {name!r}: {sorted(params)}")
	return spec
