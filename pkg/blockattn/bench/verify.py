"""Engine vs oracle comparison."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from blockattn.attention import VariantSpec, builtin_vanilla, oracle_attention, with_causal
from blockattn.config import Defaults
from blockattn.runtime import Engine, EngineBounds, MergeEntry, Plan, PlanHandle
from .workloads import Modes, Workload, WorkloadProfile, generate_workload

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class VerifyReport:
	max_abs: float
	max_rel: float
	tolerance: float
	passed: bool
	num_ctas: int
	num_slots: int
	fingerprint: str

	def to_dict(self) -> dict[str, Any]:
		return {
			"max_abs": self.max_abs,
			"max_rel": self.max_rel,
			"tolerance": self.tolerance,
			"passed": self.passed,
			"num_ctas": self.num_ctas,
			"num_slots": self.num_slots,
			"fingerprint": self.fingerprint,
		}

def engine_for(workload:Workload, num_ctas:int, dtype=Defaults.engine_dtype, num_workers:int|None=None) -> Engine:
	"""An engine whose bounds fit the workload exactly."""
	bounds = EngineBounds(
		max_batch_size=workload.profile.batch_size,
		max_total_qo=max(1, int(workload.qo_lens.sum())),
		max_total_kv=max(1, int(workload.kv_lens.sum())),
		num_ctas=num_ctas,
	)
	return Engine(workload.head, bounds, dtype=dtype, num_workers=num_workers)

def workload_variant(workload:Workload, variant:VariantSpec|None) -> VariantSpec:
	"""The variant as run on this workload; prefill modes add the causal mask."""
	variant = variant or builtin_vanilla()
	if workload.profile.mode in Modes.CAUSAL:
		return with_causal(variant)
	return variant

def corrupt_merge_map(plan:Plan) -> Plan:
	"""Negative control: every split tile contracts its first slot over and over."""
	entries = tuple(
		entry if entry.is_direct else MergeEntry(entry.request, entry.q_tile, (entry.slots[0],) * len(entry.slots))
		for entry in plan.merge_map
	)
	if all(e.is_direct for e in entries):
		logger.warning("Plan %s has no split tiles, the corrupted merge map is unchanged", plan.fingerprint[:12])
	return replace(plan, merge_map=entries, fingerprint=f"{plan.fingerprint}-corrupt")

def compare_outputs(actual:np.ndarray, expected:np.ndarray, tolerance:float) -> tuple[float, float, bool]:
	"""(max_abs, max_rel, passed); only the absolute error decides."""
	err = np.abs(np.asarray(actual, dtype=np.float64) - expected)
	max_abs = float(err.max(initial=0.0))
	max_rel = float((err / np.maximum(np.abs(expected), np.finfo(np.float64).tiny)).max(initial=0.0))
	return max_abs, max_rel, max_abs <= tolerance

def verify(
	profile:WorkloadProfile|Workload,
	variant:VariantSpec|None=None,
	num_ctas:int=1,
	*,
	dtype=Defaults.engine_dtype,
	num_workers:int|None=None,
	tolerance:float|None=None,
	corrupt_merge:bool=False,
) -> VerifyReport:
	"""Plan and run a workload, then compare against the double precision oracle.

	Passes when the max-abs error is at most tol, with tol = 1e-5 in single
	and 1e-12 in double precision unless given. The max-rel error is reported only.

	Args:
		profile: A profile to generate, or an already generated workload.
		variant: Defaults to vanilla; prefill modes add the causal mask.
		num_ctas: CTA count the plan balances over.
		dtype: Engine precision.
		num_workers: Worker threads, see `resolve_num_workers`.
		tolerance: Overrides the precision's default tolerance.
		corrupt_merge: Run with a corrupted merge map, which must fail.
	"""
	workload = profile if isinstance(profile, Workload) else generate_workload(profile)
	variant = workload_variant(workload, variant)
	dtype = np.dtype(dtype)
	if tolerance is None:
		tolerance = Defaults.double_tolerance if dtype == np.float64 else Defaults.single_tolerance

	engine = engine_for(workload, num_ctas, dtype=dtype, num_workers=num_workers)
	handle = engine.plan_for(workload.kv)
	if corrupt_merge:
		handle = PlanHandle(corrupt_merge_map(handle.plan))
	result = engine.run(handle, workload.q, workload.kv, variant)

	expected = oracle_attention(
		workload.q.indptr, workload.k.indptr, workload.head,
		workload.q.data, workload.k.data, workload.v.data, variant,
		dtype=np.dtype(Defaults.oracle_dtype),
	).output
	max_abs, max_rel, passed = compare_outputs(result.data, expected, tolerance)
	if not passed:
		logger.warning("Verification failed: max_abs=%.3e max_rel=%.3e tolerance=%.1e", max_abs, max_rel, tolerance)
	return VerifyReport(
		max_abs=max_abs,
		max_rel=max_rel,
		tolerance=tolerance,
		passed=passed,
		num_ctas=num_ctas,
		num_slots=handle.plan.num_slots,
		fingerprint=handle.fingerprint,
	)
