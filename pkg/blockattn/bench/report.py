"""Balance and timing reports: the scheduler against a no-split baseline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from blockattn.attention import VariantSpec, operational_intensity
from blockattn.config import Defaults
from blockattn.runtime import baseline_schedule, build_plan
from .verify import engine_for, workload_variant
from .workloads import Workload, WorkloadProfile, generate_workload

logger = logging.getLogger(__name__)

@dataclass(frozen=True)
class BalanceReport:
	cta_costs: tuple[float, ...]
	makespan: float
	mean_cost: float
	imbalance_ratio: float # makespan / mean_cost, 1.0 for an idle machine
	num_chunks: int
	intensity: tuple[float, ...] = field(default=()) # per request

	@classmethod
	def from_costs(cls, costs:Sequence[float], num_chunks:int, intensity:Sequence[float]=()) -> "BalanceReport":
		costs = tuple(float(c) for c in costs)
		if not costs:
			raise ValueError("A balance report needs at least one CTA")
		makespan = max(costs)
		mean = float(np.mean(costs))
		return cls(
			cta_costs=costs,
			makespan=makespan,
			mean_cost=mean,
			imbalance_ratio=makespan / mean if mean > 0 else 1.0,
			num_chunks=num_chunks,
			intensity=tuple(intensity),
		)

	def to_dict(self) -> dict[str, Any]:
		return {
			"cta_costs": list(self.cta_costs),
			"makespan": self.makespan,
			"mean_cost": self.mean_cost,
			"imbalance_ratio": self.imbalance_ratio,
			"num_chunks": self.num_chunks,
		}

@dataclass(frozen=True)
class BenchResult:
	balanced: BalanceReport
	baseline: BalanceReport
	wall_times: tuple[float, ...] # seconds per repeat, after warmup

	@property
	def intensity_stats(self) -> dict[str, float]:
		values = np.asarray(self.balanced.intensity, dtype=np.float64)
		if values.size == 0:
			return {"min": 0.0, "mean": 0.0, "max": 0.0}
		return {"min": float(values.min()), "mean": float(values.mean()), "max": float(values.max())}

	def to_dict(self) -> dict[str, Any]:
		times = np.asarray(self.wall_times, dtype=np.float64)
		return {
			"balanced": self.balanced.to_dict(),
			"baseline": self.baseline.to_dict(),
			"wall_time": {
				"repeats": int(times.size),
				"mean_s": float(times.mean()) if times.size else 0.0,
				"min_s": float(times.min()) if times.size else 0.0,
			},
			"intensity": self.intensity_stats,
		}

def request_intensity(workload:Workload) -> tuple[float, ...]:
	g = workload.head.group_size
	return tuple(
		operational_intensity(int(q), int(kv), g)
		for q, kv in zip(workload.qo_lens, workload.kv_lens) if q > 0 and kv > 0
	)

def balance_reports(workload:Workload, num_ctas:int) -> tuple[BalanceReport, BalanceReport]:
	"""(balanced, baseline) model-cost reports of a workload."""
	spec = workload.spec(num_ctas)
	plan = build_plan(spec)
	intensity = request_intensity(workload)
	balanced = BalanceReport.from_costs(plan.cta_costs, plan.num_work_items, intensity)
	baseline_tiles = sum(-(-int(q) * spec.head.group_size // plan.tile_size) for q in spec.qo_lens)
	baseline = BalanceReport.from_costs(baseline_schedule(spec), baseline_tiles, intensity)
	return balanced, baseline

def bench(
	profile:WorkloadProfile|Workload,
	variant:VariantSpec|None=None,
	num_ctas:int=1,
	repeats:int=Defaults.bench_repeats,
	*,
	warmup:int=Defaults.bench_warmup,
	num_workers:int|None=None,
) -> BenchResult:
	"""
	Balance reports for both schedules plus wall time of plan + run over
	`repeats` steps after `warmup` untimed ones. Times are relative numbers
	for this machine only.
	"""
	if repeats < 1 or warmup < 0:
		raise ValueError(f"Need repeats >= 1 and warmup >= 0, got {repeats}, {warmup}")
	workload = profile if isinstance(profile, Workload) else generate_workload(profile)
	variant = workload_variant(workload, variant)
	balanced, baseline = balance_reports(workload, num_ctas)

	engine = engine_for(workload, num_ctas, num_workers=num_workers)
	times = []
	for i in range(warmup + repeats):
		start = time.perf_counter()
		handle = engine.plan_for(workload.kv)
		engine.run(handle, workload.q, workload.kv, variant)
		if i >= warmup:
			times.append(time.perf_counter() - start)
	logger.debug("Bench: balanced makespan %.1f vs baseline %.1f, mean step %.4fs",
		balanced.makespan, baseline.makespan, float(np.mean(times)))
	return BenchResult(balanced=balanced, baseline=baseline, wall_times=tuple(times))
