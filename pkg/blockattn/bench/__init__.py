from .workloads import (
	Distributions,
	Modes,
	WorkloadProfile,
	Workload,
	sample_lengths,
	query_lengths,
	generate_workload,
)
from .verify import VerifyReport, compare_outputs, engine_for, workload_variant, corrupt_merge_map, verify
from .report import BalanceReport, BenchResult, request_intensity, balance_reports, bench
