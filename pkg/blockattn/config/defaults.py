from __future__ import annotations
from dataclasses import dataclass

@dataclass(frozen=True)
class Defaults:
	## --- Scheduler --- ##
	# Cost model, cost(l_q, l_kv) = alpha*l_q + beta*l_kv
	alpha : float = 1.0
	beta : float = 1.0
	# Query tile sizes the engine ships, ascending
	tile_sizes : tuple[int, ...] = (1, 16, 32, 64, 128)
	# KV rows streamed per inner step of a work item
	kv_tile_size : int = 64

	## --- Runtime --- ##
	plan_cache_size : int = 16
	num_workers_env : str = "BLOCKATTN_NUM_WORKERS" # None/unset => os.cpu_count()

	## --- Numerics --- ##
	engine_dtype : str = "float32"
	oracle_dtype : str = "float64"
	single_tolerance : float = 1e-5
	double_tolerance : float = 1e-12

	## --- Workloads --- ##
	zipf_exponent : float = 1.1
	zipf_support : int = 64
	incremental_fraction : float = 0.25 # l_qo = fraction * l_kv for incremental prefill
	page_size : int = 16
	block_rows : int = 16 # query rows per BSR row block of a generated page table
	seed : int = 0

	## --- Bench --- ##
	bench_repeats : int = 5
	bench_warmup : int = 1

	## --- IO --- ##
	fikv_magic : bytes = b"FIKV"
	fikv_version : int = 1
